"""Run configuration: key schema, config-file parsing, flag overrides.

Configs are flat ``key = value`` files with dotted section keys
(``train.steps = 500``); command-line flags use the same dotted names and
take precedence over file values. Unknown keys are hard errors. Every
default is materialized at parse time, so the resolved mapping written to
the run manifest re-parses to an equal configuration.
"""

from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentationConfig
from .backend import DiffusionSchedule, make_schedule
from .learning import TrainingConfig
from .transfer import EditConfig, GenerationConfig

COMMANDS = ("learn", "edit", "generate", "match-mask", "discover-mask")

AUTO = "auto"


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_shape(text: str):
    if text.strip() == AUTO:
        return AUTO
    parts = [int(p) for p in text.lower().split("x")]
    if len(parts) != 3 or min(parts) < 1:
        raise ValueError(f"shape must be CxHxW with positive dims, got {text!r}")
    return tuple(parts)


def _parse_int_list(text: str):
    items = [p.strip() for p in text.split(",") if p.strip()]
    return tuple(int(p) for p in items)


def _parse_path_list(text: str):
    return tuple(p.strip() for p in text.split(",") if p.strip())


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and all(isinstance(v, int) for v in value) and len(value) == 3:
            # ambiguous with int lists; shapes are formatted by their own type
            pass
        return ",".join(str(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class KeySpec:
    name: str
    kind: str  # int | float | str | bool | path | shape | int_list | path_list | choice
    default: object
    choices: tuple = ()
    help: str = ""

    def parse(self, text: str):
        text = text.strip()
        try:
            if self.kind == "int":
                return int(text)
            if self.kind == "float":
                return float(text)
            if self.kind in ("str", "path"):
                return text
            if self.kind == "bool":
                return _parse_bool(text)
            if self.kind == "shape":
                return _parse_shape(text)
            if self.kind == "int_list":
                return _parse_int_list(text)
            if self.kind == "path_list":
                return _parse_path_list(text)
            if self.kind == "choice":
                if text not in self.choices:
                    raise ValueError(f"must be one of {self.choices}")
                return text
        except ValueError as exc:
            raise ConfigError(f"key {self.name!r}: {exc}") from None
        raise ConfigError(f"key {self.name!r} has unknown kind {self.kind!r}")

    def format(self, value) -> str:
        if self.kind == "shape":
            return AUTO if value == AUTO else "x".join(str(v) for v in value)
        return _fmt(value)


_SCHEMA_LIST = [
    KeySpec("seed", "int", 0, help="master seed; per-subsystem seeds are derived from it"),
    KeySpec("output.dir", "path", "", help="output directory (required)"),
    # backend
    KeySpec("backend.kind", "choice", "toy", choices=("toy", "external")),
    KeySpec("backend.latent_shape", "shape", AUTO, help="CxHxW or 'auto' (from the input image)"),
    KeySpec("backend.embed_dim", "int", 8),
    KeySpec("backend.num_heads", "int", 2),
    KeySpec("backend.checkpoint", "path", "", help="external model checkpoint path"),
    KeySpec("backend.guidance_scale", "float", 1.0, help="passed through to external backends"),
    # schedule
    KeySpec("schedule.T", "int", 50),
    KeySpec("schedule.kind", "choice", "cosine", choices=("cosine", "linear")),
    # concept learning
    KeySpec("train.steps", "int", 500),
    KeySpec("train.learning_rate", "float", 1e-5),
    KeySpec("train.lambda_att", "float", 0.5),
    KeySpec("train.lambda_roi", "float", 0.5),
    KeySpec("train.alpha", "float", 0.5),
    KeySpec("train.token_name", "str", "v*"),
    KeySpec("train.token_init_word", "str", "style"),
    KeySpec("train.prompt_template", "str", "A {OBJECT} with [v*] style"),
    KeySpec("train.augment.p_hflip", "float", 0.5),
    KeySpec("train.augment.p_grayscale", "float", 0.1),
    KeySpec("train.augment.p_zoom", "float", 0.3),
    KeySpec("train.augment.p_jitter", "float", 0.3),
    KeySpec("train.augment.zoom_min", "float", 0.6),
    KeySpec("train.augment.zoom_max", "float", 1.4),
    KeySpec("train.augment.jitter_brightness", "float", 0.2),
    KeySpec("train.augment.jitter_contrast", "float", 0.2),
    KeySpec("train.augment.jitter_saturation", "float", 0.2),
    # editing
    KeySpec("edit.t_start", "int", 10),
    KeySpec("edit.eta", "float", 0.05),
    KeySpec("edit.guidance_iters", "int", 1),
    KeySpec("edit.blend_mode", "choice", "noise_matched", choices=("noise_matched", "fixed_start")),
    KeySpec("edit.prompt", "str", "", help="prompt with the concept placeholder; default: checkpoint template"),
    KeySpec("edit.object_class", "str", "", help="default: the checkpoint's object class"),
    # generation
    KeySpec("generate.t_s", "int", 5),
    KeySpec("generate.object_class", "str", ""),
    # target-mask matching
    KeySpec("match.steps", "int", 500),
    KeySpec("match.learning_rate", "float", 1e-5),
    KeySpec("match.threshold", "float", 0.5),
    KeySpec("match.probe_ts", "int_list", (10, 25, 40)),
    KeySpec("match.keep_largest_component", "bool", True),
    KeySpec("match.token_name", "str", "w*"),
    # source-mask discovery
    KeySpec("discover.steps", "int", 500),
    KeySpec("discover.learning_rate", "float", 1e-5),
    KeySpec("discover.threshold", "float", 0.5),
    KeySpec("discover.probe_ts", "int_list", (10, 25, 40)),
    KeySpec("discover.keep_largest_component", "bool", True),
    KeySpec("discover.token_name", "str", "w*"),
    KeySpec("discover.token_init_word", "str", "style"),
    KeySpec("discover.extract_index", "int", 0),
    # inputs
    KeySpec("input.source_image", "path", ""),
    KeySpec("input.source_mask", "path", ""),
    KeySpec("input.target_image", "path", ""),
    KeySpec("input.target_mask", "path", ""),
    KeySpec("input.checkpoint", "path", ""),
    KeySpec("input.object_class", "str", ""),
    KeySpec("input.images", "path_list", ()),
]

SCHEMA: dict[str, KeySpec] = {spec.name: spec for spec in _SCHEMA_LIST}

REQUIRED_INPUTS = {
    "learn": ("input.source_image", "input.source_mask", "input.object_class", "output.dir"),
    "edit": ("input.target_image", "input.target_mask", "input.checkpoint", "output.dir"),
    "generate": ("input.checkpoint", "output.dir"),
    "match-mask": (
        "input.checkpoint",
        "input.source_image",
        "input.source_mask",
        "input.target_image",
        "output.dir",
    ),
    "discover-mask": ("input.images", "input.object_class", "output.dir"),
}

_FILE_KEYS = (
    "input.source_image",
    "input.source_mask",
    "input.target_image",
    "input.target_mask",
    "input.checkpoint",
)


@dataclass
class RunConfig:
    command: str
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")

    def __getitem__(self, key: str):
        return self.values[key]

    def with_value(self, key: str, value) -> "RunConfig":
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        updated = dict(self.values)
        updated[key] = value
        return RunConfig(command=self.command, values=updated)

    def resolved_map(self) -> dict:
        """Flat string map of every key, suitable for manifests/config files."""
        return {key: SCHEMA[key].format(self.values[key]) for key in sorted(self.values)}

    # typed sub-config builders -------------------------------------------

    def schedule(self) -> DiffusionSchedule:
        return make_schedule(T=self["schedule.T"], kind=self["schedule.kind"])

    def augmentation_config(self) -> AugmentationConfig:
        return AugmentationConfig(
            p_grayscale=self["train.augment.p_grayscale"],
            p_hflip=self["train.augment.p_hflip"],
            p_zoom=self["train.augment.p_zoom"],
            p_jitter=self["train.augment.p_jitter"],
            zoom_range=(self["train.augment.zoom_min"], self["train.augment.zoom_max"]),
            jitter_brightness=self["train.augment.jitter_brightness"],
            jitter_contrast=self["train.augment.jitter_contrast"],
            jitter_saturation=self["train.augment.jitter_saturation"],
        )

    def training_config(self, seed: int) -> TrainingConfig:
        return TrainingConfig(
            steps=self["train.steps"],
            learning_rate=self["train.learning_rate"],
            lambda_att=self["train.lambda_att"],
            lambda_roi=self["train.lambda_roi"],
            alpha=self["train.alpha"],
            seed=seed,
            augmentation=self.augmentation_config(),
            token_name=self["train.token_name"],
            token_init_word=self["train.token_init_word"],
        )

    def edit_cfg(self, seed: int) -> EditConfig:
        return EditConfig(
            t_start=self["edit.t_start"],
            eta=self["edit.eta"],
            guidance_iters_per_step=self["edit.guidance_iters"],
            blend_mode=self["edit.blend_mode"],
            seed=seed,
        )

    def generation_cfg(self, seed: int, object_class: str) -> GenerationConfig:
        return GenerationConfig(t_s=self["generate.t_s"], object_class=object_class, seed=seed)


def read_config_file(path: str | Path) -> dict:
    """Parse ``key = value`` lines; '#' starts a comment, blanks are skipped."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        raw[key.strip()] = value.strip()
    return raw


def write_config_file(flat: dict, path: str | Path) -> None:
    lines = [f"{key} = {flat[key]}" for key in sorted(flat)]
    Path(path).write_text("\n".join(lines) + "\n")


def parse_config(
    command: str,
    config_path: str | Path | None = None,
    overrides: dict | None = None,
    check_files: bool = True,
) -> RunConfig:
    """Materialize a full RunConfig from defaults, a config file, and flag
    overrides (in increasing precedence). Unknown keys and missing required
    inputs are hard errors; referenced input files must exist."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")

    values = {spec.name: spec.default for spec in _SCHEMA_LIST}

    def apply(raw: dict, origin: str):
        for key, text in raw.items():
            if key not in SCHEMA:
                raise ConfigError(f"{origin}: unknown config key {key!r}")
            values[key] = SCHEMA[key].parse(text) if isinstance(text, str) else text

    if config_path is not None:
        if not Path(config_path).is_file():
            raise ConfigError(f"config file not found: {config_path}")
        apply(read_config_file(config_path), str(config_path))
    if overrides:
        apply(overrides, "command line")

    cfg = RunConfig(command=command, values=values)

    missing = [
        key
        for key in REQUIRED_INPUTS[command]
        if not cfg.values[key] or (key == "input.images" and len(cfg.values[key]) == 0)
    ]
    if missing:
        raise ConfigError(f"{command}: missing required keys: {', '.join(missing)}")

    if check_files:
        paths = [cfg.values[k] for k in _FILE_KEYS if cfg.values[k]]
        paths.extend(cfg.values["input.images"])
        for p in paths:
            if not Path(p).is_file():
                raise ConfigError(f"input file not found: {p}")
    return cfg


# --------------------------------------------------------------------------
# backend construction
# --------------------------------------------------------------------------

_BACKEND_FACTORIES: dict = {}


def register_backend_factory(kind: str, factory) -> None:
    """Register a constructor for an external backend kind.

    The factory receives (RunConfig, resolved latent_shape) and must return
    an object satisfying the backend adapter contract.
    """
    _BACKEND_FACTORIES[kind] = factory


def build_backend(cfg: RunConfig, latent_shape: tuple[int, int, int]):
    kind = cfg["backend.kind"]
    if kind == "toy":
        from .backend import ToyBackend

        return ToyBackend(
            seed=cfg["seed"],
            latent_shape=latent_shape,
            embed_dim=cfg["backend.embed_dim"],
            num_heads=cfg["backend.num_heads"],
        )
    if kind in _BACKEND_FACTORIES:
        return _BACKEND_FACTORIES[kind](cfg, latent_shape)
    raise ConfigError(
        f"backend kind {kind!r} has no registered adapter; the built-in backend is 'toy'"
    )
