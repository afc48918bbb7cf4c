"""Command-line front end and run orchestration.

Five subcommands: ``learn`` (train a concept checkpoint from one masked
image), ``edit`` (transfer the concept into a masked region of a target
image), ``generate`` (two-stage sampling of a new object with the concept),
``match-mask`` (segment the corresponding region on a target image) and
``discover-mask`` (find a shared concept region across several images).

Each run stages its artifacts, then moves them into the output directory and
writes ``manifest.json`` atomically; on failure the directory holds only the
manifest, marked failed. Exit codes: 0 success, 1 usage/config error,
2 runtime error.
"""

import argparse
import hashlib
import json
import shutil
import sys
import time
from pathlib import Path

import torch

from . import __version__
from .backend import ShapeMismatchError, ToyBackend, derive_seed
from .config import (
    AUTO,
    COMMANDS,
    SCHEMA,
    ConfigError,
    RunConfig,
    build_backend,
    parse_config,
)
from .images import load_image, save_image
from .learning import (
    SourceSample,
    load_checkpoint,
    restore_backend,
    save_checkpoint,
    train_concept,
)
from .masking import load_mask, save_mask
from .roi_matching import (
    extract_source_mask,
    extract_target_mask,
    learn_common_concept_token,
    learn_target_matcher,
)
from .transfer import edit_image, generate_with_concept

SEED_RULE = "child = first 8 bytes of sha256('{master}:{label}'), int63"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits 2 by default; our contract is 1
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="localconcept", allow_abbrev=False)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command")
    for command in COMMANDS:
        p = sub.add_parser(command, allow_abbrev=False)
        p.add_argument("--config", default=None, help="key = value config file")
        for key, spec in SCHEMA.items():
            p.add_argument(f"--{key}", dest=key, default=None, metavar=spec.kind.upper(), help=spec.help or None)
    return parser


def _collect_overrides(ns: argparse.Namespace) -> dict:
    overrides = {}
    for key in SCHEMA:
        value = getattr(ns, key, None)
        if value is not None:
            overrides[key] = value
    return overrides


# --------------------------------------------------------------------------
# command runners: each returns (resolved cfg, {artifact name: relative path})
# --------------------------------------------------------------------------


def _resolve_latent_shape(cfg: RunConfig, image: torch.Tensor) -> tuple[int, int, int]:
    declared = cfg["backend.latent_shape"]
    if declared == AUTO:
        return (int(image.shape[0]), int(image.shape[1]), int(image.shape[2]))
    if cfg["backend.kind"] == "toy" and tuple(declared) != tuple(image.shape):
        raise ConfigError(
            f"backend.latent_shape {declared} does not match input image {tuple(image.shape)} "
            "(the toy backend uses an identity codec)"
        )
    return tuple(declared)


def _check_toy_geometry(backend, image: torch.Tensor, what: str) -> None:
    if tuple(image.shape) != tuple(backend.latent_shape):
        raise ConfigError(
            f"{what} shaped {tuple(image.shape)} does not match the checkpoint backend "
            f"latent {tuple(backend.latent_shape)}"
        )


def _echo_backend(cfg: RunConfig, backend) -> RunConfig:
    bcfg = backend.to_config()
    cfg = cfg.with_value("backend.kind", bcfg["kind"])
    cfg = cfg.with_value("backend.latent_shape", tuple(bcfg["latent_shape"]))
    cfg = cfg.with_value("backend.embed_dim", bcfg["embed_dim"])
    return cfg.with_value("backend.num_heads", bcfg["num_heads"])


def _write_loss_csv(trace, path: Path) -> None:
    lines = ["step,l_con,l_att,l_roi,l_tot"]
    for row in trace:
        lines.append(f"{row.step},{row.l_con!r},{row.l_att!r},{row.l_roi!r},{row.l_tot!r}")
    path.write_text("\n".join(lines) + "\n")


def _write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _check_mask_matches(mask, image: torch.Tensor, what: str) -> None:
    if mask.spatial != tuple(image.shape[-2:]):
        raise ConfigError(
            f"{what} mask {mask.spatial} does not match its image {tuple(image.shape[-2:])}"
        )


def _run_learn(cfg: RunConfig, staging: Path):
    image = load_image(cfg["input.source_image"])
    mask = load_mask(cfg["input.source_mask"])
    _check_mask_matches(mask, image, "source")
    latent_shape = _resolve_latent_shape(cfg, image)
    cfg = cfg.with_value("backend.latent_shape", latent_shape)
    backend = build_backend(cfg, latent_shape)
    sched = cfg.schedule()
    sample = SourceSample(
        image=image,
        mask=mask,
        object_class=cfg["input.object_class"],
        prompt_template=cfg["train.prompt_template"],
    )
    tcfg = cfg.training_config(seed=derive_seed(cfg["seed"], "train"))
    ckpt = train_concept(backend, sample, tcfg, sched)
    save_checkpoint(ckpt, staging / "checkpoint.bin")
    (staging / "traces").mkdir(parents=True, exist_ok=True)
    _write_loss_csv(ckpt.loss_trace, staging / "traces" / "loss_trace.csv")
    return cfg, {"checkpoint": "checkpoint.bin", "loss_trace": "traces/loss_trace.csv"}


def _edit_prompt(cfg: RunConfig, ckpt_manifest: dict, token_name: str) -> str:
    prompt = cfg["edit.prompt"] or ckpt_manifest["prompt_template"]
    object_class = cfg["edit.object_class"] or ckpt_manifest["object_class"]
    if "{OBJECT}" in prompt:
        prompt = prompt.replace("{OBJECT}", object_class)
    if f"[{token_name}]" not in prompt:
        raise ConfigError(f"edit prompt must contain the [{token_name}] placeholder: {prompt!r}")
    return prompt


def _run_edit(cfg: RunConfig, staging: Path):
    ckpt = load_checkpoint(cfg["input.checkpoint"])
    backend, token = restore_backend(ckpt)
    cfg = _echo_backend(cfg, backend)
    image = load_image(cfg["input.target_image"])
    mask = load_mask(cfg["input.target_mask"])
    _check_mask_matches(mask, image, "target")
    _check_toy_geometry(backend, image, "target image")
    sched = cfg.schedule()
    prompt = _edit_prompt(cfg, ckpt.config_manifest, token.name)
    ecfg = cfg.edit_cfg(seed=derive_seed(cfg["seed"], "edit"))
    edited, trace = edit_image(backend, token, image, mask, prompt, sched, ecfg)
    (staging / "images").mkdir(parents=True, exist_ok=True)
    (staging / "traces").mkdir(parents=True, exist_ok=True)
    save_image(edited, staging / "images" / "edited.png")
    _write_json({"prompt": prompt, **trace.to_json_dict()}, staging / "traces" / "edit_trace.json")
    return cfg, {"edited_image": "images/edited.png", "edit_trace": "traces/edit_trace.json"}


def _run_generate(cfg: RunConfig, staging: Path):
    ckpt = load_checkpoint(cfg["input.checkpoint"])
    tuned, token = restore_backend(ckpt)
    base = ToyBackend.from_config(ckpt.config_manifest["backend"])
    cfg = _echo_backend(cfg, tuned)
    sched = cfg.schedule()
    object_class = cfg["generate.object_class"] or ckpt.config_manifest["object_class"]
    gcfg = cfg.generation_cfg(seed=derive_seed(cfg["seed"], "generate"), object_class=object_class)
    image = generate_with_concept(base, tuned, token, sched, gcfg)
    (staging / "images").mkdir(parents=True, exist_ok=True)
    save_image(image, staging / "images" / "generated.png")
    return cfg, {"generated_image": "images/generated.png"}


def _run_match(cfg: RunConfig, staging: Path):
    ckpt = load_checkpoint(cfg["input.checkpoint"])
    backend, token = restore_backend(ckpt)
    cfg = _echo_backend(cfg, backend)
    source_image = load_image(cfg["input.source_image"])
    source_mask = load_mask(cfg["input.source_mask"])
    _check_mask_matches(source_mask, source_image, "source")
    target_image = load_image(cfg["input.target_image"])
    _check_toy_geometry(backend, source_image, "source image")
    _check_toy_geometry(backend, target_image, "target image")
    sched = cfg.schedule()
    object_class = cfg["input.object_class"] or ckpt.config_manifest["object_class"]
    sample = SourceSample(
        image=source_image,
        mask=source_mask,
        object_class=object_class,
        prompt_template=ckpt.config_manifest["prompt_template"],
    )
    region = learn_target_matcher(
        backend,
        token,
        sample,
        sched,
        steps=cfg["match.steps"],
        learning_rate=cfg["match.learning_rate"],
        seed=derive_seed(cfg["seed"], "match-train"),
        token_name=cfg["match.token_name"],
    )
    result = extract_target_mask(
        backend,
        region,
        target_image,
        sched,
        probe_timesteps=cfg["match.probe_ts"],
        seed=derive_seed(cfg["seed"], "match-probe"),
        threshold=cfg["match.threshold"],
        keep_largest_component=cfg["match.keep_largest_component"],
    )
    (staging / "masks").mkdir(parents=True, exist_ok=True)
    save_mask(result.mask, staging / "masks" / "target_mask.png")
    _write_json(
        {
            "confidence": result.confidence,
            "probe_timesteps": list(cfg["match.probe_ts"]),
            "threshold": cfg["match.threshold"],
            "keep_largest_component": cfg["match.keep_largest_component"],
            "token": region.token.name,
            "prompt": region.prompt(),
        },
        staging / "masks" / "target_mask.json",
    )
    return cfg, {"target_mask": "masks/target_mask.png", "match_report": "masks/target_mask.json"}


def _run_discover(cfg: RunConfig, staging: Path):
    paths = cfg["input.images"]
    if len(paths) < 2:
        raise ConfigError("discover-mask needs at least two input images")
    images = [load_image(p) for p in paths]
    shapes = {tuple(img.shape) for img in images}
    if len(shapes) != 1:
        raise ConfigError(f"input images must share one shape, got {sorted(shapes)}")
    latent_shape = _resolve_latent_shape(cfg, images[0])
    cfg = cfg.with_value("backend.latent_shape", latent_shape)
    backend = build_backend(cfg, latent_shape)
    sched = cfg.schedule()
    index = cfg["discover.extract_index"]
    if not 0 <= index < len(images):
        raise ConfigError(f"discover.extract_index {index} outside 0..{len(images) - 1}")
    region = learn_common_concept_token(
        backend,
        images,
        cfg["input.object_class"],
        sched,
        steps=cfg["discover.steps"],
        learning_rate=cfg["discover.learning_rate"],
        seed=derive_seed(cfg["seed"], "discover-train"),
        token_name=cfg["discover.token_name"],
        token_init_word=cfg["discover.token_init_word"],
    )
    result = extract_source_mask(
        backend,
        region,
        images[index],
        sched,
        probe_timesteps=cfg["discover.probe_ts"],
        seed=derive_seed(cfg["seed"], "discover-probe"),
        threshold=cfg["discover.threshold"],
        keep_largest_component=cfg["discover.keep_largest_component"],
    )
    (staging / "masks").mkdir(parents=True, exist_ok=True)
    save_mask(result.mask, staging / "masks" / "source_mask.png")
    _write_json(
        {
            "confidence": result.confidence,
            "probe_timesteps": list(cfg["discover.probe_ts"]),
            "threshold": cfg["discover.threshold"],
            "keep_largest_component": cfg["discover.keep_largest_component"],
            "token": region.token.name,
            "prompt": region.prompt(),
            "extracted_from": str(paths[index]),
        },
        staging / "masks" / "source_mask.json",
    )
    return cfg, {"source_mask": "masks/source_mask.png", "discover_report": "masks/source_mask.json"}


_RUNNERS = {
    "learn": _run_learn,
    "edit": _run_edit,
    "generate": _run_generate,
    "match-mask": _run_match,
    "discover-mask": _run_discover,
}


# --------------------------------------------------------------------------
# orchestration
# --------------------------------------------------------------------------


def _input_digests(cfg: RunConfig) -> dict:
    paths = []
    for key in ("input.source_image", "input.source_mask", "input.target_image",
                "input.target_mask", "input.checkpoint"):
        if cfg[key]:
            paths.append(cfg[key])
    paths.extend(cfg["input.images"])
    return {str(p): hashlib.sha256(Path(p).read_bytes()).hexdigest() for p in paths}


def _write_manifest(outdir: Path, manifest: dict) -> None:
    tmp = outdir / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    tmp.replace(outdir / "manifest.json")


def execute(cfg: RunConfig) -> Path:
    """Run one command end to end; returns the output directory."""
    outdir = Path(cfg["output.dir"])
    outdir.mkdir(parents=True, exist_ok=True)
    staging = outdir / ".staging"
    if staging.exists():
        shutil.rmtree(staging)
    staging.mkdir()

    started = time.monotonic()
    manifest = {
        "tool": "localconcept",
        "tool_version": __version__,
        "command": cfg.command,
        "seed_rule": SEED_RULE,
        "status": "failed",
        "error": None,
        "config": cfg.resolved_map(),
        "input_digests": _input_digests(cfg),
        "artifacts": {},
        "wall_clock_s": None,
    }
    try:
        resolved_cfg, artifacts = _RUNNERS[cfg.command](cfg, staging)
        for rel in artifacts.values():
            dest = outdir / rel
            dest.parent.mkdir(parents=True, exist_ok=True)
            (staging / rel).replace(dest)
        shutil.rmtree(staging)
        manifest["status"] = "success"
        manifest["config"] = resolved_cfg.resolved_map()
        manifest["artifacts"] = {name: rel for name, rel in artifacts.items()}
        manifest["wall_clock_s"] = round(time.monotonic() - started, 3)
        _write_manifest(outdir, manifest)
        return outdir
    except Exception as exc:
        shutil.rmtree(staging, ignore_errors=True)
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        manifest["wall_clock_s"] = round(time.monotonic() - started, 3)
        _write_manifest(outdir, manifest)
        raise


def main(argv=None) -> int:
    torch.set_num_threads(1)  # keeps toy runs bit-reproducible across hosts
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if ns.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        cfg = parse_config(ns.command, ns.config, _collect_overrides(ns))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        outdir = execute(cfg)
    except (ConfigError, ShapeMismatchError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(f"{ns.command}: wrote {outdir / 'manifest.json'}")
    return 0


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
