"""Single-image concept learning: the optimization loop and checkpoints.

A concept token is initialized from a descriptor word and optimized jointly
with the cross-attention key/value projections of the backend, driven by the
context, attention and region losses computed on augmented views of one
masked source image. The result is a checkpoint holding the token embedding,
the K/V weight deltas against the base backend, and a config manifest
sufficient to rebuild the tuned backend deterministically.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace as dc_replace
from pathlib import Path

import numpy as np
import torch

from .augment import AugmentationConfig, augment
from .backend import (
    ConceptToken,
    DiffusionSchedule,
    TrainableSelector,
    add_noise,
    derive_seed,
    make_noise,
)
from .losses import attention_loss, context_loss, roi_loss, total_loss
from .masking import BinaryMask, resize_to, soften

CHECKPOINT_VERSION = 1
_CHECKPOINT_MAGIC = b"LCCKPT01"

DEFAULT_PROMPT_TEMPLATE = "A {OBJECT} with [v*] style"


class PromptTemplateError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointDigestError(CheckpointError):
    pass


@dataclass
class SourceSample:
    """One masked source image with its base object class and prompt template."""

    image: torch.Tensor
    mask: BinaryMask
    object_class: str
    prompt_template: str = DEFAULT_PROMPT_TEMPLATE

    def __post_init__(self):
        if self.image.ndim != 3:
            raise ValueError("image must be [C,H,W]")
        if self.mask.spatial != tuple(self.image.shape[-2:]):
            raise ValueError(
                f"mask {self.mask.spatial} does not match image {tuple(self.image.shape[-2:])}"
            )
        if not self.object_class:
            raise ValueError("object_class must be nonempty")

    def replace(self, **kwargs) -> "SourceSample":
        return dc_replace(self, **kwargs)

    def digest(self) -> str:
        hasher = hashlib.sha256()
        hasher.update(self.image.detach().to(torch.float64).numpy().tobytes())
        hasher.update(self.mask.data.numpy().tobytes())
        hasher.update(self.object_class.encode())
        hasher.update(self.prompt_template.encode())
        return hasher.hexdigest()


@dataclass
class TrainingConfig:
    steps: int = 500
    learning_rate: float = 1e-5
    lambda_att: float = 0.5
    lambda_roi: float = 0.5
    alpha: float = 0.5
    seed: int = 0
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    optimizer: str = "adam"
    token_name: str = "v*"
    token_init_word: str = "style"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lambda_att < 0 or self.lambda_roi < 0:
            raise ValueError("loss weights must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")


@dataclass
class LossTraceRow:
    step: int
    l_con: float
    l_att: float
    l_roi: float
    l_tot: float


@dataclass
class ConceptCheckpoint:
    token: ConceptToken
    ca_weight_deltas: dict
    config_manifest: dict
    version: int = CHECKPOINT_VERSION
    loss_trace: list = field(default_factory=list)


def build_prompt(template: str, object_class: str, token: ConceptToken, zoom_suffix: str | None = None) -> str:
    """Substitute {OBJECT}; the [token] placeholder stays for the prompt encoder."""
    if "{OBJECT}" not in template:
        raise PromptTemplateError("template is missing the {OBJECT} placeholder")
    if f"[{token.name}]" not in template:
        raise PromptTemplateError(f"template is missing the [{token.name}] placeholder")
    prompt = template.replace("{OBJECT}", object_class)
    if zoom_suffix:
        prompt = f"{prompt}, {zoom_suffix}"
    return prompt


def build_roi_prompt(token: ConceptToken) -> str:
    return f"A photo of [{token.name}]"


def train_concept(
    backend,
    sample: SourceSample,
    config: TrainingConfig,
    sched: DiffusionSchedule,
) -> ConceptCheckpoint:
    """Optimize the concept token and cross-attention K/V on one source image.

    Per step: augment, rebuild prompts, draw (t, eps), form the noisy latent,
    evaluate the three losses on the same draw (the region loss runs its own
    forward pass with the concept-only prompt), and take one Adam step on the
    token embedding plus K/V projections. Deterministic given config.seed.
    """
    if sample.mask.area() == 0:
        raise ValueError("concept mask has zero area")

    tok = ConceptToken(
        name=config.token_name,
        embedding=backend.vocab_embedding(config.token_init_word).clone().requires_grad_(True),
        init_source=config.token_init_word,
    )
    backend.register_token(tok)
    handles = backend.trainable_params(TrainableSelector(cross_attention_kv=True, token_names=[tok.name]))
    kv_handles = [(n, p) for n, p in handles if not n.startswith("token:")]
    base_kv = {n: p.detach().clone() for n, p in kv_handles}
    base_kv_digest = backend.param_digest([n for n, _ in kv_handles])

    opt = torch.optim.Adam([p for _, p in handles], lr=config.learning_rate)
    aug_rng = np.random.default_rng(derive_seed(config.seed, "augment"))
    step_rng = np.random.default_rng(derive_seed(config.seed, "timesteps"))
    noise_master = derive_seed(config.seed, "noise")
    latent_hw = tuple(backend.descriptor.latent_shape[1:])

    trace: list[LossTraceRow] = []
    for step in range(config.steps):
        aug_sample, zoom_tag = augment(sample, aug_rng, config.augmentation)
        ctx_prompt = build_prompt(aug_sample.prompt_template, aug_sample.object_class, tok, zoom_tag)

        x0 = backend.encode_image(aug_sample.image)
        mask_lat = resize_to(aug_sample.mask, latent_hw, mode="nearest", resolution_tag="latent")
        soft = soften(mask_lat, config.alpha)

        t = int(step_rng.integers(1, sched.T + 1))
        eps = make_noise(x0.data.shape, derive_seed(noise_master, f"step-{step}"))
        x_t = add_noise(x0, eps, t, sched)

        c = backend.encode_prompt(ctx_prompt, [tok])
        eps_pred, record = backend.predict_noise(x_t, c, t)
        l_con = context_loss(eps_pred, eps, soft)
        l_att = attention_loss(record, c.concept_slot(tok.name), aug_sample.mask)
        c_star = backend.encode_prompt(build_roi_prompt(tok), [tok])
        l_roi = roi_loss(backend, x_t, mask_lat, c_star, t, eps)
        l_tot = total_loss(l_con, l_att, l_roi, config.lambda_att, config.lambda_roi)

        if not torch.isfinite(l_tot.detach()):
            raise TrainingDivergedError(
                f"non-finite loss at step {step}: l_con={l_con.item():g} "
                f"l_att={l_att.item():g} l_roi={l_roi.item():g}"
            )
        trace.append(
            LossTraceRow(step, l_con.item(), l_att.item(), l_roi.item(), l_tot.item())
        )
        opt.zero_grad(set_to_none=True)
        l_tot.backward()
        opt.step()

    deltas = {n: (p.detach() - base_kv[n]).clone() for n, p in kv_handles}
    manifest = {
        "kind": "concept-checkpoint",
        "version": CHECKPOINT_VERSION,
        "backend": backend.to_config(),
        "schedule": {"T": sched.T, "sampler": sched.sampler},
        "config": _config_manifest(config),
        "source_digest": sample.digest(),
        "object_class": sample.object_class,
        "prompt_template": sample.prompt_template,
        "token": {"name": tok.name, "init_source": tok.init_source},
        "base_kv_digest": base_kv_digest,
    }
    return ConceptCheckpoint(
        token=tok.clone(requires_grad=False),
        ca_weight_deltas=deltas,
        config_manifest=manifest,
        version=CHECKPOINT_VERSION,
        loss_trace=trace,
    )


def _config_manifest(config: TrainingConfig) -> dict:
    aug = config.augmentation
    return {
        "steps": config.steps,
        "learning_rate": config.learning_rate,
        "lambda_att": config.lambda_att,
        "lambda_roi": config.lambda_roi,
        "alpha": config.alpha,
        "seed": config.seed,
        "optimizer": config.optimizer,
        "token_name": config.token_name,
        "token_init_word": config.token_init_word,
        "augmentation": {
            "p_grayscale": aug.p_grayscale,
            "p_hflip": aug.p_hflip,
            "p_zoom": aug.p_zoom,
            "p_jitter": aug.p_jitter,
            "zoom_range": list(aug.zoom_range),
            "jitter_brightness": aug.jitter_brightness,
            "jitter_contrast": aug.jitter_contrast,
            "jitter_saturation": aug.jitter_saturation,
        },
    }


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------


def save_checkpoint(ckpt: ConceptCheckpoint, path: str | Path) -> None:
    """Write a checkpoint: magic, canonical JSON header, float64 payload.

    The header carries a sha256 of the payload, so tampering is detected on
    load; saving a loaded checkpoint reproduces the file byte for byte.
    """
    tensors = {"token.embedding": ckpt.token.embedding.detach()}
    for name in sorted(ckpt.ca_weight_deltas):
        tensors[f"delta:{name}"] = ckpt.ca_weight_deltas[name].detach()

    payload = bytearray()
    tensor_meta = []
    for name, tensor in tensors.items():
        arr = tensor.to(torch.float64).numpy()
        tensor_meta.append(
            {"name": name, "shape": list(arr.shape), "offset": len(payload), "nbytes": arr.nbytes}
        )
        payload.extend(arr.astype("<f8").tobytes())

    header = {
        "version": ckpt.version,
        "manifest": ckpt.config_manifest,
        "tensors": tensor_meta,
        "payload_sha256": hashlib.sha256(bytes(payload)).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = _CHECKPOINT_MAGIC + struct.pack("<Q", len(header_bytes)) + header_bytes + bytes(payload)
    Path(path).write_bytes(blob)


def load_checkpoint(path: str | Path) -> ConceptCheckpoint:
    blob = Path(path).read_bytes()
    if blob[: len(_CHECKPOINT_MAGIC)] != _CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a concept checkpoint")
    off = len(_CHECKPOINT_MAGIC)
    (header_len,) = struct.unpack("<Q", blob[off : off + 8])
    off += 8
    header = json.loads(blob[off : off + header_len])
    payload = blob[off + header_len :]

    if header["version"] != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint version {header['version']} != supported {CHECKPOINT_VERSION}"
        )
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointDigestError("checkpoint payload digest mismatch (corrupt file)")

    tensors = {}
    for meta in header["tensors"]:
        shape = tuple(meta["shape"])
        count = meta["nbytes"] // 8
        values = struct.unpack(f"<{count}d", payload[meta["offset"] : meta["offset"] + meta["nbytes"]])
        tensors[meta["name"]] = torch.tensor(values, dtype=torch.float64).reshape(shape)

    manifest = header["manifest"]
    token = ConceptToken(
        name=manifest["token"]["name"],
        embedding=tensors.pop("token.embedding"),
        init_source=manifest["token"]["init_source"],
    )
    deltas = {name[len("delta:") :]: t for name, t in tensors.items()}
    return ConceptCheckpoint(
        token=token,
        ca_weight_deltas=deltas,
        config_manifest=manifest,
        version=header["version"],
    )


def apply_checkpoint(backend, ckpt: ConceptCheckpoint) -> ConceptToken:
    """Add the stored K/V deltas to a base backend and register the token.

    The backend must match the checkpoint's backend config and still carry
    the base (untrained) K/V weights.
    """
    expected = ckpt.config_manifest["backend"]
    if backend.to_config() != expected:
        raise CheckpointError(
            f"backend config {backend.to_config()} does not match checkpoint {expected}"
        )
    kv_names = sorted(ckpt.ca_weight_deltas)
    if backend.param_digest(kv_names) != ckpt.config_manifest["base_kv_digest"]:
        raise CheckpointError("backend K/V weights are not the checkpoint's base weights")
    with torch.no_grad():
        for name in kv_names:
            backend.params[name].add_(ckpt.ca_weight_deltas[name])
    token = ckpt.token.clone()
    backend.register_token(token)
    return token


def restore_backend(ckpt: ConceptCheckpoint):
    """Rebuild the tuned backend described by a checkpoint manifest (toy only)."""
    from .backend import ToyBackend

    bcfg = ckpt.config_manifest["backend"]
    if bcfg.get("kind") != "toy":
        raise CheckpointError(
            "only toy backends can be rebuilt from a manifest; external backends "
            "must be constructed by their adapter and passed through apply_checkpoint"
        )
    backend = ToyBackend.from_config(bcfg)
    token = apply_checkpoint(backend, ckpt)
    return backend, token
