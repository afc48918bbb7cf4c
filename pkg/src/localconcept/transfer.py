"""Concept transfer: masked blended editing with attention guidance, and
two-stage generation.

Editing partially noises the target latent to ``t_start``, then walks the
deterministic sampler back down. At each step the out-of-mask region is
replaced from a reference latent (the target re-noised to the current level
by default), then the latent is nudged downhill on the attention objective
of the concept token before the reverse update. A terminal blend against the
clean target latent makes out-of-mask preservation exact.

Generation starts from seeded Gaussian noise, denoises the first ``t_s``
steps with the untuned backend and a plain object prompt, then switches to
the tuned backend and a prompt carrying the concept token.
"""

import warnings
from dataclasses import dataclass, field

import torch

from .backend import (
    ConceptToken,
    DiffusionSchedule,
    LatentImage,
    NoiseSample,
    ShapeMismatchError,
    TextEmbedding,
    add_noise,
    denoise_step,
    derive_seed,
    make_noise,
)
from .masking import BinaryMask, bilinear_resize, resize_to

BLEND_MODES = ("noise_matched", "fixed_start")
T_START_WINDOW = (5, 15)


class NonFiniteGradientError(RuntimeError):
    pass


@dataclass
class EditConfig:
    t_start: int = 10
    eta: float = 0.05
    guidance_iters_per_step: int = 1
    blend_mode: str = "noise_matched"
    seed: int = 0

    def __post_init__(self):
        if self.t_start < 0:
            raise ValueError("t_start must be >= 0")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.guidance_iters_per_step < 0:
            raise ValueError("guidance_iters_per_step must be >= 0")
        if self.blend_mode not in BLEND_MODES:
            raise ValueError(f"blend_mode must be one of {BLEND_MODES}")


@dataclass
class EditState:
    """Per-step record: objective value before and after guidance."""

    t: int
    objective_before: float
    objective_after: float


@dataclass
class EditTrace:
    steps: list = field(default_factory=list)
    final_latent: LatentImage | None = None
    final_objective: float | None = None

    def to_json_dict(self) -> dict:
        return {
            "steps": [
                {"t": s.t, "objective_before": s.objective_before, "objective_after": s.objective_after}
                for s in self.steps
            ],
            "final_objective": self.final_objective,
        }


@dataclass
class GenerationConfig:
    t_s: int = 5
    object_class: str = "object"
    seed: int = 0

    def __post_init__(self):
        if self.t_s < 0:
            raise ValueError("t_s must be >= 0")


def noise_to_tstart(
    x_tg: LatentImage, t_start: int, sched: DiffusionSchedule, seed: int
) -> tuple[LatentImage, NoiseSample]:
    """Noise the target latent up to level ``t_start``; the draw is cached so
    blending can re-noise the target to any lower level with the same eps."""
    if not 0 <= t_start <= sched.T:
        raise ValueError(f"t_start={t_start} outside [0, {sched.T}]")
    lo, hi = T_START_WINDOW
    if not lo <= t_start <= hi:
        warnings.warn(
            f"t_start={t_start} is outside the usual [{lo}, {hi}] editing window",
            stacklevel=2,
        )
    eps = make_noise(x_tg.data.shape, seed)
    return add_noise(x_tg, eps, t_start, sched), eps


def blend_step(x_t: LatentImage, reference: LatentImage, mask_tg: BinaryMask) -> LatentImage:
    """mask * x_t + (1 - mask) * reference, at latent resolution."""
    if x_t.data.shape != reference.data.shape:
        raise ShapeMismatchError("latent and reference shapes differ")
    if mask_tg.spatial != x_t.spatial:
        raise ShapeMismatchError(
            f"mask {mask_tg.spatial} does not match latent {x_t.spatial}"
        )
    m = mask_tg.data
    data = m * x_t.data + (1.0 - m) * reference.data
    return LatentImage(data=data, scale_factor=x_t.scale_factor)


def attention_objective(record, token_slot: int, mask: BinaryMask) -> torch.Tensor:
    """Mean over recorded layers of the squared distance between the token's
    head-averaged attention map and the mask, at the common resolution."""
    hw = record.smallest_resolution()
    target = resize_to(mask, hw, mode="bilinear")
    per_layer = []
    for m in record.token_maps(token_slot):
        aligned = m if tuple(m.shape) == hw else bilinear_resize(m, hw)
        per_layer.append(((aligned - target) ** 2).mean())
    return torch.stack(per_layer).mean()


def evaluate_objective(backend, x: LatentImage, c: TextEmbedding, token_slot: int, t: int, mask: BinaryMask) -> float:
    with torch.no_grad():
        _, record = backend.predict_noise(x, c, t)
        return float(attention_objective(record, token_slot, mask))


def guidance_step(
    backend,
    x_prime: LatentImage,
    c: TextEmbedding,
    token_slot: int,
    t: int,
    mask: BinaryMask,
    eta: float,
) -> LatentImage:
    """One gradient step on the latent against the attention objective:
    x'' = x' - eta * grad. eta == 0 returns the input untouched."""
    if eta < 0:
        raise ValueError("eta must be >= 0")
    if eta == 0.0:
        return x_prime
    x = x_prime.data.detach().clone().requires_grad_(True)
    _, record = backend.predict_noise(LatentImage(x, x_prime.scale_factor), c, t)
    objective = attention_objective(record, token_slot, mask)
    (grad,) = torch.autograd.grad(objective, x)
    if not torch.isfinite(grad).all():
        raise NonFiniteGradientError(f"attention guidance gradient is non-finite at t={t}")
    return LatentImage(data=x_prime.data.detach() - eta * grad, scale_factor=x_prime.scale_factor)


def edit_image(
    backend,
    token: ConceptToken,
    target_image: torch.Tensor,
    target_mask: BinaryMask,
    prompt: str,
    sched: DiffusionSchedule,
    config: EditConfig,
) -> tuple[torch.Tensor, EditTrace]:
    """Blended, guidance-steered edit of the masked region of a target image.

    The out-of-mask region of the returned latent equals the encoded target
    exactly thanks to the terminal blend; the decoded image is returned with
    a trace of per-step attention-objective values.
    """
    if target_mask.spatial != tuple(target_image.shape[-2:]):
        raise ShapeMismatchError(
            f"target mask {target_mask.spatial} does not match image {tuple(target_image.shape[-2:])}"
        )
    x_tg = backend.encode_image(target_image)
    mask_lat = resize_to(target_mask, x_tg.spatial, mode="nearest", resolution_tag="latent")
    c = backend.encode_prompt(prompt, [token])
    slot = c.concept_slot(token.name)

    x, eps_cache = noise_to_tstart(x_tg, config.t_start, sched, derive_seed(config.seed, "edit-noise"))
    x_start = LatentImage(x.data.clone(), scale_factor=x.scale_factor)

    trace = EditTrace()
    for t in range(config.t_start, 0, -1):
        if config.blend_mode == "noise_matched":
            reference = add_noise(x_tg, eps_cache, t, sched)
        else:
            reference = x_start
        x = blend_step(x, reference, mask_lat)

        obj_before = evaluate_objective(backend, x, c, slot, t, target_mask)
        for _ in range(config.guidance_iters_per_step):
            x = guidance_step(backend, x, c, slot, t, target_mask, config.eta)
        obj_after = evaluate_objective(backend, x, c, slot, t, target_mask)
        trace.steps.append(EditState(t=t, objective_before=obj_before, objective_after=obj_after))

        eps_pred, _ = backend.predict_noise(x, c, t)
        x = denoise_step(x, eps_pred, t, sched)

    x = blend_step(x, x_tg, mask_lat)
    trace.final_latent = x
    trace.final_objective = evaluate_objective(backend, x, c, slot, 1, target_mask)
    return backend.decode_latent(x), trace


def generate_with_concept(
    base_backend,
    tuned_backend,
    token: ConceptToken,
    sched: DiffusionSchedule,
    config: GenerationConfig,
    base_prompt: str | None = None,
    tuned_prompt: str | None = None,
) -> torch.Tensor:
    """Two-stage generation: the first ``t_s`` reverse steps run on the base
    backend with a plain object prompt, the rest on the tuned backend with
    the concept-token prompt."""
    if tuple(base_backend.descriptor.latent_shape) != tuple(tuned_backend.descriptor.latent_shape):
        raise ShapeMismatchError("base and tuned backends disagree on latent geometry")
    if config.t_s > sched.T:
        raise ValueError(f"t_s={config.t_s} exceeds schedule length T={sched.T}")

    bp = base_prompt or f"a photo of an {config.object_class}"
    tp = tuned_prompt or f"a photo of an {config.object_class}, with [{token.name}] style"
    c_base = base_backend.encode_prompt(bp, [])
    c_tuned = tuned_backend.encode_prompt(tp, [token])

    eps0 = make_noise(tuple(base_backend.descriptor.latent_shape), derive_seed(config.seed, "generate-init"))
    x = LatentImage(data=eps0.data, scale_factor=1)
    for i, t in enumerate(range(sched.T, 0, -1)):
        if i < config.t_s:
            be, c = base_backend, c_base
        else:
            be, c = tuned_backend, c_tuned
        eps_pred, _ = be.predict_noise(x, c, t)
        x = denoise_step(x, eps_pred, t, sched)
    return tuned_backend.decode_latent(x)
