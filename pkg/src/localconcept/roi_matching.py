"""Region correspondence through diffusion attention maps.

Two flavors of region token:

* target matching — a token initialized from an already-learned concept
  token and optimized (embedding only, backend frozen) so its attention
  matches the source mask; reading its attention maps out on another image
  segments the corresponding region there.
* source discovery — a fresh token optimized together with the K/V
  projections on the plain diffusion loss over several images sharing a
  concept; its attention maps localize the common pattern and can seed
  concept learning as the source mask.

Extraction averages the token's head/layer-averaged maps over a small set
of probe timesteps with fixed noise seeds, min-max normalizes, thresholds,
and keeps the largest connected component by default.
"""

from collections import deque
from dataclasses import dataclass, field

import numpy as np
import torch

from .backend import (
    ConceptToken,
    DiffusionSchedule,
    TrainableSelector,
    add_noise,
    derive_seed,
    make_noise,
)
from .learning import SourceSample
from .losses import attention_loss, averaged_token_map, diffusion_loss
from .masking import BinaryMask, binarize_map, bilinear_resize, nearest_resize, normalize_map

TARGET_MATCH_TEMPLATE = "a [{token}] region of an {object}"
SOURCE_DISCOVERY_TEMPLATE = "An {object} with [{token}] style"

DEFAULT_PROBE_TIMESTEPS = (10, 25, 40)


class DegenerateAttentionError(RuntimeError):
    pass


@dataclass
class RegionToken:
    token: ConceptToken
    trained_for: str
    object_class: str
    loss_trace: list = field(default_factory=list)

    def __post_init__(self):
        if self.trained_for not in ("target_matching", "source_discovery"):
            raise ValueError(f"unknown region-token role {self.trained_for!r}")

    def prompt(self) -> str:
        template = (
            TARGET_MATCH_TEMPLATE
            if self.trained_for == "target_matching"
            else SOURCE_DISCOVERY_TEMPLATE
        )
        return template.format(token=self.token.name, object=self.object_class)


@dataclass
class MatchResult:
    mask: BinaryMask
    raw_map: torch.Tensor
    confidence: float


def learn_target_matcher(
    backend,
    concept_token: ConceptToken,
    source: SourceSample,
    sched: DiffusionSchedule,
    steps: int = 500,
    learning_rate: float = 1e-5,
    seed: int = 0,
    token_name: str = "w*",
) -> RegionToken:
    """Learn a region token on the tuned backend; only the new token's
    embedding is optimized, everything else stays frozen.

    With steps=0 the returned token equals the concept token exactly.
    """
    region = ConceptToken(
        name=token_name,
        embedding=concept_token.embedding.detach().clone().requires_grad_(True),
        init_source=concept_token.name,
    )
    backend.register_token(region)
    result = RegionToken(token=region, trained_for="target_matching", object_class=source.object_class)
    if steps == 0:
        return result

    handles = backend.trainable_params(
        TrainableSelector(cross_attention_kv=False, token_names=[token_name])
    )
    opt = torch.optim.Adam([p for _, p in handles], lr=learning_rate)
    step_rng = np.random.default_rng(derive_seed(seed, "timesteps"))
    noise_master = derive_seed(seed, "noise")
    prompt = result.prompt()
    x0 = backend.encode_image(source.image)

    for step in range(steps):
        t = int(step_rng.integers(1, sched.T + 1))
        eps = make_noise(x0.data.shape, derive_seed(noise_master, f"step-{step}"))
        x_t = add_noise(x0, eps, t, sched)
        c = backend.encode_prompt(prompt, [region])
        _, record = backend.predict_noise(x_t, c, t)
        loss = attention_loss(record, c.concept_slot(token_name), source.mask)
        result.loss_trace.append(loss.item())
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return result


def learn_common_concept_token(
    backend,
    images: list,
    object_class: str,
    sched: DiffusionSchedule,
    steps: int = 500,
    learning_rate: float = 1e-5,
    seed: int = 0,
    token_name: str = "w*",
    token_init_word: str = "style",
) -> RegionToken:
    """Learn a shared-concept token from several images (one drawn uniformly
    per step) by minimizing the plain diffusion loss; optimizes the token
    embedding and the cross-attention K/V projections."""
    if len(images) < 2:
        raise ValueError("common-concept discovery needs at least two images")

    region = ConceptToken(
        name=token_name,
        embedding=backend.vocab_embedding(token_init_word).clone().requires_grad_(True),
        init_source=token_init_word,
    )
    backend.register_token(region)
    result = RegionToken(token=region, trained_for="source_discovery", object_class=object_class)

    handles = backend.trainable_params(
        TrainableSelector(cross_attention_kv=True, token_names=[token_name])
    )
    opt = torch.optim.Adam([p for _, p in handles], lr=learning_rate)
    pick_rng = np.random.default_rng(derive_seed(seed, "image-choice"))
    step_rng = np.random.default_rng(derive_seed(seed, "timesteps"))
    noise_master = derive_seed(seed, "noise")
    prompt = result.prompt()
    latents = [backend.encode_image(img) for img in images]

    for step in range(steps):
        x0 = latents[int(pick_rng.integers(0, len(latents)))]
        t = int(step_rng.integers(1, sched.T + 1))
        eps = make_noise(x0.data.shape, derive_seed(noise_master, f"step-{step}"))
        x_t = add_noise(x0, eps, t, sched)
        c = backend.encode_prompt(prompt, [region])
        eps_pred, _ = backend.predict_noise(x_t, c, t)
        loss = diffusion_loss(eps_pred, eps)
        result.loss_trace.append(loss.item())
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return result


def largest_component(mask: BinaryMask) -> BinaryMask:
    """Keep only the largest 4-connected component (first in scan order on ties)."""
    grid = mask.data.numpy() > 0.5
    h, w = grid.shape
    seen = np.zeros_like(grid, dtype=bool)
    best: list[tuple[int, int]] = []
    for sy in range(h):
        for sx in range(w):
            if not grid[sy, sx] or seen[sy, sx]:
                continue
            component = []
            queue = deque([(sy, sx)])
            seen[sy, sx] = True
            while queue:
                y, x = queue.popleft()
                component.append((y, x))
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= ny < h and 0 <= nx < w and grid[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        queue.append((ny, nx))
            if len(component) > len(best):
                best = component
    out = torch.zeros_like(mask.data)
    for y, x in best:
        out[y, x] = 1.0
    return BinaryMask(data=out, resolution_tag=mask.resolution_tag)


def _extract(
    backend,
    region_token: RegionToken,
    image: torch.Tensor,
    sched: DiffusionSchedule,
    probe_timesteps,
    seed: int,
    threshold: float,
    keep_largest_component: bool,
) -> MatchResult:
    prompt = region_token.prompt()
    token = region_token.token
    x0 = backend.encode_image(image)
    c = backend.encode_prompt(prompt, [token])
    slot = c.concept_slot(token.name)

    maps = []
    with torch.no_grad():
        for t in probe_timesteps:
            if not 1 <= t <= sched.T:
                raise ValueError(f"probe timestep {t} outside [1, {sched.T}]")
            eps = make_noise(x0.data.shape, derive_seed(seed, f"probe-{t}"))
            x_t = add_noise(x0, eps, t, sched)
            _, record = backend.predict_noise(x_t, c, t)
            maps.append(averaged_token_map(record, slot).detach())
    avg = torch.stack(maps).mean(dim=0)

    if float(avg.max() - avg.min()) == 0.0:
        raise DegenerateAttentionError(
            f"attention map of [{token.name}] is constant over the probe set "
            f"{tuple(probe_timesteps)}; no region can be extracted"
        )
    mask_att = binarize_map(avg, threshold)
    if keep_largest_component:
        mask_att = largest_component(mask_att)

    image_hw = (int(image.shape[-2]), int(image.shape[-1]))
    mask_img = BinaryMask(nearest_resize(mask_att.data, image_hw), resolution_tag="image")
    raw_img = bilinear_resize(normalize_map(avg), image_hw)

    inside = mask_img.data > 0.5
    conf_in = float(raw_img[inside].mean()) if bool(inside.any()) else 0.0
    conf_out = float(raw_img[~inside].mean()) if bool((~inside).any()) else 0.0
    return MatchResult(mask=mask_img, raw_map=raw_img, confidence=conf_in - conf_out)


def extract_target_mask(
    backend,
    region_token: RegionToken,
    target_image: torch.Tensor,
    sched: DiffusionSchedule,
    probe_timesteps=DEFAULT_PROBE_TIMESTEPS,
    seed: int = 0,
    threshold: float = 0.5,
    keep_largest_component: bool = True,
) -> MatchResult:
    """Segment the region on a target image corresponding to the matcher's
    training region, from its attention maps over the probe timesteps."""
    return _extract(
        backend, region_token, target_image, sched, probe_timesteps, seed, threshold, keep_largest_component
    )


def extract_source_mask(
    backend,
    region_token: RegionToken,
    image: torch.Tensor,
    sched: DiffusionSchedule,
    probe_timesteps=DEFAULT_PROBE_TIMESTEPS,
    seed: int = 0,
    threshold: float = 0.5,
    keep_largest_component: bool = True,
) -> MatchResult:
    """Locate the discovered common concept on one of the source images; the
    result can seed concept learning as its source mask."""
    return _extract(
        backend, region_token, image, sched, probe_timesteps, seed, threshold, keep_largest_component
    )
