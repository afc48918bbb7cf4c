"""The three training losses and their weighted combination.

All losses use mean reduction over every tensor entry, which keeps the
default weights resolution-independent:

* attention loss  — MSE between the token's attention map (averaged over
  heads and recorded layers) and the mask resized to attention resolution.
* context loss    — soft-masked noise-prediction MSE; the soft mask keeps
  out-of-region reconstruction in play at reduced weight.
* region loss     — noise-prediction MSE after masking the noisy latent and
  conditioning on a concept-only prompt; the residual is taken over the
  full canvas.
"""

import torch

from .backend import (
    CrossAttentionRecord,
    LatentImage,
    NoiseSample,
    ShapeMismatchError,
    TextEmbedding,
)
from .masking import BinaryMask, SoftMask, apply_mask, bilinear_resize, resize_to


def averaged_token_map(record: CrossAttentionRecord, token_slot: int) -> torch.Tensor:
    """One [h, w] map: head-averaged per layer, aligned to the smallest
    recorded resolution, then averaged across layers."""
    target_hw = record.smallest_resolution()
    per_layer = [
        m if m.shape == target_hw else bilinear_resize(m, target_hw)
        for m in record.token_maps(token_slot)
    ]
    return torch.stack(per_layer).mean(dim=0)


def attention_loss(record: CrossAttentionRecord, token_slot: int, mask: BinaryMask) -> torch.Tensor:
    """MSE between the token's averaged attention map and the resized mask."""
    avg_map = averaged_token_map(record, token_slot)
    target = resize_to(mask, tuple(avg_map.shape), mode="bilinear")
    return ((avg_map - target) ** 2).mean()


def context_loss(eps_pred: NoiseSample, eps_true: NoiseSample, soft_mask: SoftMask) -> torch.Tensor:
    """Mean of (soft_mask * (eps_pred - eps_true))**2 over all entries."""
    if eps_pred.data.shape != eps_true.data.shape:
        raise ShapeMismatchError("prediction and target shapes differ")
    residual = apply_mask(soft_mask, eps_pred.data - eps_true.data)
    return (residual**2).mean()


def roi_loss(
    backend,
    x_t: LatentImage,
    mask_latent: BinaryMask,
    c_star: TextEmbedding,
    t: int,
    eps_true: NoiseSample,
) -> torch.Tensor:
    """Noise MSE with the latent masked to the region and a concept-only
    prompt; unweighted over the full canvas."""
    masked = apply_mask(mask_latent, x_t)
    pred, _ = backend.predict_noise(masked, c_star, t)
    return ((pred.data - eps_true.data) ** 2).mean()


def diffusion_loss(eps_pred: NoiseSample, eps_true: NoiseSample) -> torch.Tensor:
    """Plain unmasked noise-prediction MSE."""
    if eps_pred.data.shape != eps_true.data.shape:
        raise ShapeMismatchError("prediction and target shapes differ")
    return ((eps_pred.data - eps_true.data) ** 2).mean()


def total_loss(l_con, l_att, l_roi, lambda_att: float, lambda_roi: float):
    """l_con + lambda_att * l_att + lambda_roi * l_roi, exactly."""
    return l_con + lambda_att * l_att + lambda_roi * l_roi
