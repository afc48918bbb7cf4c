"""Shared builders and independent brute-force oracles for the test suite.

The oracles evaluate the loss formulas with plain Python loops over scalars,
deliberately avoiding the vectorized paths they are used to check.
"""

import torch

from localconcept import BinaryMask, ConceptToken, make_toy_backend
from localconcept.learning import SourceSample


def synthetic_sample(h=8, w=8, seed=3, object_class="chair"):
    """Source image with a bright concept quadrant on a dark background."""
    g = torch.Generator().manual_seed(seed)
    img = 0.02 + 0.06 * torch.rand(3, h, w, generator=g, dtype=torch.float64)
    mask = torch.zeros(h, w, dtype=torch.float64)
    mask[: h // 2, : w // 2] = 1.0
    img[:, : h // 2, : w // 2] = 0.9 + 0.08 * torch.rand(3, h // 2, w // 2, generator=g, dtype=torch.float64)
    return SourceSample(image=img, mask=BinaryMask(mask), object_class=object_class)


def quadrant_mask(h=8, w=8, corner="bottom-right") -> BinaryMask:
    m = torch.zeros(h, w, dtype=torch.float64)
    if corner == "bottom-right":
        m[h // 2 :, w // 2 :] = 1.0
    elif corner == "top-left":
        m[: h // 2, : w // 2] = 1.0
    else:
        raise ValueError(corner)
    return BinaryMask(m)


def backend_with_token(seed=0, **kwargs):
    backend = make_toy_backend(seed=seed, **kwargs)
    token = ConceptToken("v*", backend.vocab_embedding("style").clone(), init_source="style")
    return backend, token


def iou(a: torch.Tensor, b: torch.Tensor) -> float:
    inter = float(((a > 0.5) & (b > 0.5)).sum())
    union = float(((a > 0.5) | (b > 0.5)).sum())
    return inter / union if union else 1.0


# --------------------------------------------------------------------------
# brute-force loss oracles (pure Python loops)
# --------------------------------------------------------------------------


def mse_brute(a: torch.Tensor, b: torch.Tensor) -> float:
    af, bf = a.reshape(-1).tolist(), b.reshape(-1).tolist()
    return sum((x - y) ** 2 for x, y in zip(af, bf)) / len(af)


def context_loss_brute(pred: torch.Tensor, true: torch.Tensor, soft: torch.Tensor) -> float:
    c, h, w = pred.shape
    total = 0.0
    for ch in range(c):
        for i in range(h):
            for j in range(w):
                r = float(soft[i, j]) * (float(pred[ch, i, j]) - float(true[ch, i, j]))
                total += r * r
    return total / (c * h * w)


def attention_loss_brute(layer_maps, slot: int, target: torch.Tensor) -> float:
    """Head-average each [heads, tokens, h, w] layer map, average across
    layers, then elementwise MSE against a target already at map resolution."""
    heads = layer_maps[0].shape[0]
    h, w = layer_maps[0].shape[2], layer_maps[0].shape[3]
    avg = [[0.0] * w for _ in range(h)]
    for m in layer_maps:
        for i in range(h):
            for j in range(w):
                s = sum(float(m[hd, slot, i, j]) for hd in range(heads)) / heads
                avg[i][j] += s / len(layer_maps)
    total = 0.0
    for i in range(h):
        for j in range(w):
            d = avg[i][j] - float(target[i, j])
            total += d * d
    return total / (h * w)


def masked_latent_brute(mask: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    out = torch.empty_like(x)
    c, h, w = x.shape
    for ch in range(c):
        for i in range(h):
            for j in range(w):
                out[ch, i, j] = float(mask[i, j]) * float(x[ch, i, j])
    return out


def total_loss_brute(l_con, l_att, l_roi, lam_att, lam_roi) -> float:
    return l_con + lam_att * l_att + lam_roi * l_roi


def central_diff_grad(f, x: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Central-difference gradient of a scalar function of a flat tensor."""
    grad = torch.zeros_like(x)
    flat = grad.reshape(-1)
    for i in range(x.numel()):
        xp = x.clone().reshape(-1)
        xm = x.clone().reshape(-1)
        xp[i] += h
        xm[i] -= h
        flat[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * h)
    return grad


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = float(b.norm())
    return float((a - b).norm()) / max(denom, 1e-300)
