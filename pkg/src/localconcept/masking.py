"""Mask representation and algebra.

Binary masks live at one of three grids (image, latent, attention) and are
never resized implicitly: callers move them between grids with
:func:`resize_to` and get an error on any spatial mismatch. Soft masks relax
a binary mask to ``alpha + (1 - alpha) * mask`` so that out-of-region
reconstruction still contributes at strength ``alpha``.

The resize kernels are hand-rolled (separable lerp / nearest index pick)
rather than delegated, so constants are preserved exactly and results are
bit-reproducible across platforms; both kernels are autograd-safe. Masks are
treated as immutable after construction and every operation here is pure.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .backend import DTYPE, ShapeMismatchError

RESOLUTION_TAGS = ("image", "latent", "attention")


@dataclass
class BinaryMask:
    """[H, W] tensor with entries exactly 0 or 1."""

    data: torch.Tensor
    resolution_tag: str = "image"

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ShapeMismatchError(f"mask must be [H,W], got {tuple(self.data.shape)}")
        if self.resolution_tag not in RESOLUTION_TAGS:
            raise ValueError(f"unknown resolution tag {self.resolution_tag!r}")
        data = self.data.to(DTYPE)
        if not bool(((data == 0) | (data == 1)).all()):
            raise ValueError("binary mask entries must be exactly 0 or 1")
        self.data = data

    @property
    def spatial(self) -> tuple[int, int]:
        return (int(self.data.shape[0]), int(self.data.shape[1]))

    def area(self) -> int:
        return int(self.data.sum())


@dataclass
class SoftMask:
    """[H, W] tensor with values in {alpha, 1}: alpha + (1 - alpha) * binary."""

    data: torch.Tensor
    alpha: float

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ShapeMismatchError("soft mask must be [H,W]")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        data = self.data.to(DTYPE)
        if bool((data < self.alpha - 1e-12).any()) or bool((data > 1.0 + 1e-12).any()):
            raise ValueError("soft mask values must lie in [alpha, 1]")
        self.data = data


def load_mask(path: str | Path, resolution_tag: str = "image") -> BinaryMask:
    """Load an 8-bit raster mask; pixels >= 128 become 1, the rest 0.

    Multi-channel files are accepted only when all channels agree.
    """
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.dtype != np.uint8:
        raise ValueError(f"mask file must be 8-bit, got dtype {arr.dtype}")
    if arr.ndim == 3:
        if not (arr == arr[..., :1]).all():
            raise ValueError("multi-channel mask with unequal channels")
        arr = arr[..., 0]
    data = torch.from_numpy((arr >= 128).astype(np.float64))
    return BinaryMask(data=data, resolution_tag=resolution_tag)


def save_mask(mask: BinaryMask, path: str | Path) -> None:
    arr = (mask.data.numpy() * 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def soften(mask: BinaryMask, alpha: float) -> SoftMask:
    """alpha + (1 - alpha) * mask, elementwise."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha={alpha} outside [0, 1]")
    return SoftMask(data=alpha + (1.0 - alpha) * mask.data, alpha=alpha)


# --------------------------------------------------------------------------
# resolution transport
# --------------------------------------------------------------------------


def _nearest_indices(n_in: int, n_out: int) -> torch.Tensor:
    src = ((torch.arange(n_out, dtype=DTYPE) + 0.5) * (n_in / n_out)).floor().long()
    return src.clamp(0, n_in - 1)


def nearest_resize(data: torch.Tensor, out_hw: tuple[int, int]) -> torch.Tensor:
    """Nearest-neighbor resize of the trailing two dims (center convention)."""
    h_in, w_in = data.shape[-2:]
    rows = _nearest_indices(h_in, out_hw[0])
    cols = _nearest_indices(w_in, out_hw[1])
    return data[..., rows[:, None], cols[None, :]]


def _lerp_axis(n_in: int, n_out: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    src = (torch.arange(n_out, dtype=DTYPE) + 0.5) * (n_in / n_out) - 0.5
    lo = src.floor().long().clamp(0, n_in - 1)
    hi = (lo + 1).clamp(max=n_in - 1)
    frac = (src - lo.to(DTYPE)).clamp(0.0, 1.0)
    return lo, hi, frac


def bilinear_resize(data: torch.Tensor, out_hw: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of the trailing two dims, half-pixel-center convention.

    Written as nested ``a + f*(b-a)`` lerps so constant inputs are preserved
    exactly; safe inside autograd graphs.
    """
    h_in, w_in = data.shape[-2:]
    ylo, yhi, fy = _lerp_axis(h_in, out_hw[0])
    xlo, xhi, fx = _lerp_axis(w_in, out_hw[1])
    top = data[..., ylo, :]
    bot = data[..., yhi, :]
    rows = top + fy.reshape(*([1] * (data.ndim - 2)), -1, 1) * (bot - top)
    left = rows[..., :, xlo]
    right = rows[..., :, xhi]
    return left + fx * (right - left)


def resize_to(mask, target_hw: tuple[int, int], mode: str, resolution_tag: str | None = None):
    """Resize a BinaryMask or SoftMask to a new grid.

    ``nearest`` keeps a binary mask binary; ``bilinear`` returns a plain
    [0, 1] tensor (anti-aliased edges), since the result is generally no
    longer two-valued.
    """
    if min(target_hw) < 1:
        raise ValueError("target dims must be >= 1")
    if mode == "nearest":
        data = nearest_resize(mask.data, target_hw)
        if isinstance(mask, BinaryMask):
            return BinaryMask(data=data, resolution_tag=resolution_tag or mask.resolution_tag)
        return SoftMask(data=data, alpha=mask.alpha)
    if mode == "bilinear":
        return bilinear_resize(mask.data, target_hw)
    raise ValueError(f"unknown resize mode {mode!r}")


def apply_mask(mask, x):
    """Elementwise product of a mask with a [C, H, W] tensor or LatentImage."""
    m = mask.data if isinstance(mask, (BinaryMask, SoftMask)) else mask
    xt = x.data if hasattr(x, "scale_factor") else x
    if m.shape != xt.shape[-2:]:
        raise ShapeMismatchError(
            f"mask {tuple(m.shape)} does not match spatial dims {tuple(xt.shape[-2:])}"
        )
    out = xt * m
    if hasattr(x, "scale_factor"):
        from .backend import LatentImage

        return LatentImage(data=out, scale_factor=x.scale_factor)
    return out


def binarize_map(raw: torch.Tensor, threshold: float = 0.5) -> BinaryMask:
    """Min-max normalize a nonnegative [H, W] map, then threshold.

    Constant maps normalize to all-zeros, so the result is empty; the output
    therefore depends only on the ordering of the map values, not their
    affine scale.
    """
    if raw.ndim != 2:
        raise ShapeMismatchError("map must be [H,W]")
    if bool((raw < 0).any()):
        raise ValueError("map must be nonnegative")
    normalized = normalize_map(raw)
    return BinaryMask(data=(normalized >= threshold).to(DTYPE), resolution_tag="attention")


def normalize_map(raw: torch.Tensor) -> torch.Tensor:
    """Min-max normalize to [0, 1]; constant maps collapse to all-zeros."""
    lo, hi = raw.min(), raw.max()
    if float(hi - lo) == 0.0:
        return torch.zeros_like(raw, dtype=DTYPE)
    return (raw.to(DTYPE) - lo) / (hi - lo)
