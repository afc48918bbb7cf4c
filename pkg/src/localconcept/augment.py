"""Data augmentation for single-image concept training.

Geometric transforms (horizontal flip, zoom in/out) are applied identically
to the image and its mask; photometric transforms (grayscale, color jitter)
touch only the image. Zooming out pads with a neutral gray border and the
mask with zeros. A zoom returns a tag ("zoomed-in" / "zoomed-out") so the
prompt builder can mirror the scale change in the text.
"""

from dataclasses import dataclass

import numpy as np
import torch

from .masking import BinaryMask, bilinear_resize, nearest_resize

NEUTRAL_FILL = 0.5


@dataclass
class AugmentationConfig:
    p_grayscale: float = 0.1
    p_hflip: float = 0.5
    p_zoom: float = 0.3
    p_jitter: float = 0.3
    zoom_range: tuple[float, float] = (0.6, 1.4)
    jitter_brightness: float = 0.2
    jitter_contrast: float = 0.2
    jitter_saturation: float = 0.2

    def __post_init__(self):
        for name in ("p_grayscale", "p_hflip", "p_zoom", "p_jitter"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name}={p} outside [0, 1]")
        lo, hi = self.zoom_range
        if lo <= 0 or hi < lo:
            raise ValueError(f"invalid zoom range {self.zoom_range}")

    @classmethod
    def disabled(cls) -> "AugmentationConfig":
        return cls(p_grayscale=0.0, p_hflip=0.0, p_zoom=0.0, p_jitter=0.0)


def hflip(image: torch.Tensor, mask: BinaryMask) -> tuple[torch.Tensor, BinaryMask]:
    return image.flip(-1), BinaryMask(mask.data.flip(-1), mask.resolution_tag)


def grayscale(image: torch.Tensor) -> torch.Tensor:
    return image.mean(dim=0, keepdim=True).expand_as(image).clone()


def zoom(image: torch.Tensor, mask: BinaryMask, scale: float) -> tuple[torch.Tensor, BinaryMask]:
    """Scale content by ``scale`` while keeping the canvas size fixed.

    scale > 1 crops the center and enlarges it; scale < 1 shrinks the image
    and pads with a neutral border (mask padded with zeros); scale == 1 is
    the identity.
    """
    if scale <= 0:
        raise ValueError("zoom scale must be positive")
    h, w = image.shape[-2:]
    if scale == 1.0:
        return image.clone(), BinaryMask(mask.data.clone(), mask.resolution_tag)
    if scale > 1.0:
        ch = max(1, round(h / scale))
        cw = max(1, round(w / scale))
        y0, x0 = (h - ch) // 2, (w - cw) // 2
        img_crop = image[..., y0 : y0 + ch, x0 : x0 + cw]
        mask_crop = mask.data[y0 : y0 + ch, x0 : x0 + cw]
        out_img = bilinear_resize(img_crop, (h, w)).clamp(0.0, 1.0)
        out_mask = nearest_resize(mask_crop, (h, w))
    else:
        sh = max(1, round(h * scale))
        sw = max(1, round(w * scale))
        small_img = bilinear_resize(image, (sh, sw)).clamp(0.0, 1.0)
        small_mask = nearest_resize(mask.data, (sh, sw))
        out_img = torch.full_like(image, NEUTRAL_FILL)
        out_mask = torch.zeros_like(mask.data)
        y0, x0 = (h - sh) // 2, (w - sw) // 2
        out_img[..., y0 : y0 + sh, x0 : x0 + sw] = small_img
        out_mask[y0 : y0 + sh, x0 : x0 + sw] = small_mask
    return out_img, BinaryMask(out_mask, mask.resolution_tag)


def color_jitter(image: torch.Tensor, factors: tuple[float, float, float]) -> torch.Tensor:
    """Brightness / contrast / saturation scaling by the given factors."""
    fb, fc, fs = factors
    out = image * fb
    mean = out.mean()
    out = mean + (out - mean) * fc
    gray = out.mean(dim=0, keepdim=True)
    out = gray + (out - gray) * fs
    return out.clamp(0.0, 1.0)


def augment(sample, rng: np.random.Generator, config: AugmentationConfig):
    """Randomized augmentation of a source sample.

    Returns ``(augmented_sample, zoom_tag)`` where zoom_tag is None,
    "zoomed-in" or "zoomed-out".
    """
    image = sample.image
    mask = sample.mask
    zoom_tag = None

    if rng.random() < config.p_hflip:
        image, mask = hflip(image, mask)
    if rng.random() < config.p_zoom:
        lo, hi = config.zoom_range
        scale = float(rng.uniform(lo, hi))
        image, mask = zoom(image, mask, scale)
        if scale > 1.0:
            zoom_tag = "zoomed-in"
        elif scale < 1.0:
            zoom_tag = "zoomed-out"
    if rng.random() < config.p_grayscale:
        image = grayscale(image)
    if rng.random() < config.p_jitter:
        factors = (
            1.0 + config.jitter_brightness * float(rng.uniform(-1, 1)),
            1.0 + config.jitter_contrast * float(rng.uniform(-1, 1)),
            1.0 + config.jitter_saturation * float(rng.uniform(-1, 1)),
        )
        image = color_jitter(image, factors)

    return sample.replace(image=image, mask=mask), zoom_tag
