"""8-bit RGB raster I/O."""

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .backend import DTYPE


def load_image(path: str | Path) -> torch.Tensor:
    """Read an RGB image as a [3, H, W] float64 tensor in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).to(DTYPE)


def save_image(data: torch.Tensor, path: str | Path) -> None:
    """Write a [3, H, W] tensor in [0, 1] as an 8-bit RGB file."""
    if data.ndim != 3 or data.shape[0] != 3:
        raise ValueError(f"expected [3,H,W], got {tuple(data.shape)}")
    arr = (data.detach().clamp(0, 1) * 255.0).round().to(torch.uint8).permute(1, 2, 0).numpy()
    Image.fromarray(arr, mode="RGB").save(path)
