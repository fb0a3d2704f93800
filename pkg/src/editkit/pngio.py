"""PNG image I/O. Images travel through the package as float32 torch
tensors shaped (C, H, W) with values in [0, 1]."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ShapeMismatch


def to_tensor(arr: np.ndarray) -> torch.Tensor:
    """HWC uint8 or float array -> (C, H, W) float32 tensor clamped to [0, 1]."""
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeMismatch(f"expected HxWx3 array, got {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    x = torch.from_numpy(np.ascontiguousarray(arr)).to(torch.float32)
    return x.permute(2, 0, 1).clamp(0.0, 1.0)


def to_uint8(img: torch.Tensor) -> np.ndarray:
    """(C, H, W) float tensor in [0, 1] -> HWC uint8 array (round half up)."""
    if img.dim() != 3:
        raise ShapeMismatch(f"expected CxHxW tensor, got {tuple(img.shape)}")
    arr = img.detach().clamp(0.0, 1.0).mul(255.0).round().to(torch.uint8)
    return arr.permute(1, 2, 0).cpu().numpy()


def load_image(path: str | Path) -> torch.Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return to_tensor(arr)


def save_image(img: torch.Tensor, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def save_heatmap(heat: np.ndarray, path: str | Path) -> None:
    """Save a nonnegative 2-D map as 8-bit grayscale PNG (max scaled to 255)."""
    heat = np.asarray(heat, dtype=np.float64)
    if heat.ndim != 2:
        raise ShapeMismatch(f"expected 2-D heatmap, got {heat.shape}")
    peak = heat.max()
    scaled = heat / peak if peak > 0 else heat
    arr = np.clip(np.round(scaled * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="L").save(path, format="PNG")
