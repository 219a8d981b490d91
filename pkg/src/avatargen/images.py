"""PNG and raw float image I/O."""
from __future__ import annotations

import io
from pathlib import Path

import numpy as np
import torch
from PIL import Image


def to_uint8(img) -> np.ndarray:
    if isinstance(img, torch.Tensor):
        img = img.detach().cpu().double().numpy()
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def png_bytes(img) -> bytes:
    """Encode an (H, W), (H, W, 1) or (H, W, 3) float image in [0, 1] as 8-bit PNG."""
    arr = to_uint8(img)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG", optimize=False, compress_level=6)
    return buf.getvalue()


def save_png(path, img) -> None:
    Path(path).write_bytes(png_bytes(img))


def load_png(path) -> np.ndarray:
    """Float image in [0, 1]; grayscale files come back as (H, W)."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    return arr.astype(np.float32) / 255.0


def quantize(img: torch.Tensor) -> torch.Tensor:
    """Round-trip through 8 bits, matching what a PNG write/read would produce."""
    return torch.as_tensor(to_uint8(img).astype(np.float32) / 255.0)


def save_float(path, img) -> None:
    """Lossless float32 dump (.npy)."""
    if isinstance(img, torch.Tensor):
        img = img.detach().cpu().numpy()
    np.save(path, np.asarray(img, dtype=np.float32), allow_pickle=False)


def load_float(path) -> np.ndarray:
    return np.load(path, allow_pickle=False)
