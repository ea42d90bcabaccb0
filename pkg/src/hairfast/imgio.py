"""Image file I/O at the package boundary: [-1,1] tensors inside,
8-bit PNG outside."""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage


def to_tensor(img: PILImage.Image, resolution: int) -> tuple[torch.Tensor, bool]:
    """Center-crop to square, resize to the generator resolution, scale to
    [-1,1]. Returns (tensor, resized flag)."""
    img = img.convert("RGB")
    w, h = img.size
    resized = (w, h) != (resolution, resolution)
    side = min(w, h)
    left, top = (w - side) // 2, (h - side) // 2
    img = img.crop((left, top, left + side, top + side))
    if side != resolution:
        img = img.resize((resolution, resolution), PILImage.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1) * 2.0 - 1.0, resized


def load_image(path, resolution: int) -> torch.Tensor:
    with PILImage.open(Path(path)) as img:
        tensor, _ = to_tensor(img, resolution)
    return tensor


def to_pil(img: torch.Tensor) -> PILImage.Image:
    arr = ((img.detach().clamp(-1, 1) + 1.0) * 127.5).round().byte()
    return PILImage.fromarray(arr.permute(1, 2, 0).cpu().numpy())


def save_image(img: torch.Tensor, path):
    to_pil(img).save(Path(path))


def png_bytes(img: torch.Tensor) -> bytes:
    buf = io.BytesIO()
    to_pil(img).save(buf, format="PNG")
    return buf.getvalue()
