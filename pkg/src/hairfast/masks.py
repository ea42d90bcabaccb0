"""Segmentation masks, mask algebra and the morphology kernels.

SegMask is a hard per-pixel class map over the palette in ``config``;
SoftMask is a real-valued [0,1] field. All operations are pure.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage

from .config import HAIR, PALETTE
from .errors import ConfigError

# Display palette for indexed-PNG export (RGB per class).
PALETTE_RGB = [
    (40, 40, 48),     # background
    (224, 172, 138),  # face/skin
    (112, 64, 24),    # hair
    (200, 140, 110),  # ears
    (198, 150, 120),  # neck
    (70, 90, 160),    # clothes
]


@dataclass
class SegMask:
    classes: torch.Tensor  # long [H, W]
    n_classes: int = len(PALETTE)

    @property
    def resolution(self) -> int:
        return self.classes.shape[-1]

    def one_hot(self) -> torch.Tensor:
        """Float [n_classes, H, W]."""
        return F.one_hot(self.classes, self.n_classes).permute(2, 0, 1).float()


@dataclass
class SoftMask:
    values: torch.Tensor  # float [H, W] in [0, 1]

    @property
    def resolution(self) -> int:
        return self.values.shape[-1]


def class_mask(m: SegMask, class_id: int) -> SoftMask:
    return SoftMask((m.classes == class_id).float())


def hair_mask(m: SegMask) -> SoftMask:
    """Binary indicator of the hair class."""
    return class_mask(m, HAIR)


def downsample_mask(h: SoftMask, res: int) -> SoftMask:
    """Area-average pooling to ``res`` (which must divide the input size)."""
    size = h.values.shape[-1]
    if size % res != 0:
        raise ConfigError(f"target resolution {res} does not divide mask size {size}")
    if size == res:
        return SoftMask(h.values.clone())
    k = size // res
    return SoftMask(F.avg_pool2d(h.values[None, None], k)[0, 0])


def invert(h: SoftMask) -> SoftMask:
    return SoftMask(1.0 - h.values)


def disk_kernel(radius: int) -> torch.Tensor:
    """Pixels with dx^2+dy^2 <= radius^2 (13 pixels at radius 2)."""
    r = int(radius)
    ax = torch.arange(-r, r + 1)
    d2 = ax[:, None] ** 2 + ax[None, :] ** 2
    return (d2 <= r * r).float()


def soft_dilate(m: SoftMask, radius: int, power: float = 0.25) -> SoftMask:
    """Convolve with a normalized disk of ones, clamp to [0,1], raise to ``power``.

    The power < 1 concentrates mass near the support while keeping a soft
    falloff at the configured radius.
    """
    h, w = m.values.shape
    if radius >= min(h, w):
        raise ConfigError(f"dilation radius {radius} >= mask size {min(h, w)}")
    kernel = disk_kernel(radius)
    kernel = kernel / kernel.sum()
    out = F.conv2d(m.values[None, None], kernel[None, None], padding=radius)[0, 0]
    return SoftMask(out.clamp(0.0, 1.0) ** power)


def erode(m: SoftMask, radius: int) -> SoftMask:
    """Binary erosion with a disk structuring element; borders erode against
    zero padding."""
    kernel = disk_kernel(radius)
    hits = F.conv2d((m.values > 0.5).float()[None, None], kernel[None, None], padding=radius)[0, 0]
    return SoftMask((hits >= kernel.sum() - 0.5).float())


def refinement_masks(
    h_source: SoftMask, h_blend: SoftMask, dilate_radius: int, dilate_power: float = 0.25
) -> tuple[SoftMask, SoftMask, SoftMask, SoftMask]:
    """The four region fields steering refinement training.

    target: neither image's hair (reconstruct); inpaint: old hair uncovered
    by the new style; smooth: soft-dilated inpaint; hard: smooth minus the
    new hair.
    """
    if h_source.values.shape != h_blend.values.shape:
        raise ConfigError("refinement masks need equal resolutions")
    hs, hb = h_source.values, h_blend.values
    m_target = (1.0 - hs) * (1.0 - hb)
    m_inpaint = (1.0 - m_target) * (1.0 - hb)
    m_smooth = soft_dilate(SoftMask(m_inpaint), dilate_radius, dilate_power)
    m_hard = SoftMask(m_smooth.values * (1.0 - hb))
    return SoftMask(m_target), SoftMask(m_inpaint), m_smooth, m_hard


# -- PNG I/O -----------------------------------------------------------------


def save_segmask(m: SegMask, path):
    img = PILImage.fromarray(m.classes.cpu().numpy().astype(np.uint8), mode="P")
    palette = []
    for rgb in PALETTE_RGB[: m.n_classes]:
        palette.extend(rgb)
    img.putpalette(palette)
    img.save(Path(path))


def load_segmask(path, n_classes: int = len(PALETTE)) -> SegMask:
    arr = np.array(PILImage.open(Path(path)))
    return SegMask(torch.from_numpy(arr.astype(np.int64)), n_classes)


def save_softmask(m: SoftMask, path):
    arr = (m.values.clamp(0, 1).cpu().numpy() * 65535.0).round().astype(np.uint16)
    PILImage.fromarray(arr, mode="I;16").save(Path(path))


def load_softmask(path) -> SoftMask:
    arr = np.array(PILImage.open(Path(path))).astype(np.float32) / 65535.0
    return SoftMask(torch.from_numpy(arr))
