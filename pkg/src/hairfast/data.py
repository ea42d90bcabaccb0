"""Synthetic ellipse-face dataset.

Procedurally rendered portraits: background, clothes band, neck, face
ellipse with eyes/nose/mouth markings, ear patches and a parametric hair
region whose shape, size and color vary per sample. Every pixel's class is
known, which gives the segmenter, codec and shape networks exact
supervision, and a fixed parameter-to-latent projection ties each render
to a generator latent for decoder-style fitting.

Head yaw shifts the inner features horizontally; that is the pose signal
the rotation encoder learns to transfer.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
import torch

from .config import BG, CLOTHES, EARS, FACE, HAIR, NECK, GeneratorConfig
from .masks import SegMask


@dataclass
class FaceParams:
    cx: float  # face center, fractions of the image side
    cy: float
    ax: float  # face half-axes
    ay: float
    yaw: float  # [-1, 1], shifts eyes/nose/mouth horizontally
    skin: tuple[float, float, float]
    hair: tuple[float, float, float]
    bg: tuple[float, float, float]
    clothes: tuple[float, float, float]
    hair_scale: float   # hair ellipse vs face ellipse
    hair_length: float  # how far down the sides the hair reaches
    hair_phase: float   # texture banding phase
    bald: bool

    def feature_vector(self) -> np.ndarray:
        vals = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                vals.extend(v)
            elif isinstance(v, bool):
                vals.append(1.0 if v else -1.0)
            else:
                vals.append(float(v))
        return np.asarray(vals, dtype=np.float32)


N_PARAM_FEATURES = len(FaceParams(0, 0, 0, 0, 0, (0,) * 3, (0,) * 3, (0,) * 3, (0,) * 3, 0, 0, 0, False).feature_vector())

_REF_STATS: tuple[np.ndarray, np.ndarray] | None = None


def _reference_stats() -> tuple[np.ndarray, np.ndarray]:
    """Fixed feature mean/std so the parameter-to-latent map is dataset-independent."""
    global _REF_STATS
    if _REF_STATS is None:
        rng = np.random.default_rng(999)
        feats = np.stack([sample_params(rng).feature_vector() for _ in range(4096)])
        _REF_STATS = (feats.mean(0), feats.std(0) + 1e-6)
    return _REF_STATS


def sample_params(rng: np.random.Generator, p_bald: float = 0.06) -> FaceParams:
    def color(lo=-0.8, hi=0.8):
        return tuple(rng.uniform(lo, hi, 3).tolist())

    return FaceParams(
        cx=rng.uniform(0.34, 0.66),
        cy=rng.uniform(0.42, 0.58),
        ax=rng.uniform(0.19, 0.27),
        ay=rng.uniform(0.26, 0.34),
        yaw=rng.uniform(-1.0, 1.0),
        skin=tuple(np.clip(np.array([0.45, 0.18, -0.05]) + rng.uniform(-0.25, 0.25, 3), -1, 1).tolist()),
        hair=color(-0.95, 0.95),
        bg=tuple((0.55 * np.asarray(color())).tolist()),
        clothes=color(),
        hair_scale=rng.uniform(1.10, 1.45),
        hair_length=rng.uniform(-0.15, 0.75),
        hair_phase=rng.uniform(0, 2 * np.pi),
        bald=bool(rng.uniform() < p_bald),
    )


def render_face(p: FaceParams, res: int) -> tuple[torch.Tensor, SegMask]:
    """Render (image in [-1,1], class map) at ``res`` pixels."""
    ys, xs = np.mgrid[0:res, 0:res].astype(np.float32) / res
    classes = np.full((res, res), BG, dtype=np.int64)

    # clothes band and neck behind the face
    classes[ys > p.cy + 1.15 * p.ay] = CLOTHES
    neck_w = 0.35 * p.ax
    classes[(np.abs(xs - p.cx) < neck_w) & (ys > p.cy + 0.6 * p.ay) & (ys <= p.cy + 1.15 * p.ay)] = NECK

    face_d2 = ((xs - p.cx) / p.ax) ** 2 + ((ys - p.cy) / p.ay) ** 2
    for sx in (-1.0, 1.0):
        ear_d2 = ((xs - (p.cx + sx * 1.02 * p.ax)) / (0.18 * p.ax)) ** 2 + (
            (ys - p.cy) / (0.30 * p.ay)
        ) ** 2
        classes[ear_d2 <= 1.0] = EARS
    classes[face_d2 <= 1.0] = FACE

    if not p.bald:
        hx, hy = p.ax * p.hair_scale, p.ay * p.hair_scale
        hair_d2 = ((xs - p.cx) / hx) ** 2 + ((ys - (p.cy - 0.10 * p.ay)) / hy) ** 2
        hair = (hair_d2 <= 1.0) & (face_d2 > 0.82) & (ys < p.cy + p.hair_length * p.ay)
        classes[hair] = HAIR

    img = np.empty((3, res, res), dtype=np.float32)
    base = {BG: p.bg, FACE: p.skin, HAIR: p.hair, EARS: p.skin, NECK: p.skin, CLOTHES: p.clothes}
    for c, color in base.items():
        sel = classes == c
        for ch in range(3):
            img[ch][sel] = color[ch]

    # shading and texture (deterministic in the params)
    face_shade = np.clip(1.0 - 0.25 * face_d2, 0.6, 1.0)
    img[:, classes == FACE] *= face_shade[classes == FACE]
    hair_sel = classes == HAIR
    if hair_sel.any():
        band = 0.07 * np.sin(9.0 * xs + p.hair_phase)
        img[:, hair_sel] = np.clip(img[:, hair_sel] + band[hair_sel], -1, 1)

    # eyes / nose / mouth shift with yaw
    shift = 0.30 * p.yaw * p.ax
    for sx in (-1.0, 1.0):
        eye_d2 = ((xs - (p.cx + sx * 0.42 * p.ax + shift)) / (0.15 * p.ax)) ** 2 + (
            (ys - (p.cy - 0.18 * p.ay)) / (0.11 * p.ay)
        ) ** 2
        img[:, (eye_d2 <= 1.0) & (classes == FACE)] = -0.85
    nose_d2 = ((xs - (p.cx + 1.6 * shift)) / (0.09 * p.ax)) ** 2 + (
        (ys - (p.cy + 0.10 * p.ay)) / (0.14 * p.ay)
    ) ** 2
    img[:, (nose_d2 <= 1.0) & (classes == FACE)] = -0.45
    mouth = (
        (np.abs(xs - (p.cx + 1.2 * shift)) < 0.26 * p.ax)
        & (np.abs(ys - (p.cy + 0.45 * p.ay)) < 0.05 * p.ay + 0.012)
        & (classes == FACE)
    )
    img[:, mouth] = -0.7

    return torch.from_numpy(np.clip(img, -1, 1)), SegMask(torch.from_numpy(classes))


_PROJ: dict[int, np.ndarray] = {}


def _projection(style_dim: int) -> np.ndarray:
    """Fixed parameter-to-latent projection, shared across datasets."""
    if style_dim not in _PROJ:
        proj_rng = np.random.default_rng(12345)
        proj = proj_rng.standard_normal((N_PARAM_FEATURES, style_dim)).astype(np.float32)
        _PROJ[style_dim] = proj / np.sqrt(N_PARAM_FEATURES)
    return _PROJ[style_dim]


def params_to_latents(params: list[FaceParams], style_dim: int) -> torch.Tensor:
    mean, std = _reference_stats()
    feats = (np.stack([p.feature_vector() for p in params]) - mean) / std
    return torch.from_numpy((feats @ _projection(style_dim)).astype(np.float32))


def render_batch(params: list[FaceParams], cfg: GeneratorConfig):
    imgs, masks = [], []
    for p in params:
        img, mask = render_face(p, cfg.output_resolution)
        imgs.append(img)
        masks.append(mask.classes)
    return torch.stack(imgs), torch.stack(masks), params_to_latents(params, cfg.style_dim)


class SyntheticFaces:
    """Pre-rendered dataset; images, masks and tied latents."""

    def __init__(self, n: int, cfg: GeneratorConfig, seed: int = 7, p_bald: float = 0.06):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.params = [sample_params(rng, p_bald) for _ in range(n)]
        self.images, self.classes, self.latents_z = render_batch(self.params, cfg)

    def __len__(self) -> int:
        return len(self.params)

    def mask(self, i: int) -> SegMask:
        return SegMask(self.classes[i])


POSE_FIELDS = ("cx", "cy", "ax", "ay", "yaw")


def mix_pose(pose_donor: FaceParams, rest_donor: FaceParams) -> FaceParams:
    """Head pose/geometry from one sample, everything else from another."""
    values = {f.name: getattr(rest_donor, f.name) for f in fields(FaceParams)}
    for name in POSE_FIELDS:
        values[name] = getattr(pose_donor, name)
    return FaceParams(**values)


class FreshFaces:
    """Streaming sampler: a fresh batch per step, reproducible from
    (seed, step) alone so interrupted runs resume on the same stream."""

    def __init__(self, cfg: GeneratorConfig, seed: int = 0, p_bald: float = 0.06):
        self.cfg = cfg
        self.seed = seed
        self.p_bald = p_bald

    def params_batch(self, step: int, n: int, stream: int = 0) -> list[FaceParams]:
        rng = np.random.default_rng([self.seed, stream, step])
        return [sample_params(rng, self.p_bald) for _ in range(n)]

    def batch(self, step: int, n: int, stream: int = 0):
        return render_batch(self.params_batch(step, n, stream), self.cfg)
