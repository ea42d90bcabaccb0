"""Fixed-seed perception stand-ins.

Production deployments plug pretrained vision models into these four
interfaces (image embedder, keypoint extractor, identity embedder,
multi-scale feature pyramid). The desk-scale stand-ins below are small
deterministic conv nets built from recorded seeds, differentiable end to
end so every loss that consumes them is trainable.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

N_KEYPOINTS = 76


class ImageEmbedder(nn.Module):
    """CLIP-style global image embedding, L2-normalized."""

    def __init__(self, embed_dim: int, seed: int = 101):
        super().__init__()
        self.seed = seed
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.conv1 = nn.Conv2d(3, 16, 3, stride=2, padding=1)
            self.conv2 = nn.Conv2d(16, 32, 3, stride=2, padding=1)
            self.conv3 = nn.Conv2d(32, 32, 3, stride=2, padding=1)
            self.proj = nn.Linear(32 * 16 + 6, embed_dim)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        single = img.dim() == 3
        x = img[None] if single else img
        # channel means/vars keep coarse color statistics in the embedding
        stats = torch.cat([x.mean(dim=(2, 3)), x.var(dim=(2, 3), unbiased=False)], dim=1)
        h = F.leaky_relu(self.conv1(x), 0.2)
        h = F.leaky_relu(self.conv2(h), 0.2)
        h = F.leaky_relu(self.conv3(h), 0.2)
        h = F.adaptive_avg_pool2d(h, 4).flatten(1)
        e = self.proj(torch.cat([h, stats], dim=1))
        e = e / (e.norm(dim=-1, keepdim=True) + 1e-12)
        return e[0] if single else e


class KeypointExtractor(nn.Module):
    """Differentiable landmark stand-in.

    A soft skin-likelihood gate locates the face; each of the fixed
    landmarks owns a window anchored face-relative (centroid plus a seeded
    offset scaled by the face radius) and refines its position toward the
    local mass of gated edge/darkness saliency. Windows keep every
    landmark unimodal, the face gate keeps positions insensitive to hair
    and background appearance, and the construction is shift-equivariant
    away from borders.
    """

    SKIN_TONE = (0.45, 0.18, -0.05)

    def __init__(self, n_points: int = N_KEYPOINTS, seed: int = 202, window: float = 0.35,
                 saturation: float = 0.15, refine: float = 3.0):
        super().__init__()
        self.seed = seed
        self.n_points = n_points
        self.window = window
        self.saturation = saturation
        self.refine = refine
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            radii = torch.sqrt(torch.rand(n_points))
            angles = 2 * math.pi * torch.rand(n_points)
        offsets = torch.stack([radii * torch.cos(angles), radii * torch.sin(angles)], dim=-1)
        self.register_buffer("offsets", offsets)  # [P, 2] in face-radius units

    def _face_gate(self, x: torch.Tensor) -> torch.Tensor:
        # soft closing: dilation fills the dark features inside the face,
        # erosion pulls the support back so adjacent hair stays outside
        mu = torch.tensor(self.SKIN_TONE, dtype=x.dtype)[None, :, None, None]
        skin = torch.exp(-((x - mu) ** 2).sum(1, keepdim=True) / 0.12)
        for _ in range(3):
            skin = F.max_pool2d(F.pad(skin, (1, 1, 1, 1), mode="replicate"), 3, stride=1)
        for _ in range(3):
            skin = -F.max_pool2d(F.pad(-skin, (1, 1, 1, 1), mode="replicate"), 3, stride=1)
        skin = F.avg_pool2d(F.pad(skin, (1, 1, 1, 1), mode="replicate"), 3, stride=1)
        return skin / (skin + 0.25)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        single = img.dim() == 3
        x = img[None] if single else img
        x = F.avg_pool2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), 3, stride=1)
        b, _, hh, ww = x.shape
        gate = self._face_gate(x)  # [B,1,H,W]
        gx = x[..., :, 1:] - x[..., :, :-1]
        gy = x[..., 1:, :] - x[..., :-1, :]
        grad = F.pad(gx.abs().mean(1, keepdim=True), (0, 1, 0, 0)) + F.pad(
            gy.abs().mean(1, keepdim=True), (0, 0, 0, 1)
        )
        edges = grad / (grad + self.saturation)
        dark = F.relu(-x.mean(1, keepdim=True) - 0.15)
        saliency = (edges + dark / (dark + self.saturation)) * gate  # [B,1,H,W]

        ys = torch.arange(hh, dtype=x.dtype)
        xs = torch.arange(ww, dtype=x.dtype)
        grid_y = ys[None, :, None].expand(1, hh, ww)
        grid_x = xs[None, None, :].expand(1, hh, ww)
        # anchor frame: centroid/spread of the dark facial features (hair
        # cannot occlude them), with a weak whole-face fallback
        feat = (dark / (dark + self.saturation)) * gate + 0.02 * gate
        fmass = feat[:, 0].sum(dim=(1, 2)).clamp(min=1e-6)
        cx = (feat[:, 0] * grid_x[0]).sum(dim=(1, 2)) / fmass
        cy = (feat[:, 0] * grid_y[0]).sum(dim=(1, 2)) / fmass
        d2 = (grid_x[0][None] - cx[:, None, None]) ** 2 + (grid_y[0][None] - cy[:, None, None]) ** 2
        radius = (2.2 * torch.sqrt((feat[:, 0] * d2).sum(dim=(1, 2)) / fmass)).clamp(min=2.0)

        anchors_x = cx[:, None] + radius[:, None] * self.offsets[None, :, 0]  # [B,P]
        anchors_y = cy[:, None] + radius[:, None] * self.offsets[None, :, 1]
        sigma = (self.window * radius).clamp(min=1.0)[:, None, None, None]
        dx = grid_x[None] - anchors_x[:, :, None, None]
        dy = grid_y[None] - anchors_y[:, :, None, None]
        windows = torch.exp(-(dx * dx + dy * dy) / (2 * sigma * sigma))  # [B,P,H,W]
        heat = windows * (0.05 + self.refine * saliency)
        norm = heat.sum(dim=(2, 3)).clamp(min=1e-8)
        kp_x = (heat * grid_x[None]).sum(dim=(2, 3)) / norm
        kp_y = (heat * grid_y[None]).sum(dim=(2, 3)) / norm
        kp = torch.stack([kp_x, kp_y], dim=-1)
        kp = torch.stack([kp[..., 0].clamp(0, ww - 1), kp[..., 1].clamp(0, hh - 1)], dim=-1)
        return kp[0] if single else kp


class IdentityEmbedder(nn.Module):
    """Face-identity embedding stand-in; a center window emphasizes the
    face region before the conv trunk."""

    def __init__(self, embed_dim: int, seed: int = 303):
        super().__init__()
        self.seed = seed
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.conv1 = nn.Conv2d(3, 16, 5, stride=2, padding=2)
            self.conv2 = nn.Conv2d(16, 32, 3, stride=2, padding=1)
            self.proj = nn.Linear(32 * 16, embed_dim)
        for p in self.parameters():
            p.requires_grad_(False)

    def _window(self, res: int, dtype) -> torch.Tensor:
        ax = torch.linspace(-1, 1, res, dtype=dtype)
        d2 = ax[:, None] ** 2 + ax[None, :] ** 2
        return torch.exp(-2.0 * d2)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        single = img.dim() == 3
        x = img[None] if single else img
        x = x * self._window(x.shape[-1], x.dtype)
        h = F.leaky_relu(self.conv1(x), 0.2)
        h = F.leaky_relu(self.conv2(h), 0.2)
        h = F.adaptive_avg_pool2d(h, 4).flatten(1)
        e = self.proj(h)
        e = e / (e.norm(dim=-1, keepdim=True) + 1e-12)
        return e[0] if single else e


class FeaturePyramid(nn.Module):
    """Multi-scale linear feature maps for perceptual distances.

    Linear filters keep distances exactly monotone along image
    interpolation, which the perceptual-loss contract relies on.
    """

    def __init__(self, n_scales: int = 3, channels: int = 12, seed: int = 404):
        super().__init__()
        self.seed = seed
        self.n_scales = n_scales
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.filters = nn.ModuleList(
                [nn.Conv2d(3, channels, 3, padding=1, bias=False) for _ in range(n_scales)]
            )
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, img: torch.Tensor) -> list[torch.Tensor]:
        single = img.dim() == 3
        x = img[None] if single else img
        feats = []
        for i, filt in enumerate(self.filters):
            if i > 0:
                x = F.avg_pool2d(x, 2)
            f = filt(x)
            feats.append(f[0] if single else f)
        return feats


class PerceptionBundle(nn.Module):
    """The four perception interfaces with their seeds, checkpointable."""

    def __init__(self, embed_dim: int, seeds: tuple[int, int, int, int] = (101, 202, 303, 404)):
        super().__init__()
        self.embed_dim = embed_dim
        self.seeds = tuple(seeds)
        self.clip = ImageEmbedder(embed_dim, seeds[0])
        self.keypoints = KeypointExtractor(seed=seeds[1])
        self.identity = IdentityEmbedder(embed_dim, seeds[2])
        self.pyramid = FeaturePyramid(seed=seeds[3])
