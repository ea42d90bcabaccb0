"""Toy StyleGAN2-like generator with W+/F/S spaces and partial execution.

The synthesis network is a stack of blocks, two modulated 3x3 convolutions
each, doubling resolution from 4px. Any block boundary can be cut: features
can be captured there (``run_to_block``) and synthesis resumed from an
arbitrary F tensor (``resume_from`` / ``resume_to_block``), which is what
the alignment stages edit.

Style-row conventions (see docstrings): a full W+ matrix is row-aligned to
block 1, an S matrix to the block after the F split. ``resume_from``
consumes the *last* rows it needs, ``resume_to_block`` the *first* rows
(tiled cyclically when the matrix is shorter than the block range needs,
which is how style-only features are generated from an S matrix).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import STYLES_PER_BLOCK, GeneratorConfig
from .errors import ConfigError, ShapeMismatchError

Image = torch.Tensor  # [3,H,W] or [B,3,H,W], values in [-1,1]
WPlus = torch.Tensor  # [n_style_vectors, style_dim] (optionally batched)
SSpace = torch.Tensor  # [n_post_split_vectors, style_dim] (optionally batched)


@dataclass
class FTensor:
    """Spatial feature tensor captured at a block boundary."""

    data: torch.Tensor  # [C,r,r] or [B,C,r,r]
    block_index: int

    @property
    def resolution(self) -> int:
        return self.data.shape[-1]


def check_finite(name: str, t: torch.Tensor):
    if not torch.isfinite(t).all():
        raise ConfigError(f"{name} contains non-finite entries")


def _harmonize_batch(x: torch.Tensor, styles: torch.Tensor):
    if x.shape[0] == styles.shape[0]:
        return x, styles
    if x.shape[0] == 1:
        return x.expand(styles.shape[0], -1, -1, -1), styles
    if styles.shape[0] == 1:
        return x, styles.expand(x.shape[0], -1, -1)
    raise ShapeMismatchError(f"batch mismatch: features {x.shape[0]} vs styles {styles.shape[0]}")


class EqualLinear(nn.Linear):
    """Linear layer with runtime weight scaling (equalized learning rate)."""

    def __init__(self, in_dim, out_dim, bias_init=0.0):
        super().__init__(in_dim, out_dim)
        nn.init.normal_(self.weight)
        nn.init.constant_(self.bias, bias_init)
        self.scale = 1.0 / math.sqrt(in_dim)

    def forward(self, x):
        return F.linear(x, self.weight * self.scale, self.bias)


class ModulatedConv2d(nn.Module):
    """Style-modulated conv; input channels scaled by the style affine,
    output demodulated per sample (math equivalent of per-sample weights)."""

    def __init__(self, in_ch, out_ch, style_dim, kernel=3, demodulate=True):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(out_ch))
        self.affine = EqualLinear(style_dim, in_ch, bias_init=1.0)
        self.scale = 1.0 / math.sqrt(in_ch * kernel * kernel)
        self.padding = kernel // 2
        self.demodulate = demodulate

    def forward(self, x, style_row):
        s = self.affine(style_row)  # [B, in_ch]
        w = self.weight * self.scale
        x = x * s[:, :, None, None]
        x = F.conv2d(x, w, padding=self.padding)
        if self.demodulate:
            w2 = w.square().sum(dim=(2, 3))  # [out, in]
            d = torch.rsqrt(w2[None] @ (s.square())[:, :, None] + 1e-8)  # [B, out, 1]
            x = x * d.squeeze(-1)[:, :, None, None]
        return x + self.bias[None, :, None, None]


class SynthesisBlock(nn.Module):
    def __init__(self, in_ch, out_ch, style_dim, upsample):
        super().__init__()
        self.upsample = upsample
        self.conv_a = ModulatedConv2d(in_ch, out_ch, style_dim)
        self.conv_b = ModulatedConv2d(out_ch, out_ch, style_dim)

    def forward(self, x, styles):  # styles: [B, 2, style_dim]
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = F.leaky_relu(self.conv_a(x, styles[:, 0]), 0.2)
        x = F.leaky_relu(self.conv_b(x, styles[:, 1]), 0.2)
        return x


class MappingNet(nn.Module):
    def __init__(self, style_dim):
        super().__init__()
        self.fc1 = EqualLinear(style_dim, style_dim)
        self.fc2 = EqualLinear(style_dim, style_dim)

    def forward(self, z):
        z = z * torch.rsqrt(z.square().mean(dim=-1, keepdim=True) + 1e-8)
        return self.fc2(F.leaky_relu(self.fc1(z), 0.2))


class ToyGenerator(nn.Module):
    """Trainable desk-scale generator. Deterministic given (weights, inputs)."""

    def __init__(self, cfg: GeneratorConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.mapping = MappingNet(cfg.style_dim)
            self.const = nn.Parameter(torch.randn(cfg.channels(1), 4, 4))
            blocks = []
            for k in range(1, cfg.n_blocks + 1):
                in_ch = cfg.channels(k - 1) if k > 1 else cfg.channels(1)
                blocks.append(SynthesisBlock(in_ch, cfg.channels(k), cfg.style_dim, upsample=k > 1))
            self.blocks = nn.ModuleList(blocks)
            self.to_rgb = nn.Conv2d(cfg.channels(cfg.n_blocks), 3, 1)
        self.register_buffer("w_avg", torch.zeros(cfg.style_dim))
        self.register_buffer("w_avg_ready", torch.zeros((), dtype=torch.uint8))
        self.register_buffer("seed", torch.tensor(seed, dtype=torch.int64))

    # -- shape plumbing -------------------------------------------------

    def _batched_styles(self, s: torch.Tensor, name: str) -> tuple[torch.Tensor, bool]:
        if s.dim() == 2:
            return s[None], False
        if s.dim() == 3:
            return s, True
        raise ShapeMismatchError(f"{name} must be [rows, {self.cfg.style_dim}] (optionally batched)")

    def _check_rows(self, s: torch.Tensor, rows: int, name: str):
        if s.shape[-2] != rows or s.shape[-1] != self.cfg.style_dim:
            raise ShapeMismatchError(
                f"{name} must have shape [..., {rows}, {self.cfg.style_dim}], got {tuple(s.shape)}"
            )
        check_finite(name, s)

    def _check_f(self, f: FTensor, block: int):
        want = self.cfg.block_resolution(block)
        ch = self.cfg.channels(block if block >= 1 else 1)
        if f.block_index != block:
            raise ShapeMismatchError(f"F tensor is tagged block {f.block_index}, expected {block}")
        if f.data.shape[-1] != want or f.data.shape[-2] != want or f.data.shape[-3] != ch:
            raise ShapeMismatchError(
                f"F tensor at block {block} must be [{ch},{want},{want}], got {tuple(f.data.shape)}"
            )
        check_finite("F tensor", f.data)

    # -- core execution --------------------------------------------------

    def _run_blocks(self, x, styles, from_block, to_block):
        # styles: [B, 2*(to_block-from_block), style_dim], consumed in order
        i = 0
        for k in range(from_block + 1, to_block + 1):
            x = self.blocks[k - 1](x, styles[:, i : i + STYLES_PER_BLOCK])
            i += STYLES_PER_BLOCK
        return x

    def constant_feature(self, batch: int | None = None) -> FTensor:
        """The learned 4x4 input constant, as an F tensor at block 0."""
        data = self.const if batch is None else self.const[None].expand(batch, -1, -1, -1)
        return FTensor(data=data, block_index=0)

    def run_to_block(self, w: WPlus, k: int) -> FTensor:
        """Run blocks 1..k from the learned constant; consumes the first 2k rows of w."""
        if not (1 <= k <= self.cfg.n_blocks):
            raise ConfigError(f"block index {k} outside [1, {self.cfg.n_blocks}]")
        wb, batched = self._batched_styles(w, "w")
        self._check_rows(wb, self.cfg.n_style_vectors, "w")
        x = self.const[None].expand(wb.shape[0], -1, -1, -1)
        x = self._run_blocks(x, wb[:, : STYLES_PER_BLOCK * k], 0, k)
        return FTensor(data=x if batched else x[0], block_index=k)

    def resume_to_block(self, f: FTensor, s_prefix: torch.Tensor, from_block: int, to_block: int) -> FTensor:
        """Run blocks from_block+1..to_block on f.

        Consumes the first 2*(to_block-from_block) rows of ``s_prefix``;
        when the matrix is shorter the rows repeat cyclically, so a post-split
        S matrix can drive the early blocks (style-only feature generation).
        """
        if not (0 <= from_block < to_block <= self.cfg.n_blocks):
            raise ConfigError(f"invalid block range {from_block}..{to_block}")
        self._check_f(f, from_block)
        sb, batched_s = self._batched_styles(s_prefix, "s_prefix")
        check_finite("s_prefix", sb)
        need = self.cfg.styles_for_range(from_block, to_block)
        if sb.shape[1] < need:
            reps = -(-need // sb.shape[1])
            sb = sb.repeat(1, reps, 1)
        x = f.data[None] if f.data.dim() == 3 else f.data
        x, sb = _harmonize_batch(x, sb)
        x = self._run_blocks(x, sb[:, :need], from_block, to_block)
        batched = f.data.dim() == 4 or batched_s
        return FTensor(data=x if batched else x[0], block_index=to_block)

    def resume_from(self, f: FTensor, s: torch.Tensor, from_block: int) -> Image:
        """Finish synthesis from f at ``from_block``.

        Consumes the last 2*(n_blocks-from_block) rows of ``s``: both a full
        W+ matrix and a post-split S matrix are tail-aligned to the final
        block, so either may be passed directly.
        """
        if not (0 <= from_block <= self.cfg.n_blocks):
            raise ConfigError(f"block index {from_block} outside [0, {self.cfg.n_blocks}]")
        self._check_f(f, from_block)
        sb, _ = self._batched_styles(s, "s")
        check_finite("s", sb)
        need = self.cfg.styles_for_range(from_block, self.cfg.n_blocks)
        if sb.shape[1] < need:
            raise ShapeMismatchError(
                f"styles cover {sb.shape[1]} rows, blocks {from_block + 1}..{self.cfg.n_blocks} need {need}"
            )
        x = f.data[None] if f.data.dim() == 3 else f.data
        x, sb = _harmonize_batch(x, sb)
        if need:
            x = self._run_blocks(x, sb[:, sb.shape[1] - need :], from_block, self.cfg.n_blocks)
        img = torch.tanh(self.to_rgb(x))
        batched = f.data.dim() == 4 or s.dim() == 3
        return img if batched else img[0]

    def synthesize(self, w: WPlus) -> Image:
        """Full synthesis; exactly run_to_block + resume_from, so the
        partial-execution identity holds bitwise at every split point."""
        k = self.cfg.f_edit_block
        return self.resume_from(self.run_to_block(w, k), w, k)

    def style_only_features(self, s: torch.Tensor, to_block: int) -> FTensor:
        """F tensor generated from styles alone (constant input, blocks 1..to_block)."""
        batch = s.shape[0] if s.dim() == 3 else None
        return self.resume_to_block(self.constant_feature(batch), s, 0, to_block)

    def s_tail(self, w: WPlus) -> SSpace:
        """The post-split style rows of a full W+ matrix."""
        wb, batched = self._batched_styles(w, "w")
        self._check_rows(wb, self.cfg.n_style_vectors, "w")
        tail = wb[:, self.cfg.n_style_vectors - self.cfg.n_post_split_vectors :]
        return tail if batched else tail[0]

    # -- mapping / latent average ----------------------------------------

    def map_latent(self, z: torch.Tensor) -> torch.Tensor:
        return self.mapping(z)

    def broadcast_w(self, w_row: torch.Tensor) -> WPlus:
        """Tile a single mapped latent over all W+ rows."""
        rows = self.cfg.n_style_vectors
        if w_row.dim() == 1:
            return w_row[None].expand(rows, -1)
        return w_row[:, None].expand(-1, rows, -1)

    def estimate_latent_avg(self, n_samples: int = 200_000, batch: int = 8192):
        gen = torch.Generator().manual_seed(int(self.seed))
        total = torch.zeros(self.cfg.style_dim, dtype=torch.float64)
        done = 0
        with torch.no_grad():
            while done < n_samples:
                b = min(batch, n_samples - done)
                z = torch.randn(b, self.cfg.style_dim, generator=gen)
                total += self.mapping(z).sum(dim=0).double()
                done += b
        self.w_avg.copy_((total / n_samples).float())
        self.w_avg_ready.fill_(1)

    def latent_avg(self) -> tuple[torch.Tensor, SSpace]:
        """Mean mapped latent (cached) and its broadcast over the S rows."""
        if not bool(self.w_avg_ready):
            self.estimate_latent_avg()
        row = self.w_avg.clone()
        return row, row[None].expand(self.cfg.n_post_split_vectors, -1).clone()
