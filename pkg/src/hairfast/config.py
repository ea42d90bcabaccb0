"""Generator geometry and the segmentation palette.

Block k of the synthesis network produces features at 4*2^(k-1) pixels and
consumes two style vectors. The F tensor edited by the shape stage is the
output of ``f_edit_block``; the refinement stage edits the next block's
output (twice the side length, 4x the pixels).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

from .errors import ConfigError

STYLES_PER_BLOCK = 2

# Default palette: index -> semantic class.
PALETTE = ("background", "face", "hair", "ears", "neck", "clothes")
BG, FACE, HAIR, EARS, NECK, CLOTHES = range(6)


@dataclass(frozen=True)
class GeneratorConfig:
    output_resolution: int = 64
    style_dim: int = 64
    channel_base: int = 32      # width of the final block; earlier blocks double, capped
    channel_max: int = 128
    f_edit_block: int = 3
    n_classes: int = len(PALETTE)
    embed_dim: int = field(init=False, default=0)  # derived: equals style_dim

    def __post_init__(self):
        res = self.output_resolution
        if res < 8 or res & (res - 1) != 0:
            raise ConfigError(f"output_resolution must be a power of two >= 8, got {res}")
        if not (1 <= self.f_edit_block < self.n_blocks):
            raise ConfigError(
                f"f_edit_block must lie in [1, {self.n_blocks - 1}] for {res}px, got {self.f_edit_block}"
            )
        if self.style_dim < 4 or self.channel_base < 4:
            raise ConfigError("style_dim and channel_base must be >= 4")
        object.__setattr__(self, "embed_dim", self.style_dim)

    @property
    def n_blocks(self) -> int:
        # one block per octave from 4px: 4, 8, ..., output_resolution
        return self.output_resolution.bit_length() - 2

    @property
    def f_refine_block(self) -> int:
        return self.f_edit_block + 1

    @property
    def n_style_vectors(self) -> int:
        """Total W+ rows."""
        return STYLES_PER_BLOCK * self.n_blocks

    @property
    def n_post_split_vectors(self) -> int:
        """S-space rows: styles consumed by blocks after f_edit_block."""
        return STYLES_PER_BLOCK * (self.n_blocks - self.f_edit_block)

    @property
    def rotate_rows(self) -> int:
        """Coarse W+ rows the pose-rotation encoder may rewrite (first third)."""
        return max(1, self.n_style_vectors // 3)

    def block_resolution(self, k: int) -> int:
        if not (0 <= k <= self.n_blocks):
            raise ConfigError(f"block index {k} outside [0, {self.n_blocks}]")
        return 4 * 2 ** (k - 1) if k >= 1 else 4  # block 0 = the learned constant, 4x4

    def channels(self, k: int) -> int:
        k = max(1, k)
        return min(self.channel_max, self.channel_base * 2 ** (self.n_blocks - k))

    def styles_for_range(self, from_block: int, to_block: int) -> int:
        return STYLES_PER_BLOCK * (to_block - from_block)

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("embed_dim")
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "GeneratorConfig":
        return cls(**json.loads(text))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def scaled_radius(radius_at_1024: float, resolution: int) -> int:
    """Morphology radii scale linearly with resolution, floored at 1 pixel."""
    return max(1, round(radius_at_1024 * resolution / 1024))
