"""Desk-scale stack assembly: trains every component on the synthetic
dataset in dependency order and returns a ready runtime.

Presets trade fidelity against CPU minutes; "tiny" is sized for the test
suite, "desk" for an interactive demo checkpoint.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

from .config import GeneratorConfig
from .data import FreshFaces, SyntheticFaces
from .pipeline import HairFastRuntime
from .training import (
    TrainConfig,
    TrainLog,
    build_color_pairs,
    build_refine_pairs,
    default_color_config,
    default_fs_config,
    default_fuser_config,
    default_rotate_config,
    fit_generator,
    train_color,
    train_e4e,
    train_fs_encoder,
    train_fusers,
    train_rotate,
    train_sean,
    train_segmenter,
    train_shape,
)

log = logging.getLogger(__name__)


@dataclass
class StackSizes:
    n_train: int = 192
    n_heldout: int = 48
    generator_steps: int = 3000
    segmenter_steps: int = 900
    sean_steps: int = 300
    shape_steps: int = 700
    e4e_steps: int = 800
    fs16_steps: int = 250
    fs64_steps: int = 350
    rotate_steps: int = 300
    color_triples: int = 80
    color_steps: int = 250
    refine_pairs: int = 96
    fuser_steps: int = 250
    batch_size: int = 8
    lr: float = 1e-2


def tiny_sizes() -> StackSizes:
    return StackSizes()


def desk_sizes() -> StackSizes:
    return StackSizes(n_train=384, n_heldout=96, generator_steps=900, segmenter_steps=400,
                      sean_steps=500, shape_steps=700, e4e_steps=700, fs16_steps=450,
                      fs64_steps=650, rotate_steps=500, color_triples=160, color_steps=450,
                      refine_pairs=160, fuser_steps=450)


def tiny_config() -> GeneratorConfig:
    return GeneratorConfig(output_resolution=32, style_dim=32, channel_base=24,
                           channel_max=96, f_edit_block=2)


def _cfg(base: TrainConfig, sizes: StackSizes, steps: int, seed: int, lr: float | None = None) -> TrainConfig:
    return replace(base, steps=steps, batch_size=sizes.batch_size,
                   lr=lr if lr is not None else sizes.lr, seed=seed, cosine_decay=True)


@dataclass
class ToyStack:
    runtime: HairFastRuntime
    train_data: SyntheticFaces
    heldout: SyntheticFaces
    color_pairs: list = field(default_factory=list)
    refine_pairs: list = field(default_factory=list)
    logs: dict[str, TrainLog] = field(default_factory=dict)


def build_toy_stack(cfg: GeneratorConfig | None = None, sizes: StackSizes | None = None,
                    seed: int = 0, log_dir=None) -> ToyStack:
    cfg = cfg or tiny_config()
    sizes = sizes or tiny_sizes()
    rt = HairFastRuntime.from_random(cfg, seed=seed)
    train_data = SyntheticFaces(sizes.n_train, cfg, seed=seed + 100)
    heldout = SyntheticFaces(sizes.n_heldout, cfg, seed=seed + 200)
    stream = FreshFaces(cfg, seed=seed + 300)
    logs: dict[str, TrainLog] = {}

    def logger(name: str) -> TrainLog:
        path = None if log_dir is None else f"{log_dir}/{name}.ndjson"
        logs[name] = TrainLog(path)
        return logs[name]

    log.info("fitting generator (%d steps)", sizes.generator_steps)
    fit_generator(rt, stream, _cfg(TrainConfig(weight_decay=0.0), sizes, sizes.generator_steps, seed + 1),
                  logger("generator"))
    log.info("training segmenter")
    train_segmenter(rt, stream, _cfg(TrainConfig(weight_decay=0.0), sizes, sizes.segmenter_steps, seed + 2, lr=5e-3),
                    logger("segmenter"), render_fraction=0.35)
    log.info("training editability inverter")
    train_e4e(rt, stream, _cfg(TrainConfig(weight_decay=0.0), sizes, sizes.e4e_steps, seed + 5, lr=2e-3),
              log=logger("e4e"))
    log.info("training per-class codec")
    train_sean(rt, stream, _cfg(TrainConfig(weight_decay=0.0), sizes, sizes.sean_steps, seed + 3, lr=5e-3),
               logger("sean"))
    log.info("training shape encoder/adaptor")
    train_shape(rt, stream, _cfg(TrainConfig(weight_decay=0.0), sizes, sizes.shape_steps, seed + 4, lr=2e-3),
                logger("shape"), chain_fraction=0.5)
    log.info("training feature-style encoder (edit variant)")
    fs16_cfg = _cfg(default_fs_config(), sizes, sizes.fs16_steps, seed + 6, lr=1e-3)
    fs16_cfg.lambdas = dict(fs16_cfg.lambdas, adv=0.0)  # keep the small variant adversary-free
    train_fs_encoder(rt, stream, fs16_cfg, variant="edit16", log=logger("fs16"))
    log.info("training feature-style encoder (refine variant)")
    fs64_cfg = _cfg(default_fs_config(), sizes, sizes.fs64_steps, seed + 7, lr=1e-3)
    fs64_cfg = replace(fs64_cfg, disc_lr=5e-4)
    train_fs_encoder(rt, stream, fs64_cfg, variant="refine64", log=logger("fs64"))
    log.info("training rotation encoder")
    rotate_cfg = _cfg(default_rotate_config(), sizes, sizes.rotate_steps, seed + 8, lr=1e-3)
    train_rotate(rt, stream, rotate_cfg, log=logger("rotate"))
    log.info("building color pairs (%d triples)", sizes.color_triples)
    color_pairs = build_color_pairs(rt, train_data, sizes.color_triples, seed=seed + 9)
    log.info("training blend encoder on %d pairs", len(color_pairs))
    color_cfg = _cfg(default_color_config(), sizes, sizes.color_steps, seed + 10, lr=1e-3)
    train_color(rt, color_pairs, color_cfg, data=train_data, log=logger("color"))
    log.info("building refinement pairs (%d)", sizes.refine_pairs)
    refine_pairs = build_refine_pairs(rt, train_data, sizes.refine_pairs, seed=seed + 11)
    log.info("training fusers")
    fuser_cfg = _cfg(default_fuser_config(), sizes, sizes.fuser_steps, seed + 12, lr=1e-3)
    fuser_cfg = replace(fuser_cfg, disc_lr=5e-4)
    train_fusers(rt, refine_pairs, train_data, fuser_cfg, log=logger("fusers"))
    rt.eval_all()
    return ToyStack(runtime=rt, train_data=train_data, heldout=heldout,
                    color_pairs=color_pairs, refine_pairs=refine_pairs, logs=logs)
