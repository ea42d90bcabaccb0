"""Training procedures.

Five core procedures (pose rotation, color pairs + blending, the
feature-style encoder with its alpha ramp, the refinement fusers, and the
full finetune at half learning rate) plus the toy pretraining that stands
up the generator, segmenter, codec, shape networks and inverters on the
synthetic dataset.

Configs serialize to a flat ``key = value`` text file (tuples as
comma-separated values, loss weights as ``lambda.<name>``). Logs are
newline-delimited JSON records ``{step, loss, raw, ema, normalized}``.
Procedures checkpoint their optimizer, sampler RNG and step so an
interrupted run resumed with the same seed reproduces the loss curve.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_container, save_container, state_to_tensors, tensors_to_state
from .config import HAIR, GeneratorConfig, scaled_radius
from .data import FreshFaces, SyntheticFaces
from .errors import CheckpointError
from .generator import FTensor
from .losses import (
    EMANormalizer,
    cosine_embedding_distance,
    loss_adv,
    loss_clip_region,
    loss_dsc,
    loss_id,
    loss_mlpips,
    loss_pose,
    loss_recon_latent,
)
from .masks import SegMask, SoftMask, downsample_mask, hair_mask, refinement_masks
from .pipeline import (HairFastRuntime, TransferRequest, compose_f, inpaint_f, mix_fs,
                       pose_align, transfer)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-6
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 16
    steps: int = 1000
    lambdas: dict[str, float] = field(default_factory=dict)
    ema_t: float = 0.02
    alpha_ramp_frac: float = 0.5
    disc_lr: float = 0.0  # 0: no discriminator optimizer
    r1_gamma: float = 1.0
    dsc_gamma: float = 2.0
    seed: int = 0
    log_every: int = 1
    cosine_decay: bool = False  # cosine LR ramp-down to 5%; off for the paper recipes

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if any(v < 0 for v in self.lambdas.values()):
            raise ValueError("loss weights must be nonnegative")

    def to_kv_file(self, path):
        lines = []
        for key in ("lr", "weight_decay", "batch_size", "steps", "ema_t", "alpha_ramp_frac",
                    "disc_lr", "r1_gamma", "dsc_gamma", "seed", "log_every"):
            lines.append(f"{key} = {getattr(self, key)}")
        lines.append(f"betas = {self.betas[0]},{self.betas[1]}")
        for name, value in sorted(self.lambdas.items()):
            lines.append(f"lambda.{name} = {value}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_kv_file(cls, path) -> "TrainConfig":
        kwargs: dict = {"lambdas": {}}
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key == "betas":
                a, b = value.split(",")
                kwargs["betas"] = (float(a), float(b))
            elif key.startswith("lambda."):
                kwargs["lambdas"][key[len("lambda.") :]] = float(value)
            elif key in ("batch_size", "steps", "seed", "log_every"):
                kwargs[key] = int(value)
            else:
                kwargs[key] = float(value)
        return cls(**kwargs)


def default_rotate_config() -> TrainConfig:
    return TrainConfig(lr=1e-4, weight_decay=1e-6, batch_size=16,
                       lambdas={"pose": 6.0, "recon": 2.0, "id": 1.0})


def default_color_config() -> TrainConfig:
    return TrainConfig(lr=1e-4, weight_decay=1e-6, batch_size=16,
                       lambdas={"color": 1.0, "face": 1.0})


def default_fs_config() -> TrainConfig:
    return TrainConfig(lr=2e-4, weight_decay=0.0, batch_size=16, disc_lr=1e-4,
                       lambdas={"id": 0.1, "mlpips": 0.8, "recon_feat": 0.01, "adv": 0.2})


def default_fuser_config() -> TrainConfig:
    return TrainConfig(lr=2e-4, weight_decay=0.0, batch_size=16, disc_lr=3e-4,
                       lambdas={"id": 0.1, "mlpips": 0.4, "recon_feat": 0.01,
                                "dsc": 0.1, "inpaint": 0.2, "adv": 0.2})


def finetune_config(fuser_cfg: TrainConfig | None = None) -> TrainConfig:
    """Full-model finetune: same parameters at half the learning rate."""
    base = fuser_cfg or default_fuser_config()
    return replace(base, lr=base.lr / 2.0, disc_lr=base.disc_lr / 2.0)


class TrainLog:
    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def log(self, step: int, terms: dict):
        lines = []
        for name, t in terms.items():
            rec = {"step": step, "loss": name, "raw": t["raw"],
                   "ema": t.get("ema"), "normalized": t["normalized"]}
            self.records.append(rec)
            lines.append(json.dumps(rec))
        if self.path:
            with open(self.path, "a") as f:
                f.write("\n".join(lines) + "\n")

    def curve(self, name: str) -> list[float]:
        return [r["raw"] for r in self.records if r["loss"] == name]


class TrainLoop:
    """Owns optimizer(s), the batch-sampling RNG and the step counter, and
    moves them in and out of resume checkpoints."""

    def __init__(self, modules: dict[str, nn.Module], cfg: TrainConfig,
                 disc: nn.Module | None = None, ema: EMANormalizer | None = None):
        self.cfg = cfg
        self.modules = modules
        self.ema = ema
        params = []
        for m in modules.values():
            params += [p for p in m.parameters() if p.requires_grad]
        self.opt = torch.optim.Adam(params, lr=cfg.lr, betas=cfg.betas,
                                    weight_decay=cfg.weight_decay)
        self.disc = disc
        self.disc_opt = None
        if disc is not None and cfg.disc_lr > 0:
            self.disc_opt = torch.optim.Adam(disc.parameters(), lr=cfg.disc_lr, betas=cfg.betas)
        self.sampler = torch.Generator().manual_seed(cfg.seed)
        self.step = 0

    def batch_indices(self, n_items: int) -> torch.Tensor:
        return torch.randint(0, n_items, (self.cfg.batch_size,), generator=self.sampler)

    def apply_lr_schedule(self):
        if not self.cfg.cosine_decay:
            return
        frac = min(1.0, self.step / max(1, self.cfg.steps))
        scale = 0.05 + 0.95 * 0.5 * (1.0 + math.cos(math.pi * frac))
        for group in self.opt.param_groups:
            group["lr"] = self.cfg.lr * scale
        if self.disc_opt is not None:
            for group in self.disc_opt.param_groups:
                group["lr"] = self.cfg.disc_lr * scale

    # -- resume state ---------------------------------------------------

    def _opt_tensors(self, opt, prefix):
        out = {}
        state = opt.state_dict()["state"]
        for idx, entry in state.items():
            for key, val in entry.items():
                tensor = val if torch.is_tensor(val) else torch.tensor(float(val))
                out[f"{prefix}/{idx}/{key}"] = tensor.detach().cpu().numpy()
        return out

    def _load_opt(self, opt, tensors, prefix):
        sd = opt.state_dict()
        state = {}
        groups = {}
        for name, arr in tensors.items():
            if not name.startswith(prefix + "/"):
                continue
            _, idx, key = name.rsplit("/", 2)
            groups.setdefault(int(idx), {})[key] = arr
        for idx, entry in groups.items():
            state[idx] = {
                k: (torch.as_tensor(v) if np.asarray(v).ndim else torch.tensor(float(v)))
                for k, v in entry.items()
            }
        sd["state"] = state
        opt.load_state_dict(sd)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {"loop/step": np.asarray(self.step, dtype=np.int64),
               "loop/sampler": self.sampler.get_state().numpy()}
        out.update(self._opt_tensors(self.opt, "loop/opt"))
        if self.disc_opt is not None:
            out.update(self._opt_tensors(self.disc_opt, "loop/disc_opt"))
        if self.ema is not None:
            out.update(self.ema.state_tensors())
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]):
        self.step = int(tensors["loop/step"])
        self.sampler.set_state(torch.from_numpy(tensors["loop/sampler"].copy()))
        self._load_opt(self.opt, tensors, "loop/opt")
        if self.disc_opt is not None:
            self._load_opt(self.disc_opt, tensors, "loop/disc_opt")
        if self.ema is not None:
            self.ema.load_state_tensors(tensors)

    def save_checkpoint(self, path, fingerprint: str, meta: dict | None = None):
        tensors = self.state_tensors()
        for name, module in self.modules.items():
            tensors.update(state_to_tensors(module, name))
        if self.disc is not None:
            tensors.update(state_to_tensors(self.disc, "disc"))
        save_container(path, tensors, fingerprint, meta)

    def load_checkpoint(self, path, fingerprint: str):
        tensors, fp, _ = load_container(path)
        if fp != fingerprint:
            raise CheckpointError(f"resume checkpoint fingerprint {fp} != runtime {fingerprint}")
        for name, module in self.modules.items():
            tensors_to_state(module, tensors, name)
        if self.disc is not None and any(k.startswith("disc/") for k in tensors):
            tensors_to_state(self.disc, tensors, "disc")
        self.load_state_tensors(tensors)


def _batch(data, loop: "TrainLoop", stream: int = 0):
    """(images, classes, latents) for one step, from a fixed dataset or a
    fresh-sample stream."""
    if isinstance(data, FreshFaces):
        return data.batch(loop.step, loop.cfg.batch_size, stream)
    idx = loop.batch_indices(len(data))
    return data.images[idx], data.classes[idx], data.latents_z[idx]


def _jitter_onehot(onehot: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Degrade class maps the way the render-and-segment chain does: soften
    boundaries and perturb them by a pixel or two."""
    k = int(torch.randint(0, 3, (), generator=gen))
    if k == 0:
        return onehot
    blurred = F.avg_pool2d(F.pad(onehot, (1, 1, 1, 1), mode="replicate"), 3, stride=1)
    noise = 0.6 * torch.randn(blurred.shape, generator=gen)
    return F.softmax(blurred * 8.0 + noise, dim=1)


def _set_trainable(rt: HairFastRuntime, names: set[str]):
    for name, module in rt.modules().items():
        if module is None:
            continue
        trainable = name in names
        module.train(trainable)
        for p in module.parameters():
            p.requires_grad_(trainable)
    for p in rt.perception.parameters():
        p.requires_grad_(False)


# -- toy pretraining (artifact plumbing for the synthetic stack) ---------------


def fit_generator(rt: HairFastRuntime, data, cfg: TrainConfig,
                  log: TrainLog | None = None, mix_fraction: float = 0.5) -> TrainLog:
    """Fit mapping+synthesis as a decoder of the dataset's tied latents.

    A fraction of batches carries mixed supervision: the coarse style rows
    (the ones the rotation encoder rewrites) come from a pose donor, the
    rest from an appearance donor, and the target is the render of the
    mixed parameters. This pins head pose/geometry to the coarse rows.
    """
    log = log or TrainLog()
    _set_trainable(rt, {"generator"})
    loop = TrainLoop({"generator": rt.generator}, cfg)
    k_coarse = rt.cfg.rotate_rows
    stream = data if isinstance(data, FreshFaces) else None
    for _ in range(cfg.steps):
        mixed = stream is not None and mix_fraction > 0 and loop.step % max(1, round(1 / mix_fraction)) == 0
        if mixed:
            n = cfg.batch_size
            params_pose = stream.params_batch(loop.step, n, stream=2)
            params_rest = stream.params_batch(loop.step, n, stream=3)
            from .data import mix_pose, params_to_latents, render_batch

            target, _, _ = render_batch(
                [mix_pose(a, b) for a, b in zip(params_pose, params_rest)], rt.cfg)
            z_pose = params_to_latents(params_pose, rt.cfg.style_dim)
            z_rest = params_to_latents(params_rest, rt.cfg.style_dim)
            w_pose = rt.generator.broadcast_w(rt.generator.map_latent(z_pose))
            w_rest = rt.generator.broadcast_w(rt.generator.map_latent(z_rest))
            w = torch.cat([w_pose[:, :k_coarse], w_rest[:, k_coarse:]], dim=1)
        else:
            target, _, z = _batch(data, loop)
            w = rt.generator.broadcast_w(rt.generator.map_latent(z))
        out = rt.generator.synthesize(w)
        loss = F.mse_loss(out, target) + 0.3 * F.l1_loss(out, target)
        loop.apply_lr_schedule()
        loop.opt.zero_grad()
        loss.backward()
        loop.opt.step()
        loop.step += 1
        if loop.step % cfg.log_every == 0:
            log.log(loop.step, {"recon": {"raw": float(loss), "normalized": float(loss)}})
    rt.generator.estimate_latent_avg()
    _set_trainable(rt, set())
    return log


def train_segmenter(rt: HairFastRuntime, data, cfg: TrainConfig,
                    log: TrainLog | None = None, render_fraction: float = 0.0) -> TrainLog:
    """Per-pixel parser. ``render_fraction`` swaps part of each batch for
    generator renders of the same faces (labels unchanged), closing the
    domain gap the invert-and-render chain otherwise opens."""
    log = log or TrainLog()
    _set_trainable(rt, {"segmenter"})
    loop = TrainLoop({"segmenter": rt.segmenter}, cfg)
    ref = SyntheticFaces(64, rt.cfg, seed=1234) if isinstance(data, FreshFaces) else data
    freq = torch.bincount(ref.classes.flatten(), minlength=rt.cfg.n_classes).double()
    weights = (1.0 / (freq / freq.sum()).clamp(min=1e-4).sqrt()).float()
    weights = weights / weights.mean()
    for _ in range(cfg.steps):
        imgs, classes, z = _batch(data, loop)
        if render_fraction > 0.0:
            k = int(render_fraction * imgs.shape[0])
            if k:
                with torch.no_grad():
                    w = rt.generator.broadcast_w(rt.generator.map_latent(z[:k]))
                    imgs = torch.cat([rt.generator.synthesize(w), imgs[k:]])
        logits = rt.segmenter.logits(imgs)
        loss = F.cross_entropy(logits, classes, weight=weights)
        loop.apply_lr_schedule()
        loop.opt.zero_grad()
        loss.backward()
        loop.opt.step()
        loop.step += 1
        if loop.step % cfg.log_every == 0:
            log.log(loop.step, {"ce": {"raw": float(loss), "normalized": float(loss)}})
    _set_trainable(rt, set())
    return log


def train_sean(rt: HairFastRuntime, data, cfg: TrainConfig,
               log: TrainLog | None = None) -> TrainLog:
    """Self-reconstruction of images from per-class codes and own masks."""
    log = log or TrainLog()
    _set_trainable(rt, {"sean"})
    loop = TrainLoop({"sean": rt.sean}, cfg)
    for _ in range(cfg.steps):
        imgs, classes, _ = _batch(data, loop)
        oh = F.one_hot(classes, rt.cfg.n_classes).permute(0, 3, 1, 2).float()
        codes = rt.sean.encode_batch(imgs, oh)
        recon = rt.sean.decode_batch(codes, oh)
        loss = F.mse_loss(recon, imgs)
        loop.apply_lr_schedule()
        loop.opt.zero_grad()
        loss.backward()
        loop.opt.step()
        loop.step += 1
        if loop.step % cfg.log_every == 0:
            log.log(loop.step, {"recon": {"raw": float(loss), "normalized": float(loss)}})
    _set_trainable(rt, set())
    return log


def train_shape(rt: HairFastRuntime, data, cfg: TrainConfig,
                log: TrainLog | None = None, chain_fraction: float = 0.0) -> TrainLog:
    """Mask reconstruction plus a swap-cycle consistency objective.

    With ``chain_fraction`` > 0 (and inverter/segmenter already trained)
    part of the hair-branch inputs come from the invert-render-segment
    chain of the same faces, so the adaptor learns to decode degraded
    donor masks back to clean layouts.
    """
    log = log or TrainLog()
    _set_trainable(rt, {"shape"})
    enc, adapt = rt.shape_enc, rt.shape_adapt
    loop = TrainLoop({"shape_enc": enc, "shape_adapt": adapt}, cfg)

    def embed(trunk, fc, oh):
        return fc(F.adaptive_avg_pool2d(trunk(oh), 4).flatten(1))

    def hair_input(imgs, oh):
        use_chain = chain_fraction > 0 and loop.step % max(1, round(1 / chain_fraction)) == 0
        if use_chain:
            with torch.no_grad():
                renders = rt.generator.synthesize(rt.e4e(imgs))
                cls = rt.segmenter.logits(renders).argmax(dim=1)
            return F.one_hot(cls, rt.cfg.n_classes).permute(0, 3, 1, 2).float()
        return _jitter_onehot(oh, loop.sampler)

    for _ in range(cfg.steps):
        img_a, cls_a, _ = _batch(data, loop, stream=0)
        img_b, cls_b, _ = _batch(data, loop, stream=1)
        oh_a = F.one_hot(cls_a, rt.cfg.n_classes).permute(0, 3, 1, 2).float()
        oh_b = F.one_hot(cls_b, rt.cfg.n_classes).permute(0, 3, 1, 2).float()
        hair_a = embed(enc.hair_trunk, enc.hair_fc, hair_input(img_a, oh_a))
        face_a = embed(enc.face_trunk, enc.face_fc, oh_a)
        hair_b = embed(enc.hair_trunk, enc.hair_fc, hair_input(img_b, oh_b))
        recon_logits = adapt.logits(hair_a, face_a)
        loss_recon = F.cross_entropy(recon_logits, cls_a)
        swapped = F.softmax(adapt.logits(hair_b, face_a), dim=1)
        face_sw = embed(enc.face_trunk, enc.face_fc, swapped)
        cycle_logits = adapt.logits(hair_a, face_sw)
        loss_cycle = F.cross_entropy(cycle_logits, cls_a)
        dice = loss_dsc(F.softmax(recon_logits, dim=1), oh_a, gamma=cfg.dsc_gamma)
        loss = loss_recon + 0.5 * loss_cycle + 0.5 * dice
        loop.apply_lr_schedule()
        loop.opt.zero_grad()
        loss.backward()
        loop.opt.step()
        loop.step += 1
        if loop.step % cfg.log_every == 0:
            log.log(loop.step, {
                "recon": {"raw": float(loss_recon), "normalized": float(loss_recon)},
                "cycle": {"raw": float(loss_cycle), "normalized": float(loss_cycle)},
                "dice": {"raw": float(dice), "normalized": float(dice)},
            })
    _set_trainable(rt, set())
    return log


def train_e4e(rt: HairFastRuntime, data, cfg: TrainConfig,
              offset_lambda: float = 0.003, log: TrainLog | None = None) -> TrainLog:
    """Supervised inversion with the editability prior: offsets from the
    average latent are penalized toward zero."""
    log = log or TrainLog()
    _set_trainable(rt, {"e4e"})
    w_avg, _ = rt.generator.latent_avg()
    with torch.no_grad():
        rt.e4e.w_base.copy_(rt.generator.broadcast_w(w_avg))
    loop = TrainLoop({"e4e": rt.e4e}, cfg)
    for _ in range(cfg.steps):
        imgs, _, z = _batch(data, loop)
        with torch.no_grad():
            w_true = rt.generator.broadcast_w(rt.generator.map_latent(z))
        offsets = rt.e4e.offsets(imgs)
        w_pred = rt.e4e.w_base + offsets
        latent = F.mse_loss(w_pred, w_true)
        img = F.mse_loss(rt.generator.synthesize(w_pred), imgs)
        offset_pen = offsets.square().mean()
        loss = latent + img + offset_lambda * offset_pen
        loop.apply_lr_schedule()
        loop.opt.zero_grad()
        loss.backward()
        loop.opt.step()
        loop.step += 1
        if loop.step % cfg.log_every == 0:
            log.log(loop.step, {
                "latent": {"raw": float(latent), "normalized": float(latent)},
                "image": {"raw": float(img), "normalized": float(img)},
                "offsets": {"raw": float(offset_pen), "normalized": float(offset_lambda * offset_pen)},
            })
    _set_trainable(rt, set())
    return log


# -- the five spec procedures ---------------------------------------------------


def train_rotate(rt: HairFastRuntime, data: SyntheticFaces, cfg: TrainConfig | None = None,
                 log: TrainLog | None = None, resume_path=None, save_path=None) -> TrainLog:
    """Pose-rotation encoder: keypoint matching, cycle reconstruction and an
    identity guide, each normalized by its moving average."""
    cfg = cfg or default_rotate_config()
    log = log or TrainLog()
    _set_trainable(rt, {"rotate"})
    ema = EMANormalizer(t=cfg.ema_t)
    loop = TrainLoop({"rotate": rt.rotate}, cfg, ema=ema)
    if resume_path:
        loop.load_checkpoint(resume_path, rt.cfg.fingerprint())
    while loop.step < cfg.steps:
        img_src, _, _ = _batch(data, loop, stream=0)
        img_tgt, _, _ = _batch(data, loop, stream=1)
        with torch.no_grad():
            w_src = rt.e4e(img_src)
            w_tgt = rt.e4e(img_tgt)
            # keypoint/identity targets come from renders of the same
            # inversion chain: the toy stand-ins carry a render-vs-photo
            # domain gap a pretrained landmark model would not have
            kp_tgt = rt.perception.keypoints(rt.generator.synthesize(w_tgt))
            id_src = rt.perception.identity(rt.generator.synthesize(w_src))
        w_rot = rt.rotate(w_src, w_tgt)
        w_restore = rt.rotate(w_rot, w_src)
        img_rot = rt.generator.synthesize(w_rot)
        l_pose = loss_pose(rt.perception.keypoints, img_rot, kp_tgt)
        l_recon = loss_recon_latent(w_src, w_restore)
        l_id = cosine_embedding_distance(rt.perception.identity(img_rot), id_src)
        total, terms = ema.total({"pose": l_pose, "recon": l_recon, "id": l_id}, cfg.lambdas)
        loop.apply_lr_schedule()
        loop.opt.zero_grad()
        total.backward()
        loop.opt.step()
        loop.step += 1
        if loop.step % cfg.log_every == 0:
            log.log(loop.step, terms)
    if save_path:
        loop.save_checkpoint(save_path, rt.cfg.fingerprint())
    _set_trainable(rt, set())
    return log


def heldout_pose_loss(rt: HairFastRuntime, data: SyntheticFaces, n_pairs: int = 32,
                      seed: int = 97, use_rotate: bool = True) -> float:
    """Mean keypoint loss of rotated renders against rendered-target
    keypoints (the training objective's domain)."""
    rng = np.random.default_rng(seed)
    total = 0.0
    with torch.no_grad():
        for _ in range(n_pairs):
            i, j = int(rng.integers(len(data))), int(rng.integers(len(data)))
            w_src = rt.e4e(data.images[i])
            w_tgt = rt.e4e(data.images[j])
            w_rot = rt.rotate(w_src, w_tgt) if use_rotate else w_src
            img = rt.generator.synthesize(w_rot)
            kp_tgt = rt.perception.keypoints(rt.generator.synthesize(w_tgt))
            total += float(loss_pose(rt.perception.keypoints, img, kp_tgt))
    return total / n_pairs


def build_color_pairs(rt: HairFastRuntime, data: SyntheticFaces, n_triples: int,
                      seed: int = 31, hairless_threshold: float = 0.01) -> list[dict]:
    """Color-training corpus: each triple yields up to two items, the face's
    features re-shaped by the shape donor and by the color donor. Color
    references without hair are discarded."""
    rng = np.random.default_rng(seed)
    pairs = []
    with torch.no_grad():
        for _ in range(n_triples):
            i_face = int(rng.integers(len(data)))
            i_shape = int(rng.integers(len(data)))
            i_color = int(rng.integers(len(data)))
            face, color = data.images[i_face], data.images[i_color]
            m_color = rt.segment(color)
            h_color = hair_mask(m_color)
            if float(h_color.values.mean()) < hairless_threshold:
                continue
            m_face = rt.segment(face)
            h_source = hair_mask(m_face)
            w_face = rt.e4e(face)
            f_mix_face, s_source, h_src_edit = mix_fs(rt, face, seg=m_face, w=w_face)
            _, s_color = rt.fs16(color)
            for donor_idx in (i_shape, i_color):
                donor = data.images[donor_idx]
                m_donor = rt.segment(donor)
                m_align, h_align_full, _ = pose_align(rt, face, donor, w_source=w_face, m_source=m_face)
                f_mix_donor, _, h_donor_edit = mix_fs(rt, donor, seg=m_donor)
                f_inp_face = inpaint_f(rt, face, m_face, m_align)
                f_inp_donor = inpaint_f(rt, donor, m_donor, m_align)
                h_align_edit = downsample_mask(h_align_full, rt.f_edit_res)
                f_align = compose_f(f_mix_face, f_mix_donor, f_inp_face, f_inp_donor,
                                    h_align_edit, h_src_edit, h_donor_edit)
                # hair region of the aligned features, from a neutral render
                render = rt.generator.resume_from(f_align, s_source, rt.cfg.f_edit_block)
                h_align = hair_mask(rt.segment(render))
                m_target = (1.0 - h_source.values) * (1.0 - h_align.values)
                pairs.append({
                    "face_idx": i_face, "color_idx": i_color,
                    "f_align": f_align.data, "s_source": s_source, "s_color": s_color,
                    "h_align": h_align.values, "h_color": h_color.values,
                    "h_source": h_source.values, "m_target": m_target,
                })
    return pairs


def train_color(rt: HairFastRuntime, pairs: list[dict], cfg: TrainConfig | None = None,
                data: SyntheticFaces | None = None, log: TrainLog | None = None,
                resume_path=None, save_path=None) -> TrainLog:
    """Blend-encoder training on the pair corpus: pull the hair-region
    embedding toward the reference, keep the face region put."""
    cfg = cfg or default_color_config()
    log = log or TrainLog()
    if data is None:
        raise ValueError("train_color needs the dataset the pairs reference")
    _set_trainable(rt, {"blend"})
    loop = TrainLoop({"blend": rt.blend}, cfg)
    if resume_path:
        loop.load_checkpoint(resume_path, rt.cfg.fingerprint())
    clip = rt.perception.clip
    block = rt.cfg.f_edit_block
    while loop.step < cfg.steps:
        idx = loop.batch_indices(len(pairs))
        batch = [pairs[i] for i in idx.tolist()]
        faces = torch.stack([data.images[p["face_idx"]] for p in batch])
        colors = torch.stack([data.images[p["color_idx"]] for p in batch])
        f_align = torch.stack([p["f_align"] for p in batch])
        s_source = torch.stack([p["s_source"] for p in batch])
        s_color = torch.stack([p["s_color"] for p in batch])
        h_align = torch.stack([p["h_align"] for p in batch])
        h_color = torch.stack([p["h_color"] for p in batch])
        m_target = torch.stack([p["m_target"] for p in batch])
        emb_face = clip(faces * m_target[:, None])
        emb_hair = clip(colors * h_color[:, None])
        s_blend = rt.blend(s_source, s_color, emb_face, emb_hair)
        i_blend = rt.generator.resume_from(FTensor(f_align, block), s_blend, block)
        l_color = loss_clip_region(clip, i_blend, colors, h_align, h_color)
        l_face = loss_clip_region(clip, i_blend, faces, m_target, m_target)
        total = cfg.lambdas["color"] * l_color + cfg.lambdas["face"] * l_face
        loop.apply_lr_schedule()
        loop.opt.zero_grad()
        total.backward()
        loop.opt.step()
        loop.step += 1
        if loop.step % cfg.log_every == 0:
            log.log(loop.step, {
                "color": {"raw": float(l_color), "normalized": float(cfg.lambdas["color"] * l_color)},
                "face": {"raw": float(l_face), "normalized": float(cfg.lambdas["face"] * l_face)},
            })
    if save_path:
        loop.save_checkpoint(save_path, rt.cfg.fingerprint())
    _set_trainable(rt, set())
    return log


def train_fs_encoder(rt: HairFastRuntime, data: SyntheticFaces, cfg: TrainConfig | None = None,
                     variant: str = "refine64", log: TrainLog | None = None,
                     resume_path=None, save_path=None) -> TrainLog:
    """Reconstruction-first encoder with the style-anchor blend: the F
    contribution ramps from zero (pure style features) to one over the
    first half of training."""
    cfg = cfg or default_fs_config()
    log = log or TrainLog()
    name = "fs16" if variant == "edit16" else "fs64"
    fs = rt.fs16 if variant == "edit16" else rt.fs64
    use_adv = cfg.lambdas.get("adv", 0.0) > 0 and cfg.disc_lr > 0
    _set_trainable(rt, {name} | ({"disc"} if use_adv else set()))
    loop = TrainLoop({name: fs}, cfg, disc=rt.discriminator if use_adv else None)
    if resume_path:
        loop.load_checkpoint(resume_path, rt.cfg.fingerprint())
    ramp_steps = max(1, int(cfg.steps * cfg.alpha_ramp_frac))
    while loop.step < cfg.steps:
        alpha = min(1.0, loop.step / ramp_steps)
        imgs, _, _ = _batch(data, loop)
        f, s = fs(imgs)
        f_style = rt.generator.style_only_features(s, fs.f_block)
        f_recon = FTensor(alpha * f.data + (1.0 - alpha) * f_style.data, fs.f_block)
        i_style = rt.generator.resume_from(f_style, s, fs.f_block)
        i_recon = rt.generator.resume_from(f_recon, s, fs.f_block)
        l_id = (loss_id(rt.perception.identity, imgs, i_style)
                + loss_id(rt.perception.identity, imgs, i_recon))
        l_per = (loss_mlpips(rt.perception.pyramid, imgs, i_style)
                 + loss_mlpips(rt.perception.pyramid, imgs, i_recon))
        l_feat = F.mse_loss(f.data, f_style.data.detach())
        losses = {"id": l_id, "mlpips": l_per, "recon_feat": l_feat}
        if use_adv:
            g_loss, _, _ = loss_adv(torch.zeros(()), rt.discriminator(i_recon))
            losses["adv"] = g_loss
        total = sum(cfg.lambdas.get(k, 0.0) * v for k, v in losses.items())
        loop.apply_lr_schedule()
        loop.opt.zero_grad()
        total.backward()
        loop.opt.step()
        if use_adv:
            reals = imgs.detach().requires_grad_(True)
            d_real = rt.discriminator(reals)
            _, d_loss, r1 = loss_adv(d_real, rt.discriminator(i_recon.detach()), reals)
            loop.disc_opt.zero_grad()
            (d_loss + cfg.r1_gamma * r1).backward()
            loop.disc_opt.step()
            losses["disc"] = d_loss
        loop.step += 1
        if loop.step % cfg.log_every == 0:
            log.log(loop.step, {
                k: {"raw": float(v), "normalized": float(cfg.lambdas.get(k, 1.0) * v)}
                for k, v in losses.items()
            })
    if save_path:
        loop.save_checkpoint(save_path, rt.cfg.fingerprint())
    _set_trainable(rt, set())
    return log


def build_refine_pairs(rt: HairFastRuntime, data: SyntheticFaces, n_pairs: int,
                       seed: int = 41) -> list[dict]:
    """(i_blend, i_source) corpus: the pipeline run through color alignment
    on random triples, with the region fields refinement training needs."""
    rng = np.random.default_rng(seed)
    radius = scaled_radius(25, rt.cfg.output_resolution)
    out = []
    while len(out) < n_pairs:
        i_face = int(rng.integers(len(data)))
        i_shape = int(rng.integers(len(data)))
        i_color = int(rng.integers(len(data)))
        req = TransferRequest(face=data.images[i_face], shape=data.images[i_shape],
                              color=data.images[i_color], mode="full")
        _, art = transfer(rt, req)
        i_blend = art.i_blend.detach()
        h_source = hair_mask(rt.segment(data.images[i_face]))
        h_blend = hair_mask(rt.segment(i_blend))
        m_target, m_inpaint, m_smooth, m_hard = refinement_masks(h_source, h_blend, radius)
        out.append({
            "face_idx": i_face, "i_blend": i_blend,
            "h_blend": h_blend.values, "m_target": m_target.values,
            "m_smooth": m_smooth.values, "m_hard": m_hard.values,
        })
    return out


def train_fusers(rt: HairFastRuntime, pairs: list[dict], data: SyntheticFaces,
                 cfg: TrainConfig | None = None, include_fs: bool = False,
                 log: TrainLog | None = None, resume_path=None, save_path=None) -> TrainLog:
    """Refinement fusers: restore source regions, keep the recolored hair,
    follow the style-space render inside inpaint regions, adversarial on
    the final image."""
    cfg = cfg or default_fuser_config()
    log = log or TrainLog()
    use_adv = cfg.lambdas.get("adv", 0.0) > 0 and cfg.disc_lr > 0
    trainables = {"fusef", "fuses"} | ({"fs64"} if include_fs else set()) | ({"disc"} if use_adv else set())
    _set_trainable(rt, trainables)
    modules = {"fusef": rt.fuse_f, "fuses": rt.fuse_s}
    if include_fs:
        modules["fs64"] = rt.fs64
    loop = TrainLoop(modules, cfg, disc=rt.discriminator if use_adv else None)
    if resume_path:
        loop.load_checkpoint(resume_path, rt.cfg.fingerprint())
    _, s_avg = rt.generator.latent_avg()
    block = rt.cfg.f_refine_block
    while loop.step < cfg.steps:
        idx = loop.batch_indices(len(pairs))
        batch = [pairs[i] for i in idx.tolist()]
        i_source = torch.stack([data.images[p["face_idx"]] for p in batch])
        i_blend = torch.stack([p["i_blend"] for p in batch])
        m_target = torch.stack([p["m_target"] for p in batch])
        h_blend = torch.stack([p["h_blend"] for p in batch])
        m_smooth = torch.stack([p["m_smooth"] for p in batch])
        m_hard = torch.stack([p["m_hard"] for p in batch])
        f64_b, s_b = rt.fs64(i_blend)
        f64_s, s_s = rt.fs64(i_source)
        f_final = rt.fuse_f(f64_b, f64_s)
        s_final = s_avg + rt.fuse_s(s_b, s_s)
        f_style = rt.generator.style_only_features(s_final, block)
        i_style = rt.generator.resume_from(f_style, s_final, block)
        i_final = rt.generator.resume_from(f_final, s_final, block)
        mt = m_target[:, None]
        hb = h_blend[:, None]
        l_id = (loss_id(rt.perception.identity, i_source * mt, i_style * mt)
                + loss_id(rt.perception.identity, i_source * mt, i_final * mt))
        l_per = (loss_mlpips(rt.perception.pyramid, i_source * mt, i_style * mt)
                 + loss_mlpips(rt.perception.pyramid, i_source * mt, i_final * mt)
                 + loss_mlpips(rt.perception.pyramid, i_blend * hb, i_style * hb)
                 + loss_mlpips(rt.perception.pyramid, i_blend * hb, i_final * hb))
        l_feat = F.mse_loss(f_final.data, f_style.data.detach())
        seg_ref = F.softmax(rt.segmenter.logits(i_blend), dim=1).detach()
        seg_pred = F.softmax(rt.segmenter.logits(i_final), dim=1)
        l_dsc = loss_dsc(seg_pred, seg_ref, gamma=cfg.dsc_gamma)
        l_inp = (loss_mlpips(rt.perception.pyramid, i_style * m_hard[:, None], i_final * m_hard[:, None])
                 + loss_mlpips(rt.perception.pyramid, i_blend * m_smooth[:, None], i_final * m_smooth[:, None]))
        losses = {"id": l_id, "mlpips": l_per, "recon_feat": l_feat, "dsc": l_dsc, "inpaint": l_inp}
        if use_adv:
            g_loss, _, _ = loss_adv(torch.zeros(()), rt.discriminator(i_final))
            losses["adv"] = g_loss
        total = sum(cfg.lambdas.get(k, 0.0) * v for k, v in losses.items())
        loop.apply_lr_schedule()
        loop.opt.zero_grad()
        total.backward()
        loop.opt.step()
        if use_adv:
            reals = i_source.detach().requires_grad_(True)
            d_real = rt.discriminator(reals)
            _, d_loss, r1 = loss_adv(d_real, rt.discriminator(i_final.detach()), reals)
            loop.disc_opt.zero_grad()
            (d_loss + cfg.r1_gamma * r1).backward()
            loop.disc_opt.step()
            losses["disc"] = d_loss
        loop.step += 1
        if loop.step % cfg.log_every == 0:
            log.log(loop.step, {
                k: {"raw": float(v), "normalized": float(cfg.lambdas.get(k, 1.0) * v)}
                for k, v in losses.items()
            })
    if save_path:
        loop.save_checkpoint(save_path, rt.cfg.fingerprint())
    _set_trainable(rt, set())
    return log


def finetune_all(rt: HairFastRuntime, pairs: list[dict], data: SyntheticFaces,
                 fuser_cfg: TrainConfig | None = None, log: TrainLog | None = None,
                 resume_path=None, save_path=None) -> TrainLog:
    """Unfreeze the feature-style encoder and retrain the refinement stack
    with the same parameters at half the learning rate."""
    cfg = finetune_config(fuser_cfg)
    return train_fusers(rt, pairs, data, cfg, include_fs=True, log=log,
                        resume_path=resume_path, save_path=save_path)
