"""Loss library and the moving-average loss normalizer.

All reductions are means so the weights transfer across desk-scale
dimensions; every loss is zero on its identity case and differentiable.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)

EMA_FLOOR = 1e-8


def _masked(img: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    if mask.dim() == img.dim() - 1:
        mask = mask.unsqueeze(-3)
    return img * mask


def cosine_embedding_distance(e1: torch.Tensor, e2: torch.Tensor) -> torch.Tensor:
    # clamp: float noise can push the cosine of identical vectors past 1
    return (1.0 - F.cosine_similarity(e1, e2, dim=-1).mean()).clamp_min(0.0)


def loss_clip_region(embedder, i1, i2, m1, m2) -> torch.Tensor:
    """1 - cosine similarity of the embeddings of two masked images."""
    return cosine_embedding_distance(embedder(_masked(i1, m1)), embedder(_masked(i2, m2)))


def loss_pose(keypoints, img, target_kp) -> torch.Tensor:
    """Mean squared keypoint error against a target landmark set."""
    return (keypoints(img) - target_kp).square().mean()


def loss_recon_latent(w_a: torch.Tensor, w_b: torch.Tensor) -> torch.Tensor:
    return (w_a - w_b).square().mean()


def loss_id(id_embedder, i1, i2) -> torch.Tensor:
    return cosine_embedding_distance(id_embedder(i1), id_embedder(i2))


def loss_mlpips(pyramid, i1, i2) -> torch.Tensor:
    """Multi-scale feature distance; mean of per-scale feature MSEs."""
    f1, f2 = pyramid(i1), pyramid(i2)
    return torch.stack([(a - b).square().mean() for a, b in zip(f1, f2)]).mean()


def loss_dsc(probs_pred: torch.Tensor, probs_ref: torch.Tensor, gamma: float = 2.0, eps: float = 1e-6) -> torch.Tensor:
    """Calibrated soft Dice over class-probability maps.

    False positives/negatives are focally weighted with exponent ``gamma``
    before entering the Dice denominator; averaged over classes.
    """
    if probs_pred.shape != probs_ref.shape:
        raise ValueError("probability maps must share a shape")
    dims = tuple(range(probs_pred.dim()))[-2:]
    tp = (probs_pred * probs_ref).sum(dim=dims)
    fn = (probs_ref * (1.0 - probs_pred) ** gamma).sum(dim=dims)
    fp = ((1.0 - probs_ref) * probs_pred**gamma).sum(dim=dims)
    dice = (2.0 * tp + eps) / (2.0 * tp + fn + fp + eps)
    return (1.0 - dice).mean()


def loss_adv(d_out_real, d_out_fake, real_input=None):
    """Non-saturating logistic GAN losses and the R1 gradient penalty.

    Returns (generator loss, discriminator loss, r1). R1 is computed only
    when ``real_input`` is supplied and part of the graph of ``d_out_real``.
    """
    g_loss = F.softplus(-d_out_fake).mean()
    d_loss = F.softplus(-d_out_real).mean() + F.softplus(d_out_fake).mean()
    r1 = torch.zeros(())
    if real_input is not None and d_out_real.requires_grad:
        (grad,) = torch.autograd.grad(
            d_out_real.sum(), real_input, create_graph=True, allow_unused=True
        )
        if grad is not None:
            r1 = 0.5 * grad.square().flatten(1 if grad.dim() > 3 else 0).sum(-1).mean()
    return g_loss, d_loss, r1


@dataclass
class EMAState:
    value: float = 0.0
    initialized: bool = False


@dataclass
class EMANormalizer:
    """Normalizes each weighted loss by its exponential moving average so
    relative priorities hold through training.

    The average is updated first with the gradient-detached loss value
    (seeded with the first observation), then divides the raw loss; a
    constant stream therefore contributes exactly its weight every step.

    A loss that is identically zero so far leaves its average uninitialized
    (floored when dividing) so that the first nonzero observation still
    normalizes to exactly its weight; without this, residual encoders that
    start as identities would see their cycle losses blown up by the floor.
    """

    t: float = 0.02
    states: dict[str, EMAState] = field(default_factory=dict)

    def state_tensors(self, prefix: str = "ema"):
        import numpy as np

        out = {}
        for name, st in self.states.items():
            out[f"{prefix}/{name}"] = np.asarray([st.value, 1.0 if st.initialized else 0.0])
        return out

    def load_state_tensors(self, tensors, prefix: str = "ema"):
        self.states.clear()
        for name, arr in tensors.items():
            if name.startswith(prefix + "/"):
                self.states[name[len(prefix) + 1 :]] = EMAState(float(arr[0]), bool(arr[1]))

    def total(self, losses: dict[str, torch.Tensor], lambdas: dict[str, float]):
        terms = {}
        total = None
        for name, raw in losses.items():
            lam = lambdas.get(name, 1.0)
            value = float(raw.detach())
            if not (value == value) or value == float("inf"):
                raise ValueError(f"loss {name!r} is not finite: {value}")
            st = self.states.setdefault(name, EMAState())
            if not st.initialized:
                if abs(value) > 1e-12:
                    st.value = value
                    st.initialized = True
            else:
                st.value = (1.0 - self.t) * st.value + self.t * value
            ema = st.value
            if ema < EMA_FLOOR:
                if st.initialized:
                    log.warning("loss %r has a vanishing moving average; flooring at %g",
                                name, EMA_FLOOR)
                ema = EMA_FLOOR
            term = lam * raw / ema
            terms[name] = {"raw": value, "ema": ema, "normalized": float(term.detach())}
            total = term if total is None else total + term
        if total is None:
            total = torch.zeros(())
        return total, terms
