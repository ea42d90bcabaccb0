"""Evaluation suite: Frechet feature distances, perceptual/pixel metrics,
pose-difference folds, the HSV histogram-divergence color metric, the
reconstruction protocol and the batch experiment runner."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import scaled_radius
from .errors import NumericalError
from .masks import SoftMask, erode, hair_mask
from .perception import ImageEmbedder
from .pipeline import HairFastRuntime, TransferRequest, transfer

HSV_BINS = 500


# -- feature statistics -------------------------------------------------------


class FeatureStats:
    """Streaming mean/covariance accumulator; shards merge exactly."""

    def __init__(self, dim: int):
        self.dim = dim
        self.count = 0
        self.mean = np.zeros(dim, dtype=np.float64)
        self.m2 = np.zeros((dim, dim), dtype=np.float64)

    def add_batch(self, feats: np.ndarray):
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats[None]
        n_b = feats.shape[0]
        if n_b == 0:
            return self
        mean_b = feats.mean(axis=0)
        dev = feats - mean_b
        m2_b = dev.T @ dev
        self._merge(n_b, mean_b, m2_b)
        return self

    def merge(self, other: "FeatureStats"):
        self._merge(other.count, other.mean, other.m2)
        return self

    def _merge(self, n_b: int, mean_b: np.ndarray, m2_b: np.ndarray):
        if n_b == 0:
            return
        n_a = self.count
        delta = mean_b - self.mean
        n = n_a + n_b
        self.mean = self.mean + delta * (n_b / n)
        self.m2 = self.m2 + m2_b + np.outer(delta, delta) * (n_a * n_b / n)
        self.count = n

    @property
    def cov(self) -> np.ndarray:
        if self.count < 2:
            raise NumericalError("need at least 2 samples for a covariance")
        return self.m2 / (self.count - 1)


def _stats_from_arrays(feats: np.ndarray) -> FeatureStats:
    st = FeatureStats(feats.shape[-1])
    return st.add_batch(feats)


def fid(a: FeatureStats, b: FeatureStats) -> float:
    """Frechet distance between two Gaussian feature fits.

    The matrix square root uses a symmetric eigendecomposition of
    sqrt(Sb) Sa sqrt(Sb) with eigenvalue clipping at zero; severe
    non-PSD products raise instead of being silently clipped.
    """
    if a.dim != b.dim:
        raise NumericalError(f"feature dims differ: {a.dim} vs {b.dim}")
    mu_a, mu_b = a.mean, b.mean
    sig_a, sig_b = a.cov, b.cov
    eb, ub = np.linalg.eigh((sig_b + sig_b.T) / 2.0)
    sqrt_b = (ub * np.sqrt(np.clip(eb, 0.0, None))) @ ub.T
    m = sqrt_b @ ((sig_a + sig_a.T) / 2.0) @ sqrt_b
    em = np.linalg.eigvalsh((m + m.T) / 2.0)
    floor = -1e-5 * max(1.0, float(em.max(initial=0.0)))
    if em.min(initial=0.0) < floor:
        raise NumericalError(
            f"product matrix is not PSD within tolerance: min eigenvalue {em.min():.3e}"
        )
    tr_sqrt = np.sqrt(np.clip(em, 0.0, None)).sum()
    value = float(np.sum((mu_a - mu_b) ** 2) + np.trace(sig_a) + np.trace(sig_b) - 2.0 * tr_sqrt)
    return max(value, 0.0) if value > -1e-8 else value


def default_fid_extractor(embed_dim: int = 64) -> ImageEmbedder:
    """Deterministic stand-in for the realism feature extractor."""
    return ImageEmbedder(embed_dim, seed=505)


# -- pixel / perceptual metrics -----------------------------------------------

PSNR_CAP = 99.0


def psnr(a: torch.Tensor, b: torch.Tensor, data_range: float = 2.0) -> float:
    mse = float((a.double() - b.double()).square().mean())
    if mse <= 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(data_range**2 / mse), PSNR_CAP)


def iou(m1: SoftMask, m2: SoftMask) -> float:
    a = m1.values > 0.5
    b = m2.values > 0.5
    union = float((a | b).sum())
    if union == 0:
        return 1.0
    return float((a & b).sum()) / union


def lpips_like(pyramid, a: torch.Tensor, b: torch.Tensor) -> float:
    f1, f2 = pyramid(a), pyramid(b)
    return float(torch.stack([(x - y).square().mean() for x, y in zip(f1, f2)]).mean())


# -- pose folds ---------------------------------------------------------------


def keypoint_rmse(kp_a: torch.Tensor, kp_b: torch.Tensor, use_mae: bool = False) -> float:
    d = kp_a.double() - kp_b.double()
    if use_mae:
        return float(d.abs().mean())
    return float(d.square().mean().sqrt())


def pose_folds(keypoints, pairs, use_mae: bool = False) -> list[str]:
    """Tertile split of (face, shape) pairs by keypoint distance; ties keep
    input order. Fold sizes differ by at most one."""
    values = [keypoint_rmse(keypoints(a), keypoints(b), use_mae) for a, b in pairs]
    order = np.argsort(np.asarray(values), kind="stable")
    n = len(values)
    sizes = [n // 3 + (1 if i < n % 3 else 0) for i in range(3)]
    labels = [""] * n
    names = ("easy", "medium", "hard")
    pos = 0
    for fold, size in enumerate(sizes):
        for idx in order[pos : pos + size]:
            labels[idx] = names[fold]
        pos += size
    return labels


# -- HSV Jensen-Shannon color metric ------------------------------------------


def rgb_to_hsv(img: torch.Tensor) -> torch.Tensor:
    """[-1,1] RGB -> hexcone HSV with H in [0,360), S,V in [0,1]."""
    rgb = ((img.double() + 1.0) / 2.0).clamp(0.0, 1.0)
    r, g, b = rgb[0], rgb[1], rgb[2]
    v, _ = rgb.max(dim=0)
    mn, _ = rgb.min(dim=0)
    c = v - mn
    s = torch.where(v > 0, c / v.clamp(min=1e-12), torch.zeros_like(v))
    h = torch.zeros_like(v)
    nz = c > 0
    rmax = nz & (v == r)
    gmax = nz & (v == g) & ~rmax
    bmax = nz & ~rmax & ~gmax
    h[rmax] = ((g - b)[rmax] / c[rmax]) % 6.0
    h[gmax] = (b - r)[gmax] / c[gmax] + 2.0
    h[bmax] = (r - g)[bmax] / c[bmax] + 4.0
    return torch.stack([h * 60.0, s, v])


def js_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Base-2 Jensen-Shannon divergence of two normalized histograms."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    m = (p + q) / 2.0

    def kl(x, y):
        sel = x > 0
        return float((x[sel] * np.log2(x[sel] / y[sel])).sum())

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


@dataclass
class HSVHistograms:
    hue: np.ndarray
    sat: np.ndarray
    val: np.ndarray
    empty: bool


def hsv_histograms(img: torch.Tensor, mask: SoftMask, erode_radius: int) -> HSVHistograms:
    eroded = erode(mask, erode_radius)
    sel = eroded.values > 0.5
    if not bool(sel.any()):
        return HSVHistograms(np.zeros(HSV_BINS), np.zeros(HSV_BINS), np.zeros(HSV_BINS), empty=True)
    hsv = rgb_to_hsv(img)
    pixels = hsv[:, sel].numpy()
    hists = []
    for channel, hi in ((0, 360.0), (1, 1.0), (2, 1.0)):
        hist, _ = np.histogram(pixels[channel], bins=HSV_BINS, range=(0.0, hi))
        hist = hist.astype(np.float64)
        hists.append(hist / hist.sum())
    return HSVHistograms(*hists, empty=False)


@dataclass
class HSVJSResult:
    defined: bool
    js_h: float = float("nan")
    js_s: float = float("nan")
    js_v: float = float("nan")


def hsv_js_color_metric(i_result: torch.Tensor, h_result: SoftMask, i_ref: torch.Tensor,
                        h_ref: SoftMask, erode_radius: int | None = None) -> HSVJSResult:
    """Per-channel divergence of hair-pixel HSV histograms; hair masks are
    eroded first. Empty eroded masks flag the metric undefined."""
    if erode_radius is None:
        erode_radius = scaled_radius(5, h_result.values.shape[-1])
    hist_a = hsv_histograms(i_result, h_result, erode_radius)
    hist_b = hsv_histograms(i_ref, h_ref, erode_radius)
    if hist_a.empty or hist_b.empty:
        return HSVJSResult(defined=False)
    return HSVJSResult(
        defined=True,
        js_h=js_divergence(hist_a.hue, hist_b.hue),
        js_s=js_divergence(hist_a.sat, hist_b.sat),
        js_v=js_divergence(hist_a.val, hist_b.val),
    )


# -- reports and protocols ----------------------------------------------------

CSV_COLUMNS = ["index", "case", "fold", "lpips", "psnr", "iou",
               "hsv_js_h", "hsv_js_s", "hsv_js_v", "time_s"]


@dataclass
class MetricsReport:
    case: str
    rows: list[dict] = field(default_factory=list)
    aggregates: dict[str, float] = field(default_factory=dict)

    def write_csv(self, path):
        with open(Path(path), "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS, extrasaction="ignore")
            writer.writeheader()
            for row in self.rows:
                writer.writerow(row)

    def write_json(self, path):
        Path(path).write_text(json.dumps({"case": self.case, "aggregates": self.aggregates,
                                          "rows": self.rows}, indent=2))


_CASE_TO_MODE = {"full": "full", "both": "both", "shape": "shape_only", "color": "color_only"}


def _experiment_indices(case: str, n_items: int, n: int, rng: np.random.Generator):
    for _ in range(n):
        face = int(rng.integers(n_items))
        other = int(rng.integers(n_items))
        third = int(rng.integers(n_items))
        if case == "full":
            yield face, other, third
        elif case in ("both", "shape"):
            yield face, other, None
        else:  # color
            yield face, None, other


def run_experiments(rt: HairFastRuntime, dataset, case: str, n: int,
                    metric_names=("fid", "fidclip", "lpips", "psnr", "iou", "hsvjs"),
                    seed: int = 0, fid_extractor=None) -> MetricsReport:
    """Run ``n`` transfers of the given case over a dataset and collect the
    metric suite. Timing is the per-request compute time (stage timings
    only; image I/O never enters)."""
    if case not in _CASE_TO_MODE:
        raise ValueError(f"unknown case {case!r}")
    mode = _CASE_TO_MODE[case]
    rng = np.random.default_rng(seed)
    fid_extractor = fid_extractor or default_fid_extractor(rt.cfg.embed_dim)
    stats_orig = FeatureStats(rt.cfg.embed_dim)
    stats_edit = FeatureStats(rt.cfg.embed_dim)
    stats_orig_clip = FeatureStats(rt.cfg.embed_dim)
    stats_edit_clip = FeatureStats(rt.cfg.embed_dim)
    report = MetricsReport(case=case)
    durations = []
    pose_pairs = []
    for idx, (i_face, i_shape, i_color) in enumerate(_experiment_indices(case, len(dataset), n, rng)):
        face = dataset.images[i_face]
        shape = dataset.images[i_shape] if i_shape is not None else None
        color = dataset.images[i_color] if i_color is not None else None
        req = TransferRequest(face=face, shape=shape, color=color, mode=mode)
        result, art = transfer(rt, req)
        duration = sum(art.timings.values())
        durations.append(duration)
        row = {"index": idx, "case": case, "fold": ""}
        with torch.no_grad():
            if "fid" in metric_names:
                stats_orig.add_batch(fid_extractor(face).numpy())
                stats_edit.add_batch(fid_extractor(result).numpy())
            if "fidclip" in metric_names:
                stats_orig_clip.add_batch(rt.perception.clip(face).numpy())
                stats_edit_clip.add_batch(rt.perception.clip(result).numpy())
            if "lpips" in metric_names:
                row["lpips"] = lpips_like(rt.perception.pyramid, result, face)
            if "psnr" in metric_names:
                row["psnr"] = psnr(result, face)
            if "iou" in metric_names:
                target_hair = art.h_align if art.h_align is not None else art.h_source
                row["iou"] = iou(hair_mask(rt.segment(result)), target_hair)
            if "hsvjs" in metric_names:
                ref_img = color if color is not None else (shape if shape is not None else face)
                ref_mask = art.h_color if art.h_color is not None else art.h_source
                res_hair = hair_mask(rt.segment(result))
                js = hsv_js_color_metric(result, res_hair, ref_img, ref_mask)
                if js.defined:
                    row.update({"hsv_js_h": js.js_h, "hsv_js_s": js.js_s, "hsv_js_v": js.js_v})
        row["time_s"] = duration
        report.rows.append(row)
        if shape is not None:
            pose_pairs.append((face, shape))
    if pose_pairs:
        labels = pose_folds(rt.perception.keypoints, pose_pairs)
        for row, label in zip(report.rows, labels):
            row["fold"] = label
    report.aggregates["median_time_s"] = float(np.median(durations)) if durations else 0.0
    if "fid" in metric_names and stats_orig.count >= 2:
        report.aggregates["fid"] = fid(stats_orig, stats_edit)
    if "fidclip" in metric_names and stats_orig_clip.count >= 2:
        report.aggregates["fid_clip"] = fid(stats_orig_clip, stats_edit_clip)
    for name in ("lpips", "psnr", "iou"):
        vals = [row[name] for row in report.rows if name in row]
        if vals:
            report.aggregates[f"mean_{name}"] = float(np.mean(vals))
    for name in ("hsv_js_h", "hsv_js_s", "hsv_js_v"):
        vals = [row[name] for row in report.rows if name in row]
        if vals:
            report.aggregates[f"mean_{name}"] = float(np.mean(vals))
    return report


def reconstruction_protocol(rt: HairFastRuntime, dataset, n: int | None = None,
                            seed: int = 0) -> MetricsReport:
    """Self-transfer (shape and color from the image itself); measures how
    much of the original the pipeline returns."""
    n = len(dataset) if n is None else min(n, len(dataset))
    fid_extractor = default_fid_extractor(rt.cfg.embed_dim)
    stats_orig = FeatureStats(rt.cfg.embed_dim)
    stats_edit = FeatureStats(rt.cfg.embed_dim)
    report = MetricsReport(case="reconstruction")
    for idx in range(n):
        face = dataset.images[idx]
        result, art = transfer(rt, TransferRequest(face=face, shape=face, mode="both"))
        with torch.no_grad():
            stats_orig.add_batch(fid_extractor(face).numpy())
            stats_edit.add_batch(fid_extractor(result).numpy())
            report.rows.append({
                "index": idx, "case": "reconstruction", "fold": "",
                "lpips": lpips_like(rt.perception.pyramid, result, face),
                "psnr": psnr(result, face),
                "iou": iou(hair_mask(rt.segment(result)), hair_mask(rt.segment(face))),
                "time_s": sum(art.timings.values()),
            })
    report.aggregates["mean_lpips"] = float(np.mean([r["lpips"] for r in report.rows]))
    report.aggregates["mean_psnr"] = float(np.mean([r["psnr"] for r in report.rows]))
    report.aggregates["median_time_s"] = float(np.median([r["time_s"] for r in report.rows]))
    if stats_orig.count >= 2:
        report.aggregates["fid"] = fid(stats_orig, stats_edit)
    return report


def write_scatter_csv(path, points: list[dict]):
    """Realism-versus-time scatter rows: label, fid, median_time_s."""
    with open(Path(path), "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["label", "fid", "median_time_s"])
        writer.writeheader()
        for p in points:
            writer.writerow(p)
