"""Fusion quality metrics: EN, MI, VIF, Qabf, SSIM and the composite reward.

MI, VIF and SSIM are reported as the sum over both sources; EN is computed
on the fused image alone and Qabf is a joint score. Histogram metrics use
8-bit quantised luminance; SSIM, VIF and Qabf use float luminance scaled to
[0, 255].
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .image import SourcePair, luminance, quantize

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
VIF_SIGMA_NSQ = 2.0
VIF_SCALES = 4
VIF_EPS = 1e-10

REWARD_WEIGHTS = {"vif": 1.0, "qabf": 1.5, "ssim": 1.0}

METRIC_COLUMNS = ["EN", "MI", "VIF", "Qabf", "SSIM"]


def parameterization() -> dict:
    """Local metric settings, written next to every metrics report."""
    return {
        "EN": {"bins": 256, "log_base": 2, "input": "8-bit fused luminance"},
        "MI": {"bins": 256, "log_base": 2, "summed_over_sources": True},
        "VIF": {
            "variant": "multi-scale pixel domain",
            "scales": VIF_SCALES,
            "sigma_nsq": VIF_SIGMA_NSQ,
            "data_range": 255,
            "summed_over_sources": True,
        },
        "Qabf": {
            "Tg": _kernels.QABF_TG,
            "kg": _kernels.QABF_KG,
            "Dg": _kernels.QABF_DG,
            "Ta": _kernels.QABF_TA,
            "ka": _kernels.QABF_KA,
            "Da": _kernels.QABF_DA,
            "L": _kernels.QABF_L,
            "edge_operator": "Sobel 3x3, zero border",
        },
        "SSIM": {
            "window": SSIM_WINDOW,
            "sigma": SSIM_SIGMA,
            "K1": SSIM_K1,
            "K2": SSIM_K2,
            "borders": "valid",
            "summed_over_sources": True,
        },
        "reward": "(VIF + 1.5*Qabf + SSIM) / 3",
        "kernel_backend": _kernels.get_backend(),
    }


@dataclass
class MetricReport:
    en: float
    mi_total: float
    vif_total: float
    qabf: float
    ssim_total: float
    reward: float
    vif_scales: int = VIF_SCALES
    extras: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {
            "EN": self.en,
            "MI": self.mi_total,
            "VIF": self.vif_total,
            "Qabf": self.qabf,
            "SSIM": self.ssim_total,
            "reward": self.reward,
        }


def _plane(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        if x.shape[0] != 1:
            raise ValueError(f"expected a single-channel plane, got {x.shape}")
        x = x[0]
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D plane, got {x.shape}")
    return x


def _check_same(*planes):
    shapes = {p.shape for p in planes}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def to_uint8(x) -> np.ndarray:
    """Quantise a [0, 1] plane to 256 levels (already-integer uint8 passes through)."""
    x = np.asarray(x)
    if x.dtype == np.uint8:
        return _plane(x).astype(np.uint8)
    return quantize(_plane(x), 8)


def composite_reward(vif_total: float, qabf: float, ssim_total: float) -> float:
    w = REWARD_WEIGHTS
    return (w["vif"] * vif_total + w["qabf"] * qabf + w["ssim"] * ssim_total) / 3.0


# --------------------------------------------------------------------------
# histogram metrics


def _entropy_from_counts(counts: np.ndarray) -> float:
    p = counts[counts > 0].astype(np.float64) / counts.sum()
    return float(-np.sum(p * np.log2(p)))


def entropy(img) -> float:
    """Shannon entropy (bits) of the 256-bin intensity histogram."""
    return _entropy_from_counts(_kernels.histogram256(to_uint8(img)))


def mutual_information(a, f) -> float:
    """MI (bits) between two planes from their 256x256 joint histogram."""
    qa, qf = to_uint8(a), to_uint8(f)
    _check_same(qa, qf)
    joint = _kernels.joint_histogram256(qa, qf).astype(np.float64)
    pj = joint / joint.sum()
    pa = pj.sum(axis=1)
    pf = pj.sum(axis=0)
    nz = pj > 0
    outer = np.outer(pa, pf)
    return float(np.sum(pj[nz] * np.log2(pj[nz] / outer[nz])))


# --------------------------------------------------------------------------
# SSIM


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def ssim(x, y, data_range: float = 1.0) -> float:
    """Mean SSIM over all fully contained 11x11 Gaussian windows."""
    x, y = _plane(x), _plane(y)
    _check_same(x, y)
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs planes of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape}")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    k = gaussian_window()
    mx = _kernels.filter_valid(x, k)
    my = _kernels.filter_valid(y, k)
    sxx = _kernels.filter_valid(x * x, k) - mx * mx
    syy = _kernels.filter_valid(y * y, k) - my * my
    sxy = _kernels.filter_valid(x * y, k) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


# --------------------------------------------------------------------------
# VIF


def _vif_window(n: int) -> np.ndarray:
    # 1-D factor of the N x N Gaussian with sd = N / 5 used by the reference VIF
    return gaussian_window(n, n / 5.0)


def vif_terms(ref, dist) -> tuple[float, float, int]:
    """Information numerator, denominator and scale count for VIF(ref -> dist).

    Inputs are on a [0, 255] scale.
    """
    ref, dist = _plane(ref), _plane(dist)
    _check_same(ref, dist)
    num = den = 0.0
    used = 0
    for scale in range(1, VIF_SCALES + 1):
        n = 2 ** (VIF_SCALES - scale + 1) + 1
        win = _vif_window(n)
        if scale > 1:
            if min(ref.shape) < n:
                break
            ref = _kernels.filter_valid(ref, win)[::2, ::2]
            dist = _kernels.filter_valid(dist, win)[::2, ::2]
        if min(ref.shape) < n:
            break
        used += 1
        mu1 = _kernels.filter_valid(ref, win)
        mu2 = _kernels.filter_valid(dist, win)
        s1 = np.maximum(_kernels.filter_valid(ref * ref, win) - mu1 * mu1, 0.0)
        s2 = np.maximum(_kernels.filter_valid(dist * dist, win) - mu2 * mu2, 0.0)
        s12 = _kernels.filter_valid(ref * dist, win) - mu1 * mu2

        g = s12 / (s1 + VIF_EPS)
        sv = s2 - g * s12
        flat1 = s1 < VIF_EPS
        g[flat1] = 0.0
        sv[flat1] = s2[flat1]
        s1[flat1] = 0.0
        flat2 = s2 < VIF_EPS
        g[flat2] = 0.0
        sv[flat2] = 0.0
        neg = g < 0
        sv[neg] = s2[neg]
        g[neg] = 0.0
        sv[sv <= VIF_EPS] = VIF_EPS

        num += float(np.sum(np.log10(1.0 + g * g * s1 / (sv + VIF_SIGMA_NSQ))))
        den += float(np.sum(np.log10(1.0 + s1 / VIF_SIGMA_NSQ)))
    return num, den, used


def vif(ref, dist, data_range: float = 1.0) -> float:
    """Multi-scale pixel-domain VIF of ``dist`` against ``ref``.

    ``data_range`` states the scale of the inputs; they are rescaled to
    [0, 255] before the noise variance of 2 is applied. A reference with no
    variance at any scale gives 1.0.
    """
    s = 255.0 / data_range
    num, den, used = vif_terms(_plane(ref) * s, _plane(dist) * s)
    if used == 0:
        raise ValueError("planes too small for a single VIF scale")
    if den == 0.0:
        return 1.0
    return num / den


# --------------------------------------------------------------------------
# Qabf


def qabf(a, b, f) -> float:
    """Xydeas-Petrovic edge transfer score of ``f`` against sources ``a``, ``b``."""
    a, b, f = _plane(a), _plane(b), _plane(f)
    _check_same(a, b, f)
    num, den = _kernels.qabf_sums(a * 255.0, b * 255.0, f * 255.0)
    if den == 0.0:
        return 0.0
    return num / den


# --------------------------------------------------------------------------
# reports


def evaluate_planes(a_y, b_y, f_y) -> MetricReport:
    """All metrics for luminance planes in [0, 1]: ``a`` visible, ``b`` infrared, ``f`` fused."""
    a, b, f = _plane(a_y), _plane(b_y), _plane(f_y)
    _check_same(a, b, f)
    en = entropy(f)
    mi = mutual_information(a, f) + mutual_information(b, f)
    s = 255.0
    va = vif_terms(a * s, f * s)
    vb = vif_terms(b * s, f * s)
    vif_total = (va[0] / va[1] if va[1] else 1.0) + (vb[0] / vb[1] if vb[1] else 1.0)
    q = qabf(a, b, f)
    ss = ssim(a, f) + ssim(b, f)
    return MetricReport(
        en=en,
        mi_total=mi,
        vif_total=vif_total,
        qabf=q,
        ssim_total=ss,
        reward=composite_reward(vif_total, q, ss),
        vif_scales=min(va[2], vb[2]),
    )


def evaluate(pair: SourcePair, fused: np.ndarray) -> MetricReport:
    """Score a fused image (3- or 1-channel) against its source pair on luminance."""
    f_y = luminance(fused)
    if f_y.shape[1:] != pair.shape:
        raise ValueError(f"{pair.id}: fused size {f_y.shape[1:]} does not match sources {pair.shape}")
    return evaluate_planes(luminance(pair.vis), pair.ir, f_y)


def mean_report(reports: list[MetricReport]) -> MetricReport:
    if not reports:
        raise ValueError("no reports to average")
    keys = ["en", "mi_total", "vif_total", "qabf", "ssim_total", "reward"]
    vals = {k: float(np.mean([getattr(r, k) for r in reports])) for k in keys}
    return MetricReport(**vals, vif_scales=min(r.vif_scales for r in reports))


def write_metrics_csv(
    path: str | Path,
    rows: list[tuple[str, MetricReport]],
    include_reward: bool = True,
) -> Path:
    """Write one row per id; the caller appends MEAN and reference rows as needed.

    The metric parameterization is written beside the CSV as
    ``<stem>.params.json`` so the table itself keeps a plain header row.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = ["id"] + METRIC_COLUMNS + (["reward"] if include_reward else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for key, rep in rows:
            r = rep.row()
            w.writerow([key] + [f"{r[c]:.6f}" for c in cols[1:]])
    with open(path.with_suffix(".params.json"), "w", encoding="utf-8") as fh:
        json.dump(parameterization(), fh, indent=2)
    return path


def report_from_dict(d: dict) -> MetricReport:
    vif_total, q, ss = float(d["VIF"]), float(d["Qabf"]), float(d["SSIM"])
    return MetricReport(
        en=float(d["EN"]),
        mi_total=float(d["MI"]),
        vif_total=vif_total,
        qabf=q,
        ssim_total=ss,
        reward=float(d["reward"]) if "reward" in d else composite_reward(vif_total, q, ss),
    )


def is_finite_report(r: MetricReport) -> bool:
    return all(math.isfinite(v) for v in asdict(r).values() if isinstance(v, float))
