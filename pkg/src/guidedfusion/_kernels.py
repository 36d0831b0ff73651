"""Inner loops of the metric suite, compiled with numba when available.

Every kernel exists twice: an ``@njit`` loop and a vectorised numpy
equivalent. The active backend is picked at import time from the
``GUIDEDFUSION_KERNELS`` environment variable (``numba`` or ``numpy``;
default ``numba`` when it imports) and can be switched with
:func:`set_backend`. Both paths agree to floating-point reordering.
"""
from __future__ import annotations

import math
import os

import numpy as np
from scipy.ndimage import correlate1d

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - exercised only without numba
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap(args[0]) if args and callable(args[0]) else wrap


_BACKENDS = ("numba", "numpy")

# Xydeas-Petrovic edge preservation constants
QABF_TG, QABF_KG, QABF_DG = 0.9994, -15.0, 0.5
QABF_TA, QABF_KA, QABF_DA = 0.9879, -22.0, 0.8
QABF_L = 1.0


def _initial_backend() -> str:
    requested = os.environ.get("GUIDEDFUSION_KERNELS", "numba").strip().lower()
    if requested not in _BACKENDS:
        raise ValueError(f"GUIDEDFUSION_KERNELS must be one of {_BACKENDS}, got {requested!r}")
    if requested == "numba" and not NUMBA_AVAILABLE:
        return "numpy"
    return requested


_backend = _initial_backend()


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> str:
    """Select the kernel backend; returns the previous one."""
    global _backend
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not NUMBA_AVAILABLE:
        raise RuntimeError("numba is not installed")
    prev, _backend = _backend, name
    return prev


# --------------------------------------------------------------------------
# histograms


@njit(cache=True)
def _histogram256_nb(q):
    h = np.zeros(256, dtype=np.int64)
    for v in q.ravel():
        h[v] += 1
    return h


def _histogram256_np(q):
    return np.bincount(q.ravel(), minlength=256).astype(np.int64)


@njit(cache=True)
def _joint_histogram256_nb(a, b):
    h = np.zeros((256, 256), dtype=np.int64)
    fa = a.ravel()
    fb = b.ravel()
    for i in range(fa.size):
        h[fa[i], fb[i]] += 1
    return h


def _joint_histogram256_np(a, b):
    idx = a.ravel().astype(np.int64) * 256 + b.ravel()
    return np.bincount(idx, minlength=65536).reshape(256, 256).astype(np.int64)


def histogram256(q: np.ndarray) -> np.ndarray:
    q = np.ascontiguousarray(q, dtype=np.uint8)
    return _histogram256_nb(q) if _backend == "numba" else _histogram256_np(q)


def joint_histogram256(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.uint8)
    b = np.ascontiguousarray(b, dtype=np.uint8)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return _joint_histogram256_nb(a, b) if _backend == "numba" else _joint_histogram256_np(a, b)


# --------------------------------------------------------------------------
# separable 'valid' filtering (SSIM and VIF windows)


@njit(cache=True)
def _filter_valid_nb(img, k):
    n = k.size
    h, w = img.shape
    oh, ow = h - n + 1, w - n + 1
    tmp = np.zeros((h, ow), dtype=np.float64)
    for i in range(h):
        for j in range(ow):
            s = 0.0
            for t in range(n):
                s += k[t] * img[i, j + t]
            tmp[i, j] = s
    out = np.zeros((oh, ow), dtype=np.float64)
    for i in range(oh):
        for t in range(n):
            kt = k[t]
            for j in range(ow):
                out[i, j] += kt * tmp[i + t, j]
    return out


def _filter_valid_np(img, k):
    n = k.size
    lo = n // 2
    hi = n - 1 - lo
    tmp = correlate1d(img, k, axis=1, mode="constant")
    tmp = correlate1d(tmp, k, axis=0, mode="constant")
    return tmp[lo : img.shape[0] - hi, lo : img.shape[1] - hi]


def filter_valid(img: np.ndarray, k1d: np.ndarray) -> np.ndarray:
    """Correlate with the outer product ``k1d ⊗ k1d``, keeping only full windows."""
    img = np.ascontiguousarray(img, dtype=np.float64)
    k = np.ascontiguousarray(k1d, dtype=np.float64)
    if img.shape[0] < k.size or img.shape[1] < k.size:
        raise ValueError(f"image {img.shape} smaller than {k.size}-tap window")
    return _filter_valid_nb(img, k) if _backend == "numba" else _filter_valid_np(img, k)


# --------------------------------------------------------------------------
# Sobel edge strength/orientation and Qabf accumulation


@njit(cache=True)
def _sobel_nb(img):
    # zero-padded 'same' correlation with the horizontal/vertical Sobel stencils
    h, w = img.shape
    gx = np.zeros((h, w), dtype=np.float64)
    gy = np.zeros((h, w), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            sx = 0.0
            sy = 0.0
            for di in range(-1, 2):
                ii = i + di
                if ii < 0 or ii >= h:
                    continue
                wy = 2.0 if di == 0 else 1.0
                for dj in range(-1, 2):
                    jj = j + dj
                    if jj < 0 or jj >= w:
                        continue
                    v = img[ii, jj]
                    wx = 2.0 if dj == 0 else 1.0
                    sx += dj * wy * v
                    sy += di * wx * v
            gx[i, j] = sx
            gy[i, j] = sy
    return gx, gy


def _sobel_np(img):
    p = np.pad(img, 1, mode="constant")
    gx = (p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2])
    gy = (p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:])
    return gx, gy


def sobel_zero(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    img = np.ascontiguousarray(img, dtype=np.float64)
    return _sobel_nb(img) if _backend == "numba" else _sobel_np(img)


@njit(cache=True)
def _orientation(gx, gy):
    if gx == 0.0:
        return math.pi / 2.0
    return math.atan(gy / gx)


@njit(cache=True)
def _preservation(ga, aa, gf, af):
    if ga > gf:
        g = gf / ga
    elif ga < gf:
        g = ga / gf
    else:
        g = 1.0
    a = 1.0 - abs(aa - af) / (math.pi / 2.0)
    qg = QABF_TG / (1.0 + math.exp(QABF_KG * (g - QABF_DG)))
    qa = QABF_TA / (1.0 + math.exp(QABF_KA * (a - QABF_DA)))
    return qg * qa


@njit(cache=True)
def _qabf_sums_nb(a, b, f):
    ax, ay = _sobel_nb(a)
    bx, by = _sobel_nb(b)
    fx, fy = _sobel_nb(f)
    h, w = a.shape
    num = 0.0
    den = 0.0
    for i in range(h):
        for j in range(w):
            ga = math.sqrt(ax[i, j] ** 2 + ay[i, j] ** 2)
            gb = math.sqrt(bx[i, j] ** 2 + by[i, j] ** 2)
            gf = math.sqrt(fx[i, j] ** 2 + fy[i, j] ** 2)
            af = _orientation(fx[i, j], fy[i, j])
            wa = ga**QABF_L
            wb = gb**QABF_L
            if wa > 0.0:
                num += _preservation(ga, _orientation(ax[i, j], ay[i, j]), gf, af) * wa
            if wb > 0.0:
                num += _preservation(gb, _orientation(bx[i, j], by[i, j]), gf, af) * wb
            den += wa + wb
    return num, den


def _edge_np(img):
    gx, gy = _sobel_np(img)
    g = np.hypot(gx, gy)
    with np.errstate(divide="ignore", invalid="ignore"):
        ang = np.where(gx == 0, np.pi / 2, np.arctan(gy / np.where(gx == 0, 1.0, gx)))
    return g, ang


def _preservation_np(ga, aa, gf, af):
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(ga > gf, gf / ga, np.where(ga < gf, ga / gf, 1.0))
    a = 1.0 - np.abs(aa - af) / (np.pi / 2)
    qg = QABF_TG / (1.0 + np.exp(QABF_KG * (g - QABF_DG)))
    qa = QABF_TA / (1.0 + np.exp(QABF_KA * (a - QABF_DA)))
    return qg * qa


def _qabf_sums_np(a, b, f):
    ga, aa = _edge_np(a)
    gb, ab = _edge_np(b)
    gf, af = _edge_np(f)
    wa, wb = ga**QABF_L, gb**QABF_L
    qa = np.where(wa > 0, _preservation_np(ga, aa, gf, af), 0.0)
    qb = np.where(wb > 0, _preservation_np(gb, ab, gf, af), 0.0)
    return float(np.sum(qa * wa + qb * wb)), float(np.sum(wa + wb))


def qabf_sums(a: np.ndarray, b: np.ndarray, f: np.ndarray) -> tuple[float, float]:
    """Edge-strength-weighted preservation numerator and weight total."""
    a, b, f = (np.ascontiguousarray(x, dtype=np.float64) for x in (a, b, f))
    if _backend == "numba":
        num, den = _qabf_sums_nb(a, b, f)
        return float(num), float(den)
    return _qabf_sums_np(a, b, f)


def warmup() -> None:
    """Trigger numba compilation so timings exclude the JIT."""
    if not NUMBA_AVAILABLE:
        return
    x = np.random.default_rng(0).random((16, 16))
    q = (x * 255).astype(np.uint8)
    _histogram256_nb(q)
    _joint_histogram256_nb(q, q)
    _filter_valid_nb(x, np.ones(3) / 3)
    _qabf_sums_nb(x, x, x)
