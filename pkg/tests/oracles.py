"""Slow, loop-based reference implementations used only by the tests.

They are written from the textbook definitions and share no code with the
package, so agreement between the two is evidence rather than tautology.
"""
from __future__ import annotations

import math
from collections import Counter

import numpy as np
from scipy.signal import correlate2d

BINOMIAL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def reflect(i: int, n: int) -> int:
    """Whole-sample symmetric index: ... 2 1 | 0 1 2 ... n-1 | n-2 ..."""
    if n == 1:
        return 0
    period = 2 * (n - 1)
    i %= period
    return i if i < n else period - i


# --------------------------------------------------------------------------
# pyramid


def blur(img: np.ndarray, gain: float = 1.0) -> np.ndarray:
    h, w = img.shape
    tmp = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            tmp[y, x] = gain * sum(BINOMIAL[k + 2] * img[y, reflect(x + k, w)] for k in range(-2, 3))
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            out[y, x] = gain * sum(BINOMIAL[k + 2] * tmp[reflect(y + k, h), x] for k in range(-2, 3))
    return out


def down(img: np.ndarray) -> np.ndarray:
    return blur(img)[::2, ::2]


def up(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    z = np.zeros((2 * h, 2 * w))
    z[::2, ::2] = img
    return blur(z, gain=2.0)


def build(img: np.ndarray, levels: int) -> tuple[list[np.ndarray], np.ndarray]:
    bands, g = [], np.asarray(img, dtype=np.float64)
    for _ in range(levels):
        nxt = down(g)
        bands.append(g - up(nxt))
        g = nxt
    return bands, g


def collapse(bands: list[np.ndarray], residual: np.ndarray) -> np.ndarray:
    g = residual
    for band in reversed(bands):
        g = band + up(g)
    return g


def avg_pool(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    out = np.zeros((h // 2, w // 2))
    for y in range(h // 2):
        for x in range(w // 2):
            out[y, x] = img[2 * y : 2 * y + 2, 2 * x : 2 * x + 2].mean()
    return out


def guided_fuse(vi: np.ndarray, ir: np.ndarray, mu: np.ndarray, levels: int) -> np.ndarray:
    bv, rv = build(vi, levels)
    bi, ri = build(ir, levels)
    mus = [np.asarray(mu, dtype=np.float64)]
    for _ in range(levels):
        mus.append(avg_pool(mus[-1]))
    bands = [(1 - m) * a + m * b for a, b, m in zip(bv, bi, mus)]
    res = (1 - mus[-1]) * rv + mus[-1] * ri
    return collapse(bands, res)


# --------------------------------------------------------------------------
# loss terms, (H, W) float64 planes


def sobel_reflect(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h, w = img.shape
    gx, gy = np.zeros((h, w)), np.zeros((h, w))
    kx = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]
    for y in range(h):
        for x in range(w):
            sx = sy = 0.0
            for dy in range(-1, 2):
                for dx in range(-1, 2):
                    v = img[reflect(y + dy, h), reflect(x + dx, w)]
                    sx += kx[dy + 1][dx + 1] * v
                    sy += kx[dx + 1][dy + 1] * v
            gx[y, x], gy[y, x] = sx, sy
    return gx, gy


def loss_max(f, vi, ir) -> float:
    h, w = f.shape
    return sum(abs(f[y, x] - max(vi[y, x], ir[y, x])) for y in range(h) for x in range(w)) / (h * w)


def loss_grad(f, vi, ir) -> float:
    fx, fy = sobel_reflect(f)
    vx, vy = sobel_reflect(vi)
    ix, iy = sobel_reflect(ir)
    h, w = f.shape
    total = 0.0
    for y in range(h):
        for x in range(w):
            tx = vx[y, x] if abs(vx[y, x]) >= abs(ix[y, x]) else ix[y, x]
            ty = vy[y, x] if abs(vy[y, x]) >= abs(iy[y, x]) else iy[y, x]
            total += abs(fx[y, x] - tx) + abs(fy[y, x] - ty)
    return total / (h * w)


def gauss2d(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * sigma**2))
    return g / g.sum()


def ssim(a, b, data_range: float = 1.0, size: int = 11, sigma: float = 1.5) -> float:
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    win = gauss2d(size, sigma)
    h, w = a.shape
    vals = []
    for y in range(h - size + 1):
        for x in range(w - size + 1):
            pa, pb = a[y : y + size, x : x + size], b[y : y + size, x : x + size]
            ma, mb = (win * pa).sum(), (win * pb).sum()
            va = (win * (pa - ma) ** 2).sum()
            vb = (win * (pb - mb) ** 2).sum()
            cov = (win * (pa - ma) * (pb - mb)).sum()
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def loss_ssim(f, vi, ir) -> float:
    return (1 - ssim(f, vi)) + (1 - ssim(f, ir))


def loss_consist(f, vi, ir) -> float:
    h, w = f.shape
    return sum(abs(f[y, x] - vi[y, x]) + abs(f[y, x] - ir[y, x]) for y in range(h) for x in range(w)) / (h * w)


# --------------------------------------------------------------------------
# metrics


def quantize8(x) -> np.ndarray:
    return np.floor(np.clip(np.asarray(x, dtype=np.float64), 0, 1) * 255 + 0.5).astype(int)


def entropy(q) -> float:
    counts = Counter(np.asarray(q).ravel().tolist())
    n = sum(counts.values())
    return -sum(c / n * math.log2(c / n) for c in counts.values())


def mutual_information(qa, qf) -> float:
    pairs = Counter(zip(np.asarray(qa).ravel().tolist(), np.asarray(qf).ravel().tolist()))
    ca = Counter(np.asarray(qa).ravel().tolist())
    cf = Counter(np.asarray(qf).ravel().tolist())
    n = sum(pairs.values())
    return sum(c / n * math.log2((c / n) / ((ca[a] / n) * (cf[f] / n))) for (a, f), c in pairs.items())


def vif(ref, dist, sigma_nsq: float = 2.0, eps: float = 1e-10) -> float:
    """Multi-scale pixel-domain VIF with 2-D 'valid' correlations on [0, 255] inputs."""
    ref, dist = np.asarray(ref, dtype=np.float64), np.asarray(dist, dtype=np.float64)
    num = den = 0.0
    for scale in range(1, 5):
        n = 2 ** (4 - scale + 1) + 1
        win = gauss2d(n, n / 5.0)
        if scale > 1:
            if min(ref.shape) < n:
                break
            ref = correlate2d(ref, win, mode="valid")[::2, ::2]
            dist = correlate2d(dist, win, mode="valid")[::2, ::2]
        if min(ref.shape) < n:
            break
        mu1, mu2 = correlate2d(ref, win, mode="valid"), correlate2d(dist, win, mode="valid")
        s1 = np.maximum(correlate2d(ref * ref, win, mode="valid") - mu1**2, 0)
        s2 = np.maximum(correlate2d(dist * dist, win, mode="valid") - mu2**2, 0)
        s12 = correlate2d(ref * dist, win, mode="valid") - mu1 * mu2
        for v1, v2, v12 in zip(s1.ravel(), s2.ravel(), s12.ravel()):
            g = v12 / (v1 + eps)
            sv = v2 - g * v12
            if v1 < eps:
                g, sv, v1 = 0.0, v2, 0.0
            if v2 < eps:
                g, sv = 0.0, 0.0
            if g < 0:
                sv, g = v2, 0.0
            sv = max(sv, eps)
            num += math.log10(1 + g * g * v1 / (sv + sigma_nsq))
            den += math.log10(1 + v1 / sigma_nsq)
    return 1.0 if den == 0 else num / den


def _sobel_zero(img):
    h, w = img.shape
    p = np.zeros((h + 2, w + 2))
    p[1:-1, 1:-1] = img
    gx, gy = np.zeros((h, w)), np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            win = p[y : y + 3, x : x + 3]
            gx[y, x] = (win[:, 2] - win[:, 0]) @ np.array([1, 2, 1])
            gy[y, x] = (win[2, :] - win[0, :]) @ np.array([1, 2, 1])
    return gx, gy


def qabf(a, b, f) -> float:
    """Per-pixel Xydeas-Petrovic loop on [0, 1] planes (scaled to [0, 255])."""
    tg, kg, dg, ta, ka, da = 0.9994, -15.0, 0.5, 0.9879, -22.0, 0.8
    planes = [np.asarray(p, dtype=np.float64) * 255 for p in (a, b, f)]
    (ax, ay), (bx, by), (fx, fy) = (_sobel_zero(p) for p in planes)

    def strength_angle(gx, gy):
        return math.hypot(gx, gy), (math.pi / 2 if gx == 0 else math.atan(gy / gx))

    def preserve(gs, angs, gf, angf):
        g = 1.0 if gs == gf else (gf / gs if gs > gf else gs / gf)
        al = 1 - abs(angs - angf) / (math.pi / 2)
        return tg / (1 + math.exp(kg * (g - dg))) * ta / (1 + math.exp(ka * (al - da)))

    num = den = 0.0
    h, w = planes[0].shape
    for y in range(h):
        for x in range(w):
            gf, af = strength_angle(fx[y, x], fy[y, x])
            for sx, sy in ((ax[y, x], ay[y, x]), (bx[y, x], by[y, x])):
                gs, angs = strength_angle(sx, sy)
                if gs > 0:
                    num += preserve(gs, angs, gf, af) * gs
                den += gs
    return 0.0 if den == 0 else num / den
