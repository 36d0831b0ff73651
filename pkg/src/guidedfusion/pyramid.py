"""Laplacian pyramid kernel and the guided linear fusion rule.

All operations are plain differentiable torch functions on tensors shaped
``(N, C, H, W)``; 2-D and 3-D inputs are accepted and treated as a single
image. Nothing here is learnable.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .image import SourcePair, YCbCrSplit, crop_back, pad_reflect, rgb_to_ycbcr, ycbcr_to_rgb

DEFAULT_LEVELS = 4
MAX_LEVELS = 6
BINOMIAL_5 = (1.0, 4.0, 6.0, 4.0, 1.0)


class PyramidError(ValueError):
    pass


@dataclass
class LaplacianPyramid:
    levels: list[torch.Tensor]  # band-pass L^0..L^{K-1}
    residual: torch.Tensor  # low-pass G^K

    @property
    def K(self) -> int:
        return len(self.levels)

    def planes(self) -> list[torch.Tensor]:
        return [*self.levels, self.residual]

    def map(self, fn) -> "LaplacianPyramid":
        return LaplacianPyramid([fn(t) for t in self.levels], fn(self.residual))

    def combine(self, other: "LaplacianPyramid", a: float, b: float) -> "LaplacianPyramid":
        return LaplacianPyramid(
            [a * x + b * y for x, y in zip(self.levels, other.levels)],
            a * self.residual + b * other.residual,
        )


@dataclass
class GuidancePyramid:
    mu_levels: list[torch.Tensor]  # mu^0..mu^K


def as_batch(x) -> torch.Tensor:
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(np.ascontiguousarray(x))
    if x.ndim == 2:
        return x[None, None]
    if x.ndim == 3:
        return x[None]
    if x.ndim == 4:
        return x
    raise PyramidError(f"expected 2-D to 4-D input, got shape {tuple(x.shape)}")


def _reflect_index(n: int, pad: int, device) -> torch.Tensor:
    # whole-sample symmetric reflection ("reflect" in numpy terms), valid for any n >= 1
    idx = np.arange(-pad, n + pad)
    if n == 1:
        idx = np.zeros_like(idx)
    else:
        period = 2 * (n - 1)
        idx = np.mod(idx, period)
        idx = np.where(idx >= n, period - idx, idx)
    return torch.as_tensor(idx, dtype=torch.long, device=device)


def _blur_axis(x: torch.Tensor, axis: int, gain: float = 1.0) -> torch.Tensor:
    n, c, h, w = x.shape
    k = torch.tensor(BINOMIAL_5, dtype=x.dtype, device=x.device) * (gain / 16.0)
    if axis == 3:
        xp = x.index_select(3, _reflect_index(w, 2, x.device))
        weight = k.view(1, 1, 1, 5).expand(c, 1, 1, 5)
    else:
        xp = x.index_select(2, _reflect_index(h, 2, x.device))
        weight = k.view(1, 1, 5, 1).expand(c, 1, 5, 1)
    return F.conv2d(xp, weight, groups=c)


def blur(x: torch.Tensor) -> torch.Tensor:
    """Separable 5-tap binomial blur with reflected borders."""
    return _blur_axis(_blur_axis(x, 3), 2)


def downsample2(x: torch.Tensor) -> torch.Tensor:
    return blur(x)[..., ::2, ::2]


def upsample2(x: torch.Tensor) -> torch.Tensor:
    """Zero-insertion to twice the size followed by the binomial blur scaled by 4."""
    n, c, h, w = x.shape
    up = x.new_zeros(n, c, 2 * h, 2 * w)
    up[..., ::2, ::2] = x
    return _blur_axis(_blur_axis(up, 3, gain=2.0), 2, gain=2.0)


def check_levels(K: int) -> None:
    if not 1 <= K <= MAX_LEVELS:
        raise PyramidError(f"level count must be in 1..{MAX_LEVELS}, got {K}")


def build_pyramid(img, K: int = DEFAULT_LEVELS) -> LaplacianPyramid:
    check_levels(K)
    g = as_batch(img)
    h, w = g.shape[-2:]
    m = 1 << K
    if h % m or w % m:
        raise PyramidError(f"image {h}x{w} is not divisible by 2^{K}={m}; pad it first")
    levels = []
    for _ in range(K):
        nxt = downsample2(g)
        levels.append(g - upsample2(nxt))
        g = nxt
    return LaplacianPyramid(levels, g)


def collapse_pyramid(pyr: LaplacianPyramid) -> torch.Tensor:
    g = pyr.residual
    for lvl in reversed(pyr.levels):
        if lvl.shape[-2] != 2 * g.shape[-2] or lvl.shape[-1] != 2 * g.shape[-1] or lvl.shape[:2] != g.shape[:2]:
            raise PyramidError(
                f"inconsistent pyramid: level {tuple(lvl.shape)} above {tuple(g.shape)}"
            )
        g = lvl + upsample2(g)
    return g


def resize_guidance(mu, K: int = DEFAULT_LEVELS) -> GuidancePyramid:
    """mu^0..mu^K by successive 2x average pooling."""
    check_levels(K)
    m = as_batch(mu)
    out = [m]
    for _ in range(K):
        m = F.avg_pool2d(m, 2)
        out.append(m)
    return GuidancePyramid(out)


def _blend(a: torch.Tensor, b: torch.Tensor, mu: torch.Tensor) -> torch.Tensor:
    return (1.0 - mu) * a + mu * b


def fuse_pyramids(p_vi: LaplacianPyramid, p_ir: LaplacianPyramid, g: GuidancePyramid) -> LaplacianPyramid:
    """Per-level ``(1 - mu^k) * L_vi^k + mu^k * L_ir^k``; the residual uses mu^K."""
    if p_vi.K != p_ir.K or len(g.mu_levels) != p_vi.K + 1:
        raise PyramidError(
            f"level mismatch: vis {p_vi.K}, ir {p_ir.K}, guidance {len(g.mu_levels) - 1}"
        )
    fused = []
    for a, b, mu in zip(p_vi.planes(), p_ir.planes(), g.mu_levels):
        if a.shape != b.shape or a.shape[-2:] != mu.shape[-2:]:
            raise PyramidError(
                f"shape mismatch: vis {tuple(a.shape)}, ir {tuple(b.shape)}, mu {tuple(mu.shape)}"
            )
        fused.append(_blend(a, b, mu))
    return LaplacianPyramid(fused[:-1], fused[-1])


def guided_fuse(vi_y, ir, mu, K: int = DEFAULT_LEVELS) -> torch.Tensor:
    """Fused luminance from two planes and a guidance map (all ``(N, 1, H, W)``)."""
    p_vi = build_pyramid(vi_y, K)
    p_ir = build_pyramid(ir, K)
    return collapse_pyramid(fuse_pyramids(p_vi, p_ir, resize_guidance(mu, K)))


def max_abs_select(p_vi: LaplacianPyramid, p_ir: LaplacianPyramid) -> tuple[LaplacianPyramid, list[torch.Tensor]]:
    """Keep the larger-magnitude coefficient per band (visible wins ties); average the residual.

    Returns the fused pyramid and, per band-pass level, a boolean mask that is
    true where the infrared coefficient was taken.
    """
    levels, masks = [], []
    for a, b in zip(p_vi.levels, p_ir.levels):
        take_ir = b.abs() > a.abs()
        levels.append(torch.where(take_ir, b, a))
        masks.append(take_ir)
    return LaplacianPyramid(levels, 0.5 * (p_vi.residual + p_ir.residual)), masks


def heuristic_ir_weight(ir: torch.Tensor) -> torch.Tensor:
    """Per-image min-max normalised infrared intensity; constant images map to 0."""
    ir = as_batch(ir)
    flat = ir.flatten(1)
    lo = flat.min(dim=1).values.view(-1, 1, 1, 1)
    hi = flat.max(dim=1).values.view(-1, 1, 1, 1)
    span = hi - lo
    safe = torch.where(span > 0, span, torch.ones_like(span))
    return torch.where(span > 0, (ir - lo) / safe, torch.zeros_like(ir))


CLASSICAL_RULES = ("laplacian_default", "heuristic_ir_weight")


def classical_fuse(pair: SourcePair, rule: str = "laplacian_default", K: int = DEFAULT_LEVELS) -> np.ndarray:
    """Hand-crafted pyramid fusion baselines; returns a ``(3, H, W)`` RGB image.

    ``laplacian_default`` keeps the max-magnitude band-pass coefficient and
    averages the residual. ``heuristic_ir_weight`` drives the guided rule with
    the min-max normalised infrared image as the weight map.
    """
    if rule not in CLASSICAL_RULES:
        raise ValueError(f"unknown rule {rule!r}; expected one of {CLASSICAL_RULES}")
    split = rgb_to_ycbcr(pair.vis)
    y_pad, rec = pad_reflect(split.y, 1 << K)
    ir_pad, _ = pad_reflect(pair.ir, 1 << K)
    vi_t = as_batch(torch.from_numpy(y_pad))
    ir_t = as_batch(torch.from_numpy(ir_pad))
    with torch.no_grad():
        if rule == "laplacian_default":
            fused, _ = max_abs_select(build_pyramid(vi_t, K), build_pyramid(ir_t, K))
            f_y = collapse_pyramid(fused)
        else:
            mu = heuristic_ir_weight(as_batch(torch.from_numpy(pair.ir)))
            mu_pad, _ = pad_reflect(mu[0].numpy(), 1 << K)
            f_y = guided_fuse(vi_t, ir_t, as_batch(torch.from_numpy(mu_pad)), K)
    f_y = crop_back(f_y[0].numpy(), rec)
    return ycbcr_to_rgb(YCbCrSplit(y=f_y, cbcr=split.cbcr))


def pyramid_mosaic(pyr: LaplacianPyramid, index: int = 0) -> np.ndarray:
    """Lay the levels of one batch item side by side as a single ``(1, H, W')`` plane.

    Band-pass levels are shifted by +0.5 so zero maps to mid-grey; the residual
    is shown as is. Smaller levels are top-aligned on a black canvas.
    """
    tiles = [t[index, :1].detach().numpy() + 0.5 for t in pyr.levels]
    tiles.append(pyr.residual[index, :1].detach().numpy())
    h = tiles[0].shape[1]
    width = sum(t.shape[2] for t in tiles) + 2 * (len(tiles) - 1)
    canvas = np.zeros((1, h, width), dtype=np.float32)
    x = 0
    for t in tiles:
        canvas[:, : t.shape[1], x : x + t.shape[2]] = np.clip(t, 0.0, 1.0)
        x += t.shape[2] + 2
    return canvas
