"""Procedural visible/infrared scene pairs for smoke tests and desk-scale runs.

Each scene shares a coarse layout between modalities. The visible image
carries colour and fine texture but hides warm targets in shadow; the
infrared image is smooth apart from bright targets and a few shared edges.
"""
from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .image import SourcePair


def _smooth_noise(rng, shape, sigma):
    n = gaussian_filter(rng.standard_normal(shape), sigma, mode="reflect")
    n -= n.min()
    peak = n.max()
    return n / peak if peak > 0 else n


def _blobs(rng, shape, count, radius):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    mask = np.zeros(shape)
    for _ in range(count):
        cy, cx = rng.uniform(0.15, 0.85) * h, rng.uniform(0.15, 0.85) * w
        ry = radius * h * rng.uniform(0.6, 1.4)
        rx = ry * rng.uniform(0.35, 0.7)  # upright, pedestrian-like
        mask = np.maximum(mask, (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0).astype(float))
    return gaussian_filter(mask, 0.8)


def make_pair(seed: int, height: int = 64, width: int = 80, pair_id: str | None = None) -> SourcePair:
    rng = np.random.default_rng(seed)
    shape = (height, width)

    # coarse layout shared by both sensors: a few large blocks ("buildings")
    layout = np.zeros(shape)
    for _ in range(rng.integers(2, 5)):
        y0 = rng.integers(0, height // 2)
        x0 = rng.integers(0, width - width // 4)
        layout[y0:, x0 : x0 + rng.integers(width // 8, width // 3)] = rng.uniform(0.3, 1.0)
    layout = gaussian_filter(layout, 0.7)

    texture = _smooth_noise(rng, shape, 0.8) - 0.5
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * (np.arange(width) / rng.uniform(4, 9)))[None, :]
    shade = 0.35 + 0.65 * _smooth_noise(rng, shape, max(height, width) / 6)
    targets = _blobs(rng, shape, int(rng.integers(1, 4)), 0.12)

    base_vis = 0.25 + 0.35 * layout + 0.18 * texture + 0.08 * stripes * (layout > 0.2)
    vis_y = np.clip(base_vis * shade * (1.0 - 0.6 * targets), 0.0, 1.0)

    tint = rng.uniform(0.8, 1.2, size=3)
    color = np.stack([vis_y * tint[0], vis_y * tint[1], vis_y * tint[2]])
    color += 0.04 * (_smooth_noise(rng, (3, *shape), (0, 3, 3)) - 0.5)
    vis = np.clip(color, 0.0, 1.0).astype(np.float32)

    thermal = 0.2 + 0.25 * _smooth_noise(rng, shape, max(height, width) / 8) + 0.15 * layout
    ir = np.clip(thermal * (1.0 - targets) + (0.75 + 0.2 * rng.random()) * targets, 0.0, 1.0)
    ir = ir + 0.01 * rng.standard_normal(shape)
    ir = np.clip(ir, 0.0, 1.0).astype(np.float32)[None]

    return SourcePair(vis=vis, ir=ir, id=pair_id or f"syn{seed:04d}")


def make_dataset(n: int, height: int = 64, width: int = 80, seed: int = 0) -> list[SourcePair]:
    return [make_pair(seed * 100_003 + i, height, width, pair_id=f"syn{seed:02d}_{i:04d}") for i in range(n)]
