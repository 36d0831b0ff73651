"""End-to-end fusion: colour split, guidance, pyramid blend, chroma reattachment."""
from __future__ import annotations

import csv
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .image import (
    PadRecord,
    SourcePair,
    YCbCrSplit,
    crop_back,
    pad_reflect,
    rgb_to_ycbcr,
    save_guidance,
    save_image,
    ycbcr_to_rgb,
)
from .net import GuidanceNet
from .pyramid import DEFAULT_LEVELS, guided_fuse

MODES = ("guided", "direct")


class FusionError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class FusionResult:
    id: str
    fused: np.ndarray | None  # (3, H, W) RGB
    fused_y: np.ndarray | None  # (1, H, W), unclamped
    guidance: np.ndarray | None  # (1, H, W); None in direct mode
    cbcr: np.ndarray | None  # (2, H, W), the visible source's chroma
    timing: dict = field(default_factory=dict)
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def pad_multiple(net: GuidanceNet | None, K: int) -> int:
    depth = net.config.depth if net is not None else 0
    return max(1 << K, 1 << depth)


def fuse_luminance(
    net: GuidanceNet | None,
    vi_y: torch.Tensor,
    ir: torch.Tensor,
    mode: str = "guided",
    K: int = DEFAULT_LEVELS,
    mu: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor | None]:
    """Differentiable core on padded ``(N, 1, H, W)`` planes; returns (fused Y, guidance).

    ``mu`` overrides the network output in guided mode (debug hook).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if mode == "direct":
        if net is None:
            raise ValueError("direct mode needs a network")
        return net(vi_y, ir), None
    if mu is None:
        if net is None:
            raise ValueError("guided mode needs a network or an explicit guidance map")
        mu = net(vi_y, ir)
    return guided_fuse(vi_y, ir, mu, K), mu


def _prepare(pair: SourcePair, multiple: int) -> tuple[YCbCrSplit, np.ndarray, np.ndarray, PadRecord]:
    split = rgb_to_ycbcr(pair.vis)
    y_pad, rec = pad_reflect(split.y, multiple)
    ir_pad, _ = pad_reflect(pair.ir, multiple)
    return split, y_pad, ir_pad, rec


def _run_group(
    pairs: list[SourcePair],
    net: GuidanceNet | None,
    mode: str,
    K: int,
    mu_override: np.ndarray | float | None,
) -> list[FusionResult]:
    t0 = time.perf_counter()
    multiple = pad_multiple(net, K)
    prepared = [_prepare(p, multiple) for p in pairs]
    vi = torch.from_numpy(np.stack([p[1] for p in prepared]))
    ir = torch.from_numpy(np.stack([p[2] for p in prepared]))
    t1 = time.perf_counter()

    mu = None
    if mu_override is not None:
        arr = np.broadcast_to(np.asarray(mu_override, dtype=np.float32), (1, *pairs[0].shape))
        mu = torch.from_numpy(np.stack([pad_reflect(arr, multiple)[0]] * len(pairs)))
    with torch.no_grad():
        if mode == "guided" and mu is None:
            if net is None:
                raise FusionError("guidance_net", "no network supplied")
            mu = net(vi, ir)
        t2 = time.perf_counter()
        if mode == "guided":
            if not torch.isfinite(mu).all():
                raise FusionError("guidance_net", "non-finite guidance map")
            f_y = guided_fuse(vi, ir, mu, K)
        else:
            f_y = net(vi, ir)
            t2 = time.perf_counter()
    if not torch.isfinite(f_y).all():
        raise FusionError("pyramid" if mode == "guided" else "guidance_net", "non-finite fused luminance")
    t3 = time.perf_counter()

    results = []
    for k, (pair, (split, _, _, rec)) in enumerate(zip(pairs, prepared)):
        fy = crop_back(f_y[k].numpy(), rec)
        guidance = crop_back(mu[k].numpy(), rec).copy() if mode == "guided" else None
        fused = ycbcr_to_rgb(YCbCrSplit(y=fy, cbcr=split.cbcr))
        results.append(FusionResult(pair.id, fused, fy.copy(), guidance, split.cbcr, {}))
    t4 = time.perf_counter()
    timing = {
        "prepare_ms": 1e3 * (t1 - t0),
        "network_ms": 1e3 * (t2 - t1),
        "pyramid_ms": 1e3 * (t3 - t2),
        "reconstruct_ms": 1e3 * (t4 - t3),
        "total_ms": 1e3 * (t4 - t0),
        "batch_size": len(pairs),
        "height": pairs[0].shape[0],
        "width": pairs[0].shape[1],
    }
    for r in results:
        r.timing = dict(timing)
    return results


def fuse(
    pair: SourcePair,
    net: GuidanceNet | None,
    mode: str = "guided",
    K: int = DEFAULT_LEVELS,
    mu_override=None,
) -> FusionResult:
    """Fuse one pair. ``mu_override`` (scalar or (H, W) map) replaces the network's guidance."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if net is not None:
        net.eval()
    return _run_group([pair], net, mode, K, mu_override)[0]


def group_by_size(pairs: list[SourcePair], batch_size: int) -> list[list[int]]:
    """Partition indices into equal-size batches of at most ``batch_size``, order-stable."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    groups: OrderedDict[tuple[int, int], list[int]] = OrderedDict()
    for i, p in enumerate(pairs):
        groups.setdefault(p.shape, []).append(i)
    batches = []
    for idx in groups.values():
        batches.extend(idx[s : s + batch_size] for s in range(0, len(idx), batch_size))
    return batches


def fuse_batch(
    pairs: list[SourcePair],
    net: GuidanceNet | None,
    mode: str = "guided",
    batch_size: int = 16,
    K: int = DEFAULT_LEVELS,
) -> list[FusionResult]:
    """Fuse many pairs, batching equal sizes; results come back in input order.

    A failing batch is retried pair by pair so one bad input only fails itself.
    """
    if net is not None:
        net.eval()
    out: list[FusionResult | None] = [None] * len(pairs)
    for b, idx in enumerate(group_by_size(pairs, batch_size)):
        group = [pairs[i] for i in idx]
        try:
            results = _run_group(group, net, mode, K, None)
        except (FusionError, RuntimeError, ValueError):
            results = []
            for p in group:
                try:
                    results.extend(_run_group([p], net, mode, K, None))
                except (FusionError, RuntimeError, ValueError) as exc:
                    results.append(FusionResult(p.id, None, None, None, None, {}, error=str(exc)))
        for i, r in zip(idx, results):
            r.timing["batch"] = b
            out[i] = r
    return out  # type: ignore[return-value]


TIMING_COLUMNS = [
    "batch", "ids", "batch_size", "height", "width",
    "prepare_ms", "network_ms", "pyramid_ms", "reconstruct_ms", "total_ms",
]


def write_outputs(out_dir: str | Path, results: list[FusionResult]) -> Path:
    """``fused/<id>.png``, ``guidance/<id>.png`` (16-bit) and one ``timing.csv`` row per batch."""
    out_dir = Path(out_dir)
    rows: OrderedDict[int, dict] = OrderedDict()
    for r in results:
        if not r.ok:
            continue
        save_image(out_dir / "fused" / f"{r.id}.png", r.fused)
        if r.guidance is not None:
            save_guidance(out_dir / "guidance" / f"{r.id}.png", r.guidance)
        b = r.timing.get("batch", 0)
        row = rows.setdefault(b, {**{k: r.timing.get(k, "") for k in TIMING_COLUMNS}, "ids": []})
        row["ids"].append(r.id)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "timing.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=TIMING_COLUMNS)
        w.writeheader()
        for b, row in rows.items():
            row = dict(row, batch=b, ids=";".join(row["ids"]))
            for k in TIMING_COLUMNS:
                if k.endswith("_ms"):
                    row[k] = f"{row[k]:.3f}"
            w.writerow(row)
    return path
