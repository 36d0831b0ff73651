"""Throughput and latency measurement with data preparation timed apart from compute."""
from __future__ import annotations

import math
import time

import numpy as np
import torch

from .engine import fuse_batch, fuse_luminance, group_by_size, pad_multiple
from .image import SourcePair, pad_reflect, rgb_to_ycbcr
from .losses import LossWeights, total_loss
from .net import GuidanceNet, NetConfig, init_weights, param_count
from .pyramid import DEFAULT_LEVELS

# Published figures measured on a datacentre GPU; printed for comparison only.
REFERENCE_ANCHORS = {
    "train_images_per_s": 22.1,
    "inference_s_bs16_full_test_set": 10.0,
    "latency_ms_by_params": {"17.264M": 429.93, "608.642K": 329.17, "80.558K": 272.23},
}

STAGES = ("prepare_ms", "network_ms", "pyramid_ms", "reconstruct_ms")


def bench_training(
    pairs: list[SourcePair],
    net: GuidanceNet,
    batch_size: int = 4,
    warm_steps: int = 2,
    steps: int = 5,
    levels: int = DEFAULT_LEVELS,
    lr: float = 1e-4,
) -> dict:
    """Images per second over ``steps`` timed optimiser steps after ``warm_steps`` untimed ones.

    Trains a copy of the weights so the caller's network is left untouched.
    """
    work = GuidanceNet(net.config)
    work.load_state_dict(net.state_dict())
    work.train()
    opt = torch.optim.AdamW(work.parameters(), lr=lr)
    weights = LossWeights()
    batches = group_by_size(pairs, batch_size)
    multiple = pad_multiple(work, levels)
    data_s = compute_s = 0.0
    images = 0
    for n in range(warm_steps + steps):
        idx = batches[n % len(batches)]
        t0 = time.perf_counter()
        vi = torch.from_numpy(np.stack([pad_reflect(rgb_to_ycbcr(pairs[i].vis).y, multiple)[0] for i in idx]))
        ir = torch.from_numpy(np.stack([pad_reflect(pairs[i].ir, multiple)[0] for i in idx]))
        t1 = time.perf_counter()
        f_y, _ = fuse_luminance(work, vi, ir, "guided", levels)
        loss = total_loss(f_y, vi, ir, weights).total
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        t2 = time.perf_counter()
        if n >= warm_steps:
            data_s += t1 - t0
            compute_s += t2 - t1
            images += len(idx)
    return {
        "images": images,
        "steps": steps,
        "batch_size": batch_size,
        "data_s": data_s,
        "compute_s": compute_s,
        "images_per_s": images / compute_s if compute_s > 0 else math.nan,
        "images_per_s_with_data": images / (data_s + compute_s) if data_s + compute_s > 0 else math.nan,
    }


def bench_inference(
    pairs: list[SourcePair],
    net: GuidanceNet | None,
    batch_size: int = 16,
    repeats: int = 3,
    levels: int = DEFAULT_LEVELS,
) -> dict:
    """Best-of-``repeats`` batched guided fusion of ``pairs`` with a per-stage breakdown."""
    fuse_batch(pairs[:batch_size], net, "guided", batch_size, levels)  # warm-up
    best, best_results = math.inf, None
    for _ in range(repeats):
        t0 = time.perf_counter()
        results = fuse_batch(pairs, net, "guided", batch_size, levels)
        elapsed = time.perf_counter() - t0
        if elapsed < best:
            best, best_results = elapsed, results
    per_batch = {}
    for r in best_results:
        per_batch.setdefault(r.timing["batch"], r.timing)
    stages = {s: float(sum(t[s] for t in per_batch.values())) for s in STAGES}
    return {
        "images": len(pairs),
        "batch_size": batch_size,
        "batches": len(per_batch),
        "total_ms": 1e3 * best,
        "per_image_ms": 1e3 * best / len(pairs),
        "per_batch_ms": 1e3 * best / len(per_batch),
        "images_per_s": len(pairs) / best,
        "stages_ms": stages,
        "failed": [r.id for r in best_results if not r.ok],
    }


def bench_presets(
    pairs: list[SourcePair],
    presets: dict[str, NetConfig],
    batch_size: int = 16,
    repeats: int = 3,
    levels: int = DEFAULT_LEVELS,
    seed: int = 0,
) -> dict:
    """Batched inference latency for freshly initialised networks of each preset."""
    out = {}
    for name, cfg in presets.items():
        net = init_weights(cfg, seed)
        r = bench_inference(pairs[:batch_size], net, batch_size, repeats, levels)
        out[name] = {"params": param_count(cfg), "latency_ms": r["per_batch_ms"], "batch_size": r["batch_size"]}
    return out


def latency_ordered(by_preset: dict) -> bool:
    """True when latency strictly increases with parameter count."""
    ordered = sorted(by_preset.values(), key=lambda r: r["params"])
    return all(a["latency_ms"] < b["latency_ms"] for a, b in zip(ordered, ordered[1:]))


def format_report(report: dict) -> str:
    lines = []
    tr = report.get("training")
    if tr:
        lines.append(
            f"training: {tr['images_per_s']:.2f} img/s compute-only, "
            f"{tr['images_per_s_with_data']:.2f} img/s incl. data prep (bs {tr['batch_size']}, {tr['steps']} steps)"
        )
    for key in ("inference_bs1", "inference"):
        inf = report.get(key)
        if inf:
            st = ", ".join(f"{k[:-3]} {v:.1f}" for k, v in inf["stages_ms"].items())
            lines.append(
                f"{key}: bs {inf['batch_size']}, {inf['per_image_ms']:.2f} ms/img, "
                f"{inf['images_per_s']:.2f} img/s; stages ms: {st}"
            )
    pre = report.get("presets")
    if pre:
        parts = ", ".join(f"{k} ({v['params']:,} params) {v['latency_ms']:.1f} ms" for k, v in pre.items())
        lines.append(f"preset latency per batch: {parts}; ordered by size: {latency_ordered(pre)}")
    a = REFERENCE_ANCHORS
    lat = ", ".join(f"{k} {v} ms" for k, v in a["latency_ms_by_params"].items())
    lines.append(
        f"reference only (published, different hardware): training {a['train_images_per_s']} img/s; "
        f"full test-set inference {a['inference_s_bs16_full_test_set']} s at bs 16; latency {lat}"
    )
    return "\n".join(lines)
