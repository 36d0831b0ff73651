"""Full-resolution unsupervised training, loss-weight grid search and model scaling study.

Training only ever touches :class:`~guidedfusion.image.SourcePair` objects;
images are padded losslessly to the network multiple and never cropped into
patches or resized.
"""
from __future__ import annotations

import contextlib
import csv
import itertools
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from . import metrics
from .engine import fuse_batch, fuse_luminance, group_by_size, pad_multiple
from .image import SourcePair, pad_reflect, rgb_to_ycbcr
from .losses import LAMBDA_NAMES, LossWeights, total_loss
from .net import GuidanceNet, ModelCheckpoint, NetConfig, init_weights, param_count, save_checkpoint
from .pyramid import DEFAULT_LEVELS, classical_fuse

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, message: str, last_checkpoint: ModelCheckpoint | None = None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainConfig:
    epochs: int = 2
    batch_size: int = 4
    learning_rate: float = 1e-4
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    precision: str = "full"
    net: NetConfig = field(default_factory=NetConfig)
    mode: str = "guided"
    levels: int = DEFAULT_LEVELS
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    cosine_schedule: bool = False
    max_steps: int | None = None
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.precision not in ("full", "reduced"):
            raise ValueError("precision must be 'full' or 'reduced'")
        if self.mode not in ("guided", "direct"):
            raise ValueError("mode must be 'guided' or 'direct'")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("loss_weights"), dict):
            d["loss_weights"] = LossWeights(**d["loss_weights"])
        if isinstance(d.get("net"), dict):
            d["net"] = NetConfig(**d["net"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    evaluations: list[dict] = field(default_factory=list)

    def totals(self) -> np.ndarray:
        return np.array([s["total"] for s in self.steps])

    def moving_average(self, window: int = 10) -> np.ndarray:
        t = self.totals()
        if len(t) < window:
            return t
        return np.convolve(t, np.ones(window) / window, mode="valid")

    def write(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        if self.steps:
            with open(out_dir / "train_log.csv", "w", newline="", encoding="utf-8") as fh:
                w = csv.DictWriter(fh, fieldnames=list(self.steps[0]))
                w.writeheader()
                w.writerows(self.steps)
        with open(out_dir / "train_log.jsonl", "w", encoding="utf-8") as fh:
            for kind, records in (("step", self.steps), ("epoch", self.epochs), ("eval", self.evaluations)):
                for r in records:
                    fh.write(json.dumps({"kind": kind, **r}) + "\n")


def _to_tensors(pair: SourcePair, multiple: int) -> tuple[torch.Tensor, torch.Tensor]:
    y, _ = pad_reflect(rgb_to_ycbcr(pair.vis).y, multiple)
    ir, _ = pad_reflect(pair.ir, multiple)
    return torch.from_numpy(y), torch.from_numpy(ir)


def _batches(pairs: list[SourcePair], batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    order = rng.permutation(len(pairs))
    shuffled = [pairs[i] for i in order]
    return [[int(order[i]) for i in b] for b in group_by_size(shuffled, batch_size)]


def _autocast(precision: str):
    if precision == "reduced":
        return torch.autocast(device_type="cpu", dtype=torch.bfloat16)
    return contextlib.nullcontext()


def train(
    dataset: list[SourcePair],
    config: TrainConfig,
    net: GuidanceNet | None = None,
    on_epoch=None,
) -> tuple[ModelCheckpoint, TrainLog]:
    """Train the guidance network; returns the final checkpoint and the log.

    ``on_epoch(epoch, net, log)`` runs after every completed epoch (used for
    evaluation snapshots). Training stops early once ``max_steps`` is reached.
    """
    if not dataset:
        raise ValueError("training needs at least one pair")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    net = net or init_weights(config.net, config.seed)
    if net.config != config.net:
        raise ValueError("supplied network does not match config.net")
    multiple = pad_multiple(net, config.levels)
    tensors = [_to_tensors(p, multiple) for p in dataset]
    opt = torch.optim.AdamW(
        net.parameters(), lr=config.learning_rate, betas=config.betas, weight_decay=config.weight_decay
    )
    steps_per_epoch = len(group_by_size(dataset, config.batch_size))
    total_steps = config.epochs * steps_per_epoch
    if config.max_steps is not None:
        total_steps = min(total_steps, config.max_steps)
    sched = None
    if config.cosine_schedule:
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(total_steps, 1))

    log = TrainLog()
    ckpt_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    lw = config.loss_weights.to_dict()
    last_good = ModelCheckpoint.from_net(net, lw, epochs=0, steps=0)
    step = 0
    t_start = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        net.train()
        t_epoch = time.perf_counter()
        images = 0
        for idx in _batches(dataset, config.batch_size, rng):
            if step >= total_steps:
                break
            vi = torch.stack([tensors[i][0] for i in idx])
            ir = torch.stack([tensors[i][1] for i in idx])
            with _autocast(config.precision):
                f_y, _ = fuse_luminance(net, vi, ir, config.mode, config.levels)
            parts = total_loss(f_y.float(), vi, ir, config.loss_weights)
            if not torch.isfinite(parts.total):
                ids = ", ".join(dataset[i].id for i in idx)
                raise TrainingError(f"non-finite loss at step {step + 1} on pairs [{ids}]", last_good)
            opt.zero_grad(set_to_none=True)
            parts.total.backward()
            opt.step()
            if sched is not None:
                sched.step()
            step += 1
            images += len(idx)
            log.steps.append(
                {"step": step, "epoch": epoch, "wall_s": time.perf_counter() - t_start, **parts.floats()}
            )
        wall = time.perf_counter() - t_epoch
        log.epochs.append(
            {"epoch": epoch, "wall_s": wall, "images": images, "images_per_s": images / wall if wall > 0 else 0.0}
        )
        last_good = ModelCheckpoint.from_net(net, lw, epochs=epoch, steps=step, mode=config.mode)
        if ckpt_dir is not None:
            save_checkpoint(ckpt_dir / f"epoch_{epoch:03d}.ckpt", last_good)
            save_checkpoint(ckpt_dir / "last.ckpt", last_good)
        if on_epoch is not None:
            on_epoch(epoch, net, log)
        if step >= total_steps:
            break
    net.eval()
    return last_good, log


# --------------------------------------------------------------------------
# evaluation helpers


def evaluate_model(net: GuidanceNet, pairs: list[SourcePair], mode: str = "guided", batch_size: int = 16,
                   levels: int = DEFAULT_LEVELS) -> metrics.MetricReport:
    results = fuse_batch(pairs, net, mode, batch_size, levels)
    failed = [r.id for r in results if not r.ok]
    if failed:
        raise RuntimeError(f"fusion failed for {failed}")
    by_id = {p.id: p for p in pairs}
    return metrics.mean_report([metrics.evaluate(by_id[r.id], r.fused) for r in results])


def evaluate_classical(pairs: list[SourcePair], rule: str = "laplacian_default",
                       levels: int = DEFAULT_LEVELS) -> metrics.MetricReport:
    return metrics.mean_report([metrics.evaluate(p, classical_fuse(p, rule, levels)) for p in pairs])


def split_holdout(pairs: list[SourcePair], fraction: float = 0.25) -> tuple[list[SourcePair], list[SourcePair]]:
    """Deterministic split: every ``1/fraction``-th pair (by sorted id) is held out."""
    if not 0 < fraction < 1:
        raise ValueError("holdout fraction must be in (0, 1)")
    ordered = sorted(pairs, key=lambda p: p.id)
    stride = max(2, round(1 / fraction))
    held = [p for i, p in enumerate(ordered) if i % stride == stride - 1]
    train_set = [p for i, p in enumerate(ordered) if i % stride != stride - 1]
    if not held or not train_set:
        raise ValueError(f"cannot split {len(pairs)} pairs into train and held-out sets")
    return train_set, held


# --------------------------------------------------------------------------
# grid search

GRID_COLUMNS = [*LAMBDA_NAMES, "VIF", "Qabf", "SSIM", "EN", "MI", "reward"]


@dataclass
class GridResult:
    axes: dict[str, list[float]]
    rows: list[dict]  # one per cell, in grid order
    failures: list[dict] = field(default_factory=list)

    def sorted_rows(self) -> list[dict]:
        return sorted((r for r in self.rows if r.get("error") is None), key=lambda r: -r["reward"])

    def reward_array(self) -> np.ndarray:
        shape = tuple(len(v) for v in self.axes.values())
        arr = np.full(shape, np.nan)
        for r in self.rows:
            if r.get("error") is None:
                arr[tuple(r["index"])] = r["reward"]
        return arr

    def high_region(self, within: float = 0.02) -> dict:
        """Cells within ``within`` (relative) of the best reward and their connectivity.

        Connectivity is face adjacency in grid-index space. ``region`` is the
        largest connected block of high cells; ``contiguous`` is true when all
        high cells form one block.
        """
        arr = self.reward_array()
        if np.all(np.isnan(arr)):
            return {"best": None, "cells": [], "region": [], "contiguous": False}
        best = float(np.nanmax(arr))
        cut = best - within * abs(best)
        mask = np.nan_to_num(arr, nan=-np.inf) >= cut
        labels, n = ndimage.label(mask)
        sizes = ndimage.sum(mask, labels, index=range(1, n + 1))
        biggest = int(np.argmax(sizes)) + 1
        cells = [tuple(int(i) for i in ix) for ix in np.argwhere(mask)]
        region = [tuple(int(i) for i in ix) for ix in np.argwhere(labels == biggest)]
        return {"best": best, "threshold": cut, "cells": cells, "region": region, "contiguous": n == 1}

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        ordered = self.sorted_rows() + [r for r in self.rows if r.get("error") is not None]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(GRID_COLUMNS + ["error"])
            for r in ordered:
                vals = [r[k] for k in LAMBDA_NAMES]
                vals += ["" if r.get("error") else f"{r[k]:.6f}" for k in GRID_COLUMNS[4:]]
                w.writerow(vals + [r.get("error") or ""])
        return path

    def pivot(self, row_axis: str, col_axis: str) -> tuple[list[float], list[float], np.ndarray]:
        """Best reward over the other axes for every (row, col) value pair."""
        names = list(self.axes)
        ri, ci = names.index(row_axis), names.index(col_axis)
        arr = self.reward_array()
        others = tuple(i for i in range(arr.ndim) if i not in (ri, ci))
        with np.errstate(all="ignore"):
            red = np.nanmax(arr, axis=others) if others else arr
        if ri > ci:
            red = red.T
        return self.axes[row_axis], self.axes[col_axis], red

    def write_pivot(self, path: str | Path, row_axis: str, col_axis: str) -> Path:
        rows, cols, mat = self.pivot(row_axis, col_axis)
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow([f"{row_axis}\\{col_axis}", *cols])
            for v, line in zip(rows, mat):
                w.writerow([v, *("" if np.isnan(x) else f"{x:.6f}" for x in line)])
        return path


def expand_grid(grid: dict[str, list[float]], base: LossWeights | None = None) -> list[tuple[tuple[int, ...], LossWeights]]:
    """Cartesian product of the named lambda axes; unnamed lambdas keep ``base`` values."""
    unknown = set(grid) - set(LAMBDA_NAMES)
    if unknown:
        raise ValueError(f"unknown grid axes {sorted(unknown)}")
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ValueError("grid must name at least one axis and every axis needs a value")
    base = base or LossWeights()
    names = list(grid)
    cells = []
    for index in itertools.product(*(range(len(grid[n])) for n in names)):
        values = {n: float(grid[n][i]) for n, i in zip(names, index)}
        cells.append((index, replace(base, **values)))
    return cells


def grid_search(
    dataset: list[SourcePair],
    grid: dict[str, list[float]],
    probe_epochs: int = 2,
    base: TrainConfig | None = None,
    eval_pairs: list[SourcePair] | None = None,
    holdout: float = 0.25,
    progress=None,
) -> GridResult:
    """Train every lambda combination from the same seed and score it on held-out pairs."""
    base = base or TrainConfig()
    if eval_pairs is None:
        train_pairs, eval_pairs = split_holdout(dataset, holdout)
    else:
        train_pairs = dataset
    cells = expand_grid(grid, base.loss_weights)
    result = GridResult(axes={k: [float(v) for v in grid[k]] for k in grid}, rows=[])
    for n, (index, weights) in enumerate(cells):
        row = {"index": list(index), **weights.to_dict(), "error": None}
        try:
            cfg = replace(base, loss_weights=weights, epochs=probe_epochs)
            ckpt, _ = train(train_pairs, cfg)
            rep = evaluate_model(ckpt.build(), eval_pairs, cfg.mode, levels=cfg.levels)
            row.update({"VIF": rep.vif_total, "Qabf": rep.qabf, "SSIM": rep.ssim_total,
                        "EN": rep.en, "MI": rep.mi_total, "reward": rep.reward})
            if not math.isfinite(rep.reward):
                raise RuntimeError("non-finite reward")
        except Exception as exc:  # a failed cell is recorded, the search goes on
            logger.warning("grid cell %s failed: %s", index, exc)
            row["error"] = f"{type(exc).__name__}: {exc}"
            result.failures.append(row)
        result.rows.append(row)
        if progress is not None:
            progress(n + 1, len(cells), row)
    return result


# --------------------------------------------------------------------------
# scaling study


def _latency_ms(net: GuidanceNet, pairs: list[SourcePair], batch_size: int, levels: int, repeats: int = 3) -> float:
    """Best-of-``repeats`` wall time for one batched guided fusion of ``pairs[:batch_size]``."""
    batch = pairs[:batch_size]
    fuse_batch(batch, net, "guided", batch_size, levels)  # warm-up
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fuse_batch(batch, net, "guided", batch_size, levels)
        best = min(best, time.perf_counter() - t0)
    return 1e3 * best


def scaling_study(
    dataset: list[SourcePair],
    presets: list[NetConfig],
    epochs_list: list[int],
    eval_pairs: list[SourcePair] | None = None,
    base: TrainConfig | None = None,
    threshold: float | None = None,
    latency_batch: int = 16,
) -> dict:
    """Train each preset, evaluate at the requested epochs and time batched inference.

    The convergence check asks whether the largest preset reaches ``threshold``
    (by default the smallest preset's best recorded reward) in strictly fewer
    epochs than the smallest preset needed.
    """
    if len(presets) < 2:
        raise ValueError("a scaling study needs at least two presets")
    base = base or TrainConfig()
    if eval_pairs is None:
        dataset, eval_pairs = split_holdout(dataset)
    if isinstance(epochs_list, int):
        epochs_list = [epochs_list] * len(presets)
    if len(epochs_list) != len(presets):
        raise ValueError("epochs_list needs one entry per preset")
    runs = []
    for preset, n_epochs in zip(presets, epochs_list):
        entry = {"config": asdict(preset), "params": param_count(preset), "epochs": n_epochs, "records": []}
        try:
            cfg = replace(base, net=preset, epochs=n_epochs)
            t0 = time.perf_counter()

            def snapshot(epoch, net, log, entry=entry, t0=t0):
                rep = evaluate_model(net, eval_pairs, cfg.mode, levels=cfg.levels)
                entry["records"].append({
                    "epoch": epoch,
                    "train_s": sum(e["wall_s"] for e in log.epochs),
                    "VIF": rep.vif_total, "Qabf": rep.qabf, "SSIM": rep.ssim_total,
                    "EN": rep.en, "MI": rep.mi_total, "reward": rep.reward,
                })
                net.train()

            ckpt, _ = train(dataset, cfg, on_epoch=snapshot)
            entry["latency_ms"] = _latency_ms(ckpt.build(), eval_pairs + dataset, latency_batch, cfg.levels)
            entry["latency_batch"] = min(latency_batch, len(eval_pairs) + len(dataset))
        except Exception as exc:
            logger.warning("preset %s failed: %s", preset, exc)
            entry["error"] = f"{type(exc).__name__}: {exc}"
        runs.append(entry)

    ok = [r for r in runs if "error" not in r and r["records"]]
    report = {"runs": runs, "threshold": None, "larger_converges_faster": None}
    if len(ok) >= 2:
        small = min(ok, key=lambda r: r["params"])
        large = max(ok, key=lambda r: r["params"])
        best_small = max(small["records"], key=lambda r: r["reward"])
        thr = best_small["reward"] if threshold is None else threshold

        def first_epoch(run):
            hits = [r["epoch"] for r in run["records"] if r["reward"] >= thr]
            return min(hits) if hits else None

        e_small, e_large = first_epoch(small), first_epoch(large)
        report.update({
            "threshold": thr,
            "smallest": small["params"],
            "largest": large["params"],
            "epochs_to_threshold": {"smallest": e_small, "largest": e_large},
            "larger_converges_faster": e_large is not None and (e_small is None or e_large < e_small),
            "latency_ms": {"smallest": small.get("latency_ms"), "largest": large.get("latency_ms")},
        })
    return report
