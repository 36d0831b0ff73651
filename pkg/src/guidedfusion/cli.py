"""``guidedfusion`` command-line entry point.

Exit codes: 0 all outputs written, 2 usage or configuration error, 3 a stage
failed, 4 some items failed while the rest were written.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import torch

from . import bench, metrics, synthetic, trainer
from .config import DEFAULTS, ConfigError, RunConfig, load_file, resolve
from .engine import FusionResult, fuse_batch, write_outputs
from .image import (
    IMAGE_SUFFIXES,
    DatasetError,
    InvalidImageError,
    LoadReport,
    SourcePair,
    as_infrared,
    as_visible,
    load_image,
    load_pair_dataset,
    pad_reflect,
    rgb_to_ycbcr,
    save_image,
    write_pair_dataset,
)
from .losses import LAMBDA_NAMES
from .net import CheckpointError, NetConfig, init_weights, load_checkpoint, save_checkpoint
from .pyramid import as_batch, build_pyramid, classical_fuse, heuristic_ir_weight, pyramid_mosaic

log = logging.getLogger("guidedfusion")

EXIT_OK, EXIT_USAGE, EXIT_STAGE, EXIT_PARTIAL = 0, 2, 3, 4
RULES = {"laplacian": "laplacian_default", "heuristic": "heuristic_ir_weight"}


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


def _csv_floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _csv_ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _csv_names(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _grid_arg(text: str) -> dict[str, list[float]]:
    """``lambda_max=0.5,1;lambda_grad=1,2`` -> axis mapping."""
    grid = {}
    for part in text.split(";"):
        if not part.strip():
            continue
        name, _, values = part.partition("=")
        if not values:
            raise argparse.ArgumentTypeError(f"grid axis needs name=v1,v2,...: {part!r}")
        grid[name.strip()] = _csv_floats(values)
    return grid


def _add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="dataset root with vi/ and ir/")
    p.add_argument("--preset", choices=["small", "medium", "large"])
    p.add_argument("--base-width", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--norm", choices=["none", "batch", "instance"])
    p.add_argument("--activation", choices=["relu", "leaky"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--precision", choices=["full", "reduced"])
    p.add_argument("--mode", choices=["guided", "direct"])
    p.add_argument("--levels", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--cosine", action="store_true", default=None)
    for name in LAMBDA_NAMES:
        p.add_argument("--" + name.replace("_", "-"), type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="guidedfusion", description="Guided pyramid image fusion toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML file; flags override its values")
        p.add_argument("--out", help="output directory")
        return p

    p = command("train", "train the guidance network")
    _add_training_flags(p)

    p = command("fuse", "fuse pairs with a checkpoint or a classical rule")
    p.add_argument("--data", help="dataset root with vi/ and ir/")
    p.add_argument("--vis", help="single visible image")
    p.add_argument("--ir", help="single infrared image")
    p.add_argument("--checkpoint")
    p.add_argument("--rule", choices=sorted(RULES))
    p.add_argument("--mode", choices=["guided", "direct"])
    p.add_argument("--batch", type=int)
    p.add_argument("--levels", type=int)
    p.add_argument("--export-pyramid", action="store_true", default=None)

    p = command("eval", "score fused images against their sources")
    p.add_argument("--fused", help="directory of fused images")
    p.add_argument("--data", help="dataset root with vi/ and ir/")
    p.add_argument("--reward", action="store_true", default=None)

    p = command("grid-search", "loss-weight grid search")
    _add_training_flags(p)
    p.add_argument("--probe-epochs", type=int)
    p.add_argument("--holdout", type=float)
    p.add_argument("--eval-data")
    p.add_argument("--grid", type=_grid_arg, help="e.g. 'lambda_max=0.5,1;lambda_grad=1,2'")
    p.add_argument("--pivot", type=_csv_names, help="two lambda axes, e.g. lambda_ssim,lambda_grad")

    p = command("bench", "training throughput and inference latency")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--preset", choices=["small", "medium", "large"])
    p.add_argument("--batch", type=int)
    p.add_argument("--train-batch", type=int)
    p.add_argument("--warm-steps", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--levels", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--presets", type=_csv_names)
    p.add_argument("--seed", type=int)

    p = command("scaling-study", "train several presets and compare convergence and latency")
    _add_training_flags(p)
    p.add_argument("--presets", type=_csv_names)
    p.add_argument("--epochs-list", type=_csv_ints)
    p.add_argument("--holdout", type=float)
    p.add_argument("--eval-data")
    p.add_argument("--threshold", type=float)
    p.add_argument("--latency-batch", type=int)

    p = command("synth", "write a procedural visible/infrared dataset")
    p.add_argument("--count", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--seed", type=int)
    return parser


def _resolve(args: argparse.Namespace) -> RunConfig:
    keys = DEFAULTS[args.command]
    flags = {k: v for k, v in vars(args).items() if k in keys}
    file_values = load_file(args.config, args.command) if args.config else {}
    return resolve(args.command, file_values, flags)


def _require(rc: RunConfig, *keys: str) -> None:
    missing = [k for k in keys if not rc.get(k)]
    if missing:
        raise ConfigError(f"missing required setting(s): {', '.join('--' + k.replace('_', '-') for k in missing)}")


def _load_dataset(root: str, stage: str = "data") -> list[SourcePair]:
    if not Path(root).is_dir():
        raise ConfigError(f"dataset path does not exist: {root}")
    report = LoadReport()
    try:
        pairs = load_pair_dataset(root, report)
    except DatasetError as exc:
        raise StageError(stage, str(exc)) from exc
    return pairs


def _load_net(path: str):
    try:
        return load_checkpoint(path)
    except (OSError, CheckpointError, ValueError, KeyError) as exc:
        raise StageError("checkpoint", f"{path}: {exc}") from exc


# --------------------------------------------------------------------------


def cmd_train(rc: RunConfig) -> int:
    _require(rc, "data")
    pairs = _load_dataset(rc["data"])
    out = rc.output_dir()
    rc.write(out)
    cfg = rc.train_config(checkpoint_dir=str(out / "checkpoints"))
    try:
        ckpt, tlog = trainer.train(pairs, cfg)
    except trainer.TrainingError as exc:
        if exc.last_checkpoint is not None:
            save_checkpoint(out / "checkpoints" / "last_good.ckpt", exc.last_checkpoint)
        raise StageError("train", str(exc)) from exc
    save_checkpoint(out / "model.ckpt", ckpt)
    tlog.write(out)
    last = tlog.steps[-1] if tlog.steps else {}
    print(f"trained {len(tlog.steps)} steps over {len(tlog.epochs)} epochs; final loss {last.get('total', float('nan')):.5f}")
    print(f"checkpoint: {out / 'model.ckpt'}")
    return EXIT_OK


def _fuse_inputs(rc: RunConfig) -> list[SourcePair]:
    if rc.get("data"):
        return _load_dataset(rc["data"])
    if rc.get("vis") and rc.get("ir"):
        try:
            vis = as_visible(load_image(rc["vis"]))
            ir = as_infrared(load_image(rc["ir"]))
            return [SourcePair(vis=vis, ir=ir, id=Path(rc["vis"]).stem)]
        except (InvalidImageError, ValueError) as exc:
            raise StageError("data", str(exc)) from exc
    raise ConfigError("fuse needs --data or both --vis and --ir")


def _classical_results(pairs: list[SourcePair], rule: str, levels: int) -> list[FusionResult]:
    results = []
    for b, pair in enumerate(pairs):
        t0 = time.perf_counter()
        try:
            fused = classical_fuse(pair, rule, levels)
            guidance = None
            if rule == "heuristic_ir_weight":
                guidance = heuristic_ir_weight(torch.from_numpy(pair.ir)[None])[0].numpy()
            ms = 1e3 * (time.perf_counter() - t0)
            timing = {"batch": b, "batch_size": 1, "height": pair.shape[0], "width": pair.shape[1],
                      "prepare_ms": 0.0, "network_ms": 0.0, "pyramid_ms": ms, "reconstruct_ms": 0.0, "total_ms": ms}
            results.append(FusionResult(pair.id, fused, None, guidance, None, timing))
        except Exception as exc:
            results.append(FusionResult(pair.id, None, None, None, None, {"batch": b}, error=str(exc)))
    return results


def cmd_fuse(rc: RunConfig) -> int:
    if bool(rc.get("checkpoint")) == bool(rc.get("rule")):
        raise ConfigError("fuse needs exactly one of --checkpoint or --rule")
    pairs = _fuse_inputs(rc)
    out = rc.output_dir()
    rc.write(out)
    levels = int(rc["levels"])
    if rc.get("rule"):
        results = _classical_results(pairs, RULES[rc["rule"]], levels)
    else:
        net = _load_net(rc["checkpoint"]).build()
        results = fuse_batch(pairs, net, rc["mode"], int(rc["batch"]), levels)
    write_outputs(out, results)
    if rc.get("export_pyramid"):
        for pair in pairs:
            y, _ = pad_reflect(rgb_to_ycbcr(pair.vis).y, 1 << levels)
            ir, _ = pad_reflect(pair.ir, 1 << levels)
            for tag, plane in (("vi", y), ("ir", ir)):
                mosaic = pyramid_mosaic(build_pyramid(as_batch(torch.from_numpy(plane)), levels))
                save_image(out / "pyramid" / f"{pair.id}_{tag}.png", mosaic)
    failed = [r for r in results if not r.ok]
    for r in failed:
        print(f"guidedfusion fuse: [{r.id}] {r.error}", file=sys.stderr)
    print(f"fused {len(results) - len(failed)}/{len(results)} pairs into {out}")
    return EXIT_PARTIAL if failed else EXIT_OK


def _index_images(d: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def cmd_eval(rc: RunConfig) -> int:
    _require(rc, "fused", "data")
    fused_dir = Path(rc["fused"])
    if not fused_dir.is_dir():
        raise ConfigError(f"fused directory does not exist: {fused_dir}")
    fused_files = _index_images(fused_dir)
    if not fused_files:
        raise StageError("eval", f"no fused images in {fused_dir}")
    pairs = {p.id: p for p in _load_dataset(rc["data"])}
    rows, vis_rows, ir_rows, problems = [], [], [], []
    for stem, path in fused_files.items():
        pair = pairs.get(stem)
        if pair is None:
            problems.append((stem, "no matching source pair"))
            continue
        try:
            rows.append((stem, metrics.evaluate(pair, load_image(path))))
        except (InvalidImageError, ValueError) as exc:
            problems.append((stem, str(exc)))
            continue
        vis_rows.append(metrics.evaluate(pair, pair.vis))
        ir_rows.append(metrics.evaluate(pair, pair.ir))
    problems += [(stem, "no fused image") for stem in sorted(set(pairs) - set(fused_files))]
    if not rows:
        for stem, msg in problems:
            print(f"guidedfusion eval: [{stem}] {msg}", file=sys.stderr)
        raise StageError("eval", "no fused image could be matched to a source pair")
    table = rows + [
        ("MEAN", metrics.mean_report([r for _, r in rows])),
        ("VisAsFused", metrics.mean_report(vis_rows)),
        ("IrAsFused", metrics.mean_report(ir_rows)),
    ]
    out = rc.output_dir()
    rc.write(out)
    path = metrics.write_metrics_csv(out / "metrics.csv", table, include_reward=bool(rc["reward"]))
    if problems:
        with open(out / "mismatches.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "problem"])
            w.writerows(problems)
        for stem, msg in problems:
            print(f"guidedfusion eval: [{stem}] {msg}", file=sys.stderr)
    for name, rep in table[-3:]:
        cells = ", ".join(f"{k} {v:.4f}" for k, v in rep.row().items() if rc["reward"] or k != "reward")
        print(f"{name}: {cells}")
    print(f"metrics: {path}")
    return EXIT_PARTIAL if problems else EXIT_OK


def cmd_grid_search(rc: RunConfig) -> int:
    _require(rc, "data")
    pairs = _load_dataset(rc["data"])
    eval_pairs = _load_dataset(rc["eval_data"]) if rc.get("eval_data") else None
    grid = rc["grid"]
    if not isinstance(grid, dict):
        raise ConfigError("grid must map lambda names to value lists")
    pivot = list(rc["pivot"])
    if len(pivot) != 2 or not set(pivot) <= set(grid):
        raise ConfigError(f"pivot needs two of the grid axes {sorted(grid)}, got {pivot}")
    out = rc.output_dir()
    rc.write(out)
    base = rc.train_config()

    def progress(done, total, row):
        status = row["error"] or f"reward {row['reward']:.4f}"
        log.info("cell %d/%d %s", done, total, status)

    try:
        result = trainer.grid_search(pairs, grid, int(rc["probe_epochs"]), base, eval_pairs,
                                     float(rc["holdout"]), progress)
    except ValueError as exc:
        raise StageError("grid", str(exc)) from exc
    result.write_csv(out / "grid.csv")
    result.write_pivot(out / f"pivot_{pivot[0]}_{pivot[1]}.csv", pivot[0], pivot[1])
    region = result.high_region(0.02)
    names = list(result.axes)

    def label(ix):
        return {n: result.axes[n][i] for n, i in zip(names, ix)}

    summary = {
        "cells": len(result.rows),
        "failed": len(result.failures),
        "best_reward": region["best"],
        "threshold": region.get("threshold"),
        "high_cells": [label(ix) for ix in region["cells"]],
        "contiguous": region["contiguous"],
    }
    with open(out / "high_region.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
    print(f"{len(result.rows)} cells, {len(result.failures)} failed; best reward {region['best']}")
    print(f"{len(region['cells'])} cells within 2% of best; contiguous: {region['contiguous']}")
    return EXIT_PARTIAL if result.failures else EXIT_OK


def cmd_bench(rc: RunConfig) -> int:
    out = rc.output_dir()
    if rc.get("data"):
        pairs = _load_dataset(rc["data"])
    else:
        pairs = synthetic.make_dataset(int(rc["batch"]), seed=int(rc["seed"]))
        log.info("no --data given; benchmarking %d procedural pairs", len(pairs))
    if rc.get("checkpoint"):
        net = _load_net(rc["checkpoint"]).build()
    else:
        net = init_weights(NetConfig.preset(rc["preset"]), int(rc["seed"]))
    rc.write(out)
    levels = int(rc["levels"])
    subset = pairs[: int(rc["batch"])]
    report = {
        "training": bench.bench_training(subset, net, int(rc["train_batch"]), int(rc["warm_steps"]),
                                         int(rc["steps"]), levels),
        "inference_bs1": bench.bench_inference(subset, net, 1, int(rc["repeats"]), levels),
        "inference": bench.bench_inference(subset, net, int(rc["batch"]), int(rc["repeats"]), levels),
    }
    if rc.get("presets"):
        presets = {name: NetConfig.preset(name) for name in rc["presets"]}
        report["presets"] = bench.bench_presets(subset, presets, int(rc["batch"]), int(rc["repeats"]), levels)
        report["presets_ordered"] = bench.latency_ordered(report["presets"])
    report["reference_only"] = bench.REFERENCE_ANCHORS
    with open(out / "bench.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
    print(bench.format_report(report))
    return EXIT_OK


def cmd_scaling_study(rc: RunConfig) -> int:
    _require(rc, "data")
    pairs = _load_dataset(rc["data"])
    eval_pairs = _load_dataset(rc["eval_data"]) if rc.get("eval_data") else None
    presets = [rc.net_config(name) for name in rc["presets"]]
    epochs = rc["epochs_list"]
    out = rc.output_dir()
    rc.write(out)
    try:
        report = trainer.scaling_study(pairs, presets, epochs, eval_pairs, rc.train_config(),
                                       rc.get("threshold"), int(rc["latency_batch"]))
    except ValueError as exc:
        raise StageError("scaling", str(exc)) from exc
    with open(out / "scaling.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
    with open(out / "scaling.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["preset", "params", "epoch", "train_s", "VIF", "Qabf", "SSIM", "EN", "MI", "reward", "latency_ms"])
        for name, run in zip(rc["presets"], report["runs"]):
            for r in run["records"]:
                w.writerow([name, run["params"], r["epoch"], f"{r['train_s']:.3f}",
                            *(f"{r[k]:.6f}" for k in ("VIF", "Qabf", "SSIM", "EN", "MI", "reward")),
                            f"{run.get('latency_ms', float('nan')):.3f}"])
    for name, run in zip(rc["presets"], report["runs"]):
        if "error" in run:
            print(f"{name}: failed ({run['error']})")
        else:
            rewards = ", ".join(f"{r['reward']:.4f}" for r in run["records"])
            print(f"{name} ({run['params']:,} params): rewards by epoch [{rewards}], latency {run['latency_ms']:.1f} ms")
    print(f"largest preset reaches threshold sooner: {report['larger_converges_faster']}")
    failed = any("error" in r for r in report["runs"])
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_synth(rc: RunConfig) -> int:
    out = rc.output_dir()
    pairs = synthetic.make_dataset(int(rc["count"]), int(rc["height"]), int(rc["width"]), int(rc["seed"]))
    write_pair_dataset(out, pairs)
    rc.write(out)
    print(f"wrote {len(pairs)} pairs to {out}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "fuse": cmd_fuse,
    "eval": cmd_eval,
    "grid-search": cmd_grid_search,
    "bench": cmd_bench,
    "scaling-study": cmd_scaling_study,
    "synth": cmd_synth,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = _resolve(args)
        return COMMANDS[args.command](rc)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"guidedfusion {args.command}: [config] {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"guidedfusion {args.command}: [{exc.stage}] {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"guidedfusion {args.command}: [{args.command}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
