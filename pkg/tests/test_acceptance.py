"""Acceptance gate: one test per criterion, each at its stated tolerance.

Run ``python3 -m pytest tests/test_acceptance.py`` (or this file directly);
a pass/fail line per criterion is printed in the terminal summary.
"""
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from guidedfusion import losses, metrics, synthetic, trainer
from guidedfusion.cli import main as cli_main
from guidedfusion.engine import fuse, fuse_luminance
from guidedfusion.image import SourcePair, crop_back, load_pair_dataset, luminance, pad_reflect
from guidedfusion.net import NetConfig, init_weights
from guidedfusion.pyramid import build_pyramid, classical_fuse, collapse_pyramid
from guidedfusion.trainer import TrainConfig

MSRS_ENV = "GUIDEDFUSION_MSRS"


@pytest.fixture(scope="module")
def desk_train():
    return synthetic.make_dataset(16, 64, 80, seed=1)


@pytest.fixture(scope="module")
def desk_held():
    return synthetic.make_dataset(6, 64, 80, seed=2)


def test_c01_pyramid_exactness():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        K = int(rng.integers(1, 5))
        h, w = (int(v) for v in rng.integers(16, 513, size=2))
        x = rng.random((1, h, w)).astype(np.float32)
        padded, rec = pad_reflect(x, 1 << K)
        back = crop_back(collapse_pyramid(build_pyramid(torch.from_numpy(padded), K))[0].numpy(), rec)
        worst = max(worst, float(np.abs(back - x).max()))
    elapsed = time.perf_counter() - t0
    assert worst < 1e-5, f"max error {worst:.3g}"
    assert elapsed < 60, f"took {elapsed:.1f}s"


sizes = st.tuples(st.integers(8, 40), st.integers(8, 40))


@settings(max_examples=30, deadline=None)
@given(sizes, st.integers(0, 2**31 - 1))
def test_c02_endpoint_fidelity(size, seed):
    rng = np.random.default_rng(seed)
    vis = rng.random((3, *size)).astype(np.float32)
    ir = rng.random((1, *size)).astype(np.float32)
    pair = SourcePair(vis, ir, "p")
    assert np.abs(fuse(pair, None, mu_override=0.0).fused - vis).max() < 1e-4
    # mu = 1 hands the infrared plane to the luminance channel; chroma stays visible
    assert np.abs(fuse(pair, None, mu_override=1.0).fused_y - ir).max() < 1e-4
    gray = SourcePair(np.repeat(luminance(vis), 3, axis=0), ir, "g")
    assert np.abs(fuse(gray, None, mu_override=1.0).fused - np.repeat(ir, 3, axis=0)).max() < 1e-4
    same = SourcePair(vis, luminance(vis), "s")
    assert np.abs(fuse(same, None, mu_override=rng.random(size)).fused - vis).max() < 1e-4


def test_c03_gradient_integrity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    net = init_weights(NetConfig(base_width=4), seed=0).double()
    with torch.no_grad():
        # undo the small-head init so mu spans [0, 1]; with mu near 0.5 everywhere the
        # fused plane sits between the sources and the consistency term is flat
        net.head.weight.mul_(30)
    vi = torch.from_numpy(rng.random((1, 1, 16, 16)))
    ir = torch.from_numpy(rng.random((1, 1, 16, 16)))
    params = dict(net.named_parameters())
    picks = [(n, int(j)) for n, p in params.items() for j in rng.choice(p.numel(), min(3, p.numel()), replace=False)]

    def terms():
        f_y, _ = fuse_luminance(net, vi, ir, "guided", 4)
        b = losses.total_loss(f_y, vi, ir)
        return {"total": b.total, "l_max": b.l_max, "l_grad": b.l_grad, "l_ssim": b.l_ssim, "l_consist": b.l_consist}

    errors = {}
    for key in ("total", "l_max", "l_grad", "l_ssim", "l_consist"):
        net.zero_grad()
        terms()[key].backward()
        analytic = np.array([params[n].grad.view(-1)[j].item() for n, j in picks])
        if key == "total":
            stages = {s: any(p.grad is not None and p.grad.abs().sum() > 0 for p in m.parameters())
                      for s, m in net.stages().items()}
            assert all(stages.values()), f"no gradient reaches {[s for s, ok in stages.items() if not ok]}"
        numeric = []
        h = 1e-6
        with torch.no_grad():
            for n, j in picks:
                flat = params[n].view(-1)
                old = flat[j].item()
                flat[j] = old + h
                up = terms()[key].item()
                flat[j] = old - h
                down = terms()[key].item()
                flat[j] = old
                numeric.append((up - down) / (2 * h))
        numeric = np.array(numeric)
        errors[key] = np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric)
    assert errors["total"] < 1e-2, errors
    assert all(errors[k] < 1e-3 for k in errors if k != "total"), errors
    assert time.perf_counter() - t0 < 300


def test_c04_loss_terms_match_loop_references():
    rng = np.random.default_rng(404)
    fns = {"max": losses.loss_max, "grad": losses.loss_grad, "ssim": losses.loss_ssim, "consist": losses.loss_consist}
    worst = {k: 0.0 for k in fns}
    for _ in range(100):
        h, w = (int(v) for v in rng.integers(11, 33, size=2))
        f, vi, ir = rng.random((3, h, w))
        tens = [torch.from_numpy(a)[None, None] for a in (f, vi, ir)]
        for name, fn in fns.items():
            ref = getattr(oracles, f"loss_{name}")(f, vi, ir)
            worst[name] = max(worst[name], abs(float(fn(*tens)) - ref))
    assert all(v < 1e-6 for v in worst.values()), worst


def test_c05_metric_sanity():
    rng = np.random.default_rng(5)
    x = rng.random((48, 56))
    a, b, f = rng.random((3, 40, 40))
    assert metrics.entropy(np.full((20, 20), 0.3)) == 0.0
    assert metrics.entropy(np.arange(256, dtype=np.uint8).reshape(16, 16)) == 8.0
    assert abs(metrics.mutual_information(x, x) - metrics.entropy(x)) < 1e-9
    assert metrics.ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    assert abs(metrics.vif(x, x) - 1.0) < 1e-6
    assert metrics.qabf(a, b, f) == metrics.qabf(b, a, f)
    rep = metrics.evaluate_planes(x, x, x)
    assert rep.ssim_total == pytest.approx(2.0, abs=1e-12)
    assert abs(rep.vif_total - 2.0) < 1e-6


def _msrs_root():
    root = os.environ.get(MSRS_ENV)
    if not root or not Path(root).is_dir():
        pytest.skip(f"MSRS test set not on disk; set {MSRS_ENV} to a directory with vi/ and ir/ to run")
    return root


def test_c06_degenerate_rows_on_msrs():
    pairs = load_pair_dataset(_msrs_root())
    vis = metrics.mean_report([metrics.evaluate(p, p.vis) for p in pairs])
    ir = metrics.mean_report([metrics.evaluate(p, p.ir) for p in pairs])
    checks = {
        "VisAsFused EN": abs(vis.en - 6.596) <= 0.03,
        "VisAsFused Qabf": abs(vis.qabf - 0.650) <= 0.03,
        "VisAsFused MI": abs(vis.mi_total - 6.865) <= 0.1 * 6.865,
        "VisAsFused VIF": abs(vis.vif_total - 1.044) <= 0.1 * 1.044,
        "IrAsFused EN": abs(ir.en - 5.309) <= 0.03,
        "IrAsFused Qabf": abs(ir.qabf - 0.384) <= 0.03,
        "IrAsFused MI": abs(ir.mi_total - 5.668) <= 0.1 * 5.668,
        "IrAsFused VIF": abs(ir.vif_total - 1.028) <= 0.1 * 1.028,
    }
    assert all(checks.values()), {"vis": vis.row(), "ir": ir.row(), "failed": [k for k, v in checks.items() if not v]}


def test_c07_guided_beats_classical(desk_train, desk_held):
    cfg = TrainConfig(epochs=100, max_steps=160, batch_size=4, net=NetConfig.preset("medium"), seed=0)
    ckpt, log = trainer.train(desk_train, cfg)
    assert 50 <= len(log.steps) <= 200
    guided = trainer.evaluate_model(ckpt.build(), desk_held).reward
    classical = metrics.mean_report([metrics.evaluate(p, classical_fuse(p, "laplacian_default")) for p in desk_held]).reward
    assert guided > classical, f"guided {guided:.4f} vs laplacian {classical:.4f}"


def test_c08_determinism_and_convergence(desk_train):
    cfg = TrainConfig(epochs=10, max_steps=40, batch_size=4, net=NetConfig.preset("medium"), seed=3)
    a = trainer.train(desk_train, cfg)[1]
    b = trainer.train(desk_train, cfg)[1]
    assert np.abs(a.totals() - b.totals()).max() <= 1e-6
    ma = a.moving_average(10)
    assert ma[-1] < ma[0], f"moving average {ma[0]:.5f} -> {ma[-1]:.5f}"


def test_c09_scaling_ordering(desk_train, desk_held):
    presets = [NetConfig.preset(n) for n in ("small", "medium", "large")]
    rep = trainer.scaling_study(desk_train, presets, [6, 6, 6], eval_pairs=desk_held, base=TrainConfig(batch_size=4))
    assert rep["larger_converges_faster"], rep["epochs_to_threshold"]
    small, medium, large = rep["runs"]
    assert small["latency_ms"] < large["latency_ms"]
    # same ordering against the 0.6M-class preset's best epoch
    target = max(r["reward"] for r in medium["records"])
    reached = [r["epoch"] for r in large["records"] if r["reward"] >= target]
    assert reached and min(reached) < medium["epochs"], (target, large["records"])


def test_c10_bench_shows_local_and_reference_numbers(tmp_path, capsys, desk_train):
    from guidedfusion.image import write_pair_dataset

    data = write_pair_dataset(tmp_path / "data", desk_train[:4])
    code = cli_main(["bench", "--data", str(data), "--out", str(tmp_path / "b"), "--preset", "small",
                     "--batch", "4", "--warm-steps", "1", "--steps", "2", "--repeats", "1"])
    out = capsys.readouterr().out
    assert code == 0
    assert "img/s" in out and "reference only" in out
    assert "22.1" in out and "429.93" in out and "272.23" in out
    assert math.isfinite(float(out.split("training: ")[1].split(" img/s")[0]))


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
