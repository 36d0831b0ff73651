"""Time the metric hot kernels under the numba and numpy backends.

    python3 benchmarks/bench_kernels.py [--size 480x640] [--repeats 5]

Also times a full five-metric evaluation of one pair, which is what the grid
search and scaling study spend their metric time on.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from guidedfusion import _kernels, metrics


def best_of(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return 1e3 * best


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", default="480x640")
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    h, w = (int(v) for v in args.size.split("x"))

    rng = np.random.default_rng(0)
    a, b, f = (rng.random((h, w)) for _ in range(3))
    qa, qf = metrics.to_uint8(a), metrics.to_uint8(f)
    g = metrics.gaussian_window(11, 1.5)[5]
    cases = {
        "histogram256": lambda: _kernels.histogram256(qa),
        "joint_histogram256": lambda: _kernels.joint_histogram256(qa, qf),
        "filter_valid 11-tap": lambda: _kernels.filter_valid(a, g),
        "sobel_zero": lambda: _kernels.sobel_zero(a),
        "qabf_sums": lambda: _kernels.qabf_sums(255 * a, 255 * b, 255 * f),
        "evaluate_planes (all metrics)": lambda: metrics.evaluate_planes(a[None], b[None], f[None]),
    }

    available = ["numpy"]
    try:
        _kernels.set_backend("numba")
        _kernels.warmup()
        available.insert(0, "numba")
    except (ImportError, ValueError, RuntimeError):
        print("numba unavailable; timing the numpy backend only")

    timings = {}
    for backend in available:
        _kernels.set_backend(backend)
        for name, fn in cases.items():
            fn()  # compile / cache warm-up outside the timed runs
            timings[(backend, name)] = best_of(fn, args.repeats)

    print(f"image {h}x{w}, best of {args.repeats}")
    head = f"{'kernel':32s}" + "".join(f"{b:>12s}" for b in available)
    if len(available) == 2:
        head += f"{'speed-up':>12s}"
    print(head)
    for name in cases:
        row = f"{name:32s}" + "".join(f"{timings[(b, name)]:10.2f}ms" for b in available)
        if len(available) == 2:
            row += f"{timings[('numpy', name)] / timings[('numba', name)]:11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
