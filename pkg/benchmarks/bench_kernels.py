"""Benchmark the numba hot kernels against the pure-numpy fallbacks.

Runs each kernel on SuperPoint-representative shapes and prints a table
with per-call times and the numba speedup.  Use --size full for the
640x480 first-block shapes (slow on the numpy integer path).

    python3 benchmarks/bench_kernels.py [--size small|full] [--repeat N]
"""

import argparse
import time

import numpy as np

from qsp import backend, kernels


def timeit(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--size", choices=["small", "full"], default="small")
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    if not backend.use_numba():
        raise SystemExit("numba backend unavailable; nothing to compare "
                         "(unset QSP_BACKEND or install numba)")
    from qsp import kernels_numba as nb

    h, w = (480, 640) if args.size == "full" else (120, 160)
    rng = np.random.default_rng(0)

    xf = rng.random((64, h, w))
    wf = rng.normal(size=(64, 64, 3, 3))
    bf = rng.normal(size=64)
    xi = rng.integers(0, 255, size=(64, h, w)).astype(np.int64)
    wi = rng.integers(-127, 128, size=(64, 64, 3, 3)).astype(np.int64)
    bi = rng.integers(-100, 100, size=64).astype(np.int64)
    thr = np.sort(rng.normal(0, 50, size=(64, 255)), axis=1)
    thr_i = np.sort(rng.integers(-(2**20), 2**20, size=(64, 255)), axis=1)
    n_pts = 5000
    xs = rng.integers(0, w, n_pts).astype(np.float64)
    ys = rng.integers(0, h, n_pts).astype(np.float64)

    cases = [
        ("conv2d f64 (64->64 3x3)",
         lambda: kernels.conv2d_f64_np(xf, wf, bf, 1),
         lambda: nb.conv2d_f64_nb(xf, wf, bf, 1)),
        ("conv2d i64 (64->64 3x3)",
         lambda: kernels.conv2d_i64_np(xi, wi, bi, 1),
         lambda: nb.conv2d_i64_nb(xi, wi, bi, 1)),
        ("thresholds f64 (255 levels)",
         lambda: kernels.threshold_count_np(xf, thr),
         lambda: nb.threshold_count_nb(xf.reshape(64, -1).copy(), thr.copy())),
        ("thresholds i64 (255 levels)",
         lambda: kernels.threshold_count_np(xi, thr_i),
         lambda: nb.threshold_count_nb(xi.reshape(64, -1).copy(),
                                       np.ascontiguousarray(thr_i))),
        ("maxpool2x2 i64",
         lambda: kernels.maxpool2x2_np(xi),
         lambda: nb.maxpool2x2_nb(xi)),
        (f"nms greedy ({n_pts} pts, r=4)",
         lambda: kernels.nms_greedy_np(xs, ys, 4),
         lambda: nb.nms_greedy_nb(xs, ys, 4.0)),
    ]

    print(f"shape preset: {args.size} ({w}x{h}), best of {args.repeat}")
    print(f"{'kernel':32s} {'numpy':>10s} {'numba':>10s} {'speedup':>8s}")
    for name, f_np, f_nb in cases:
        f_nb()  # JIT warmup
        t_np = timeit(f_np, args.repeat)
        t_nb = timeit(f_nb, args.repeat)
        print(f"{name:32s} {t_np * 1e3:9.2f}ms {t_nb * 1e3:9.2f}ms {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
