"""Compare the compiled kernels against the numpy fallback.

Runs each backend on identical inputs, checks that their outputs agree,
and prints a timing table. Usage:

    python3 benchmarks/bench_kernels.py [--quick]

The compiled extension must have been built for its column to appear;
otherwise only the fallback is timed.
"""

import argparse
import importlib
import time

import numpy as np

from noiseplan._kernels import _fallback, n_params

try:
    _core = importlib.import_module("noiseplan._kernels._core")
except ImportError:
    _core = None


def _median_time(fn, reps):
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def _row(name, fn_fallback, fn_core, agree, reps):
    numpy_s = _median_time(fn_fallback, reps)
    if fn_core is None:
        print(f"{name:<34} {numpy_s * 1e3:>10.2f} {'-':>10} {'-':>8}")
        return
    core_s = _median_time(fn_core, reps)
    print(
        f"{name:<34} {numpy_s * 1e3:>10.2f} {core_s * 1e3:>10.2f} "
        f"{numpy_s / core_s:>7.1f}x  max|diff| {agree:.2e}"
    )


def bench_forward_batched(rng, calls, n, h1, h2, reps):
    """The planner's regime: thousands of small steering batches."""
    raw = rng.normal(0.0, 0.4, n_params(4, h1, h2))
    X = rng.uniform(-1.0, 1.0, (n, 4))

    def run(mod):
        total = 0.0
        for _ in range(calls):
            total += float(mod.mlp_forward(raw, X, h1, h2)[0])
        return total

    agree = 0.0
    fn_core = None
    if _core is not None:
        agree = float(np.abs(
            _core.mlp_forward(raw, X, h1, h2)
            - _fallback.mlp_forward(raw, X, h1, h2)
        ).max())
        fn_core = lambda: run(_core)
    _row(f"mlp_forward {calls} calls n={n}",
         lambda: run(_fallback), fn_core, agree, reps)


def bench_forward_bulk(rng, n, h1, h2, reps):
    """Certification's regime: one large batch, where BLAS should win."""
    raw = rng.normal(0.0, 0.4, n_params(4, h1, h2))
    X = rng.uniform(-1.0, 1.0, (n, 4))
    fn_core = None
    agree = 0.0
    if _core is not None:
        agree = float(np.abs(
            _core.mlp_forward(raw, X, h1, h2)
            - _fallback.mlp_forward(raw, X, h1, h2)
        ).max())
        fn_core = lambda: _core.mlp_forward(raw, X, h1, h2)
    _row(f"mlp_forward 1 call n={n}",
         lambda: _fallback.mlp_forward(raw, X, h1, h2), fn_core, agree, reps)


def bench_train(rng, n, epochs, h1, h2, reps):
    raw = rng.normal(0.0, 0.4, n_params(4, h1, h2))
    X = rng.uniform(-1.0, 1.0, (n, 4))
    t = rng.uniform(-1.0, 1.0, n)
    lr = 0.05
    fn_core = None
    agree = 0.0
    if _core is not None:
        out_c, _, _ = _core.mlp_train(raw, X, t, h1, h2, lr, epochs)
        out_np, _, _ = _fallback.mlp_train(raw, X, t, h1, h2, lr, epochs)
        agree = float(np.abs(out_c - out_np).max())
        fn_core = lambda: _core.mlp_train(raw, X, t, h1, h2, lr, epochs)
    _row(f"mlp_train n={n} epochs={epochs}",
         lambda: _fallback.mlp_train(raw, X, t, h1, h2, lr, epochs),
         fn_core, agree, reps)


def bench_nearest(rng, n, queries, reps):
    xs = rng.uniform(0.0, 2200.0, n)
    ys = rng.uniform(0.0, 2200.0, n)
    zs = rng.uniform(0.0, 450.0, n)
    thetas = rng.uniform(-np.pi, np.pi, n)
    qs = rng.uniform(0.0, 2200.0, (queries, 4))
    qs[:, 3] = rng.uniform(-np.pi, np.pi, queries)

    def run(mod):
        total = 0
        for q in qs:
            total += mod.nearest_state(xs, ys, zs, thetas, *q)
        return total

    agree = 0.0
    fn_core = None
    if _core is not None:
        agree = float(abs(run(_core) - run(_fallback)))
        fn_core = lambda: run(_core)
    _row(f"nearest_state n={n} q={queries}",
         lambda: run(_fallback), fn_core, agree, reps)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--quick", action="store_true",
                        help="smaller sizes and fewer repetitions")
    args = parser.parse_args()
    reps = 3 if args.quick else 7
    rng = np.random.default_rng(1234)

    if _core is None:
        print("compiled extension not available; timing the fallback only")
    print(f"{'kernel':<34} {'numpy ms':>10} {'cython ms':>10} {'speedup':>8}")
    bench_forward_batched(rng, 500 if args.quick else 5000, 20, 8, 8, reps)
    bench_forward_bulk(rng, 2000 if args.quick else 20000, 8, 8, reps)
    bench_train(rng, 256, 100 if args.quick else 1000, 8, 8, reps)
    bench_nearest(rng, 3000, 200 if args.quick else 2000, reps)


if __name__ == "__main__":
    main()
