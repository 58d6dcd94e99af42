"""Time the compiled kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N] [--securities S] [--months T]

Each kernel runs on identical inputs under every available backend; the
script prints the best wall time per backend, the speedup, and the max
absolute difference between backends.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from assetpricing import kernels


def _inputs(S: int, T: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    rm = rng.normal(0.01, 0.05, T)
    R = 0.002 + rng.uniform(0.5, 1.5, (S, 1)) * rm + rng.normal(0, 0.08, (S, T))
    R[rng.uniform(size=(S, T)) < 0.05] = np.nan
    W = rng.lognormal(4, 1, (S, T))
    G = rng.integers(-1, 25, (S, T)).astype(np.int32)
    state = np.array([1, 2, 3, 4], dtype=np.uint64)
    return R, rm, W, G, state


def _max_diff(a, b) -> float:
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    out = 0.0
    for x, y in zip(a, b):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        both = np.isfinite(x) & np.isfinite(y)
        if not np.array_equal(np.isfinite(x), np.isfinite(y)):
            return float("inf")
        if both.any():
            out = max(out, float(np.max(np.abs(x[both] - y[both]))))
    return out


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--securities", type=int, default=2000)
    ap.add_argument("--months", type=int, default=240)
    args = ap.parse_args(argv)

    R, rm, W, G, state = _inputs(args.securities, args.months)
    cases = {
        "market_model_batch": lambda b: kernels.market_model_batch(R, rm, 24, backend=b),
        "grouped_sums": lambda b: kernels.grouped_sums(R, W, G, 25, backend=b),
        # the state advances in place, so every call gets a fresh copy
        "xoshiro_fill(1e6)": lambda b: kernels.xoshiro_fill(state.copy(), 1_000_000, backend=b),
    }
    backends = kernels.available_backends()
    print(f"backends: {', '.join(backends)} (default {kernels.BACKEND}); panel {args.securities} x {args.months}")
    print(f"{'kernel':<22}" + "".join(f"{b + ' ms':>12}" for b in backends) + f"{'speedup':>10}{'max diff':>12}")
    for name, fn in cases.items():
        times, results = {}, {}
        for b in backends:
            results[b] = fn(b)
            times[b] = min(timeit.repeat(lambda: fn(b), number=1, repeat=args.repeat)) * 1e3
        speed = times["python"] / times["cython"] if {"python", "cython"} <= set(times) else float("nan")
        diff = _max_diff(results[backends[0]], results[backends[-1]])
        print(f"{name:<22}" + "".join(f"{times[b]:>12.2f}" for b in backends) + f"{speed:>9.1f}x{diff:>12.2e}")


if __name__ == "__main__":
    main()
