"""Benchmark the jitted kernels against the pure-numpy fallbacks.

Times the retrieval score scan, the cross-attention core, and the
negative-attention scorer at datastore-like sizes and prints one row per
(kernel, backend, size).
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from negsup import kernels


def _time(fn, args, repeats: int) -> float:
    fn(*args)  # warmup (and JIT compile for the numba path)
    start = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - start) / repeats


def bench_dot_scores(rng, rows: int, dim: int, repeats: int):
    matrix = np.ascontiguousarray(rng.normal(size=(rows, dim)))
    query = np.ascontiguousarray(rng.normal(size=dim))
    cases = [("numpy", kernels.dot_scores_numpy)]
    if kernels.HAVE_NUMBA:
        cases.append(("numba", kernels.dot_scores_numba))
    for name, fn in cases:
        yield name, f"dot_scores n={rows} d={dim}", _time(fn, (matrix, query), repeats)


def bench_attention(rng, n_tokens: int, n_keys: int, dim: int, repeats: int):
    q = np.ascontiguousarray(rng.normal(size=(n_tokens, dim)))
    k = np.ascontiguousarray(rng.normal(size=(n_keys, dim)))
    v = np.ascontiguousarray(rng.normal(size=(n_keys, dim)))
    cases = [("numpy", kernels.attention_core_numpy)]
    if kernels.HAVE_NUMBA:
        cases.append(("numba", kernels.attention_core_numba))
    for name, fn in cases:
        yield name, f"attention L={n_tokens} k={n_keys} d={dim}", _time(fn, (q, k, v), repeats)


def bench_negative_scores(rng, n_tokens: int, n_neg: int, dim: int, repeats: int):
    prefix = np.ascontiguousarray(rng.normal(size=(n_tokens, dim)))
    negatives = np.ascontiguousarray(rng.normal(size=(n_neg, dim)))
    cases = [("numpy", kernels.negative_scores_numpy)]
    if kernels.HAVE_NUMBA:
        cases.append(("numba", kernels.negative_scores_numba))
    for name, fn in cases:
        yield name, f"negative_scores L={n_tokens} m={n_neg} d={dim}", _time(
            fn, (prefix, negatives), repeats
        )


def main() -> None:
    parser = argparse.ArgumentParser(description="Compare kernel backends")
    parser.add_argument("--rows", type=int, default=100_000, help="datastore rows")
    parser.add_argument("--dim", type=int, default=128)
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    print(f"active backend: {kernels.backend()} (numba available: {kernels.HAVE_NUMBA})")
    print(f"{'kernel':<40} {'backend':<8} {'mean time':>12}")
    rows = []
    rows += list(bench_dot_scores(rng, 1000, 32, max(args.repeats, 500)))
    rows += list(bench_dot_scores(rng, args.rows, args.dim, args.repeats))
    rows += list(bench_attention(rng, 4, 9, args.dim, max(args.repeats, 200)))
    rows += list(bench_attention(rng, 64, 512, args.dim, args.repeats))
    rows += list(bench_negative_scores(rng, 64, 16, args.dim, max(args.repeats, 200)))
    for backend, label, seconds in rows:
        print(f"{label:<40} {backend:<8} {seconds * 1e6:>10.1f}us")


if __name__ == "__main__":
    main()
