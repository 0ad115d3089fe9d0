#!/usr/bin/env python3
"""Compare the compiled and pure-Python kernel backends on EM-shaped work.

The hot path is one E-step pass (conditional-mean fill + second-moment
accumulation) plus the per-row log-likelihood; both are dominated by the
O(N * M^2) row loop.  Two workload shapes matter in practice: rows drawn
from a small pool of missing patterns (monitoring data; factorizations are
shared) and rows with mostly unique patterns (worst case for sharing).

Usage: python benchmarks/bench_kernels.py [--quick]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from tgcimpute.emfit import e_step, observed_loglik
from tgcimpute.kernels import available_backends

from typing import NamedTuple


class Workload(NamedTuple):
    name: str
    n_rows: int
    n_cols: int
    pattern_pool: int | None  # None = fully random masks
    missing: float


WORKLOADS = [
    Workload("pooled-patterns", 20_000, 80, 64, 0.4),
    Workload("unique-patterns", 2_000, 40, None, 0.4),
    Workload("desk-scale", 2_000, 12, None, 0.3),
]

QUICK = [
    Workload("pooled-patterns", 4_000, 60, 32, 0.4),
    Workload("unique-patterns", 800, 30, None, 0.4),
]


def build_case(w: Workload, rng):
    idx = np.arange(w.n_cols)
    sigma = 0.6 ** np.abs(np.subtract.outer(idx, idx))
    z = rng.standard_normal((w.n_rows, w.n_cols)) @ np.linalg.cholesky(sigma).T
    if w.pattern_pool is None:
        mask = rng.random((w.n_rows, w.n_cols)) >= w.missing
    else:
        pool = rng.random((w.pattern_pool, w.n_cols)) >= w.missing
        mask = pool[rng.integers(0, w.pattern_pool, size=w.n_rows)]
    mask[:, 0] = True  # keep every column observed somewhere
    return np.where(mask, z, np.nan), mask, sigma


def time_backend(backend, z, mask, sigma, repeats=3):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        e_step(z, mask, sigma, backend=backend)
        observed_loglik(z, mask, sigma, backend=backend)
        best = min(best, time.perf_counter() - start)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--quick", action="store_true", help="smaller workloads")
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()

    backends = available_backends()
    print(f"backends: {', '.join(backends)}")
    header = f"{'workload':>18} {'rows':>7} {'cols':>5} {'patterns':>9}"
    for name in backends:
        header += f" {name + ' (s)':>14}"
    if "compiled" in backends and "python" in backends:
        header += f" {'speedup':>9}"
    print(header)

    for w in QUICK if args.quick else WORKLOADS:
        rng = np.random.default_rng(0)
        z, mask, sigma = build_case(w, rng)
        n_patterns = np.unique(mask, axis=0).shape[0]
        row = f"{w.name:>18} {w.n_rows:>7} {w.n_cols:>5} {n_patterns:>9}"
        timings = {}
        for name in backends:
            timings[name] = time_backend(name, z, mask, sigma, args.repeats)
            row += f" {timings[name]:>14.3f}"
        if "compiled" in timings and "python" in timings:
            row += f" {timings['python'] / timings['compiled']:>8.1f}x"
        print(row)


if __name__ == "__main__":
    main()
