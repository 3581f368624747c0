"""Compiled vs numpy kernels: best-of-N wall time and an output equality check.

    python3 benchmarks/bench_kernels.py [--rows 200000] [--repeats 5]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from fjord import _kernels_py
from fjord.inference import QSForest, random_tree

try:
    from fjord import _kernels
except ImportError:  # extension not built
    _kernels = None


def best_of(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rows: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    left = rng.integers(0, rows // 10, rows).astype(np.int64)
    right = rng.permutation(rows // 10).astype(np.int64)
    yield "hash_join_pairs", (left, right)

    forest = QSForest.from_trees([random_tree(rng, 32, 6) for _ in range(64)], 32)
    x = rng.standard_normal((rows // 10, 32)).astype(np.float32)
    args = (x, forest.fids, forest.thresholds, forest.node_tree, forest.bitvectors, forest.n_trees)
    yield "qs_masks", args
    masks = _kernels_py.qs_masks(*args)
    yield "exit_leaves", (masks,)

    parts, clusters = 8, 16
    tables = rng.random((64, parts * clusters)).astype(np.float32)
    offsets = (np.arange(parts) * clusters).astype(np.int64)
    codes = rng.integers(0, clusters, (rows // 10, parts)).astype(np.int64)
    yield "pq_distances", (tables, offsets, codes)


def same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--rows", type=int, default=200_000)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    if _kernels is None:
        print("compiled kernels not available; only the numpy fallback is installed")
    print(f"{'kernel':<16} {'numpy_s':>10} {'cython_s':>10} {'ratio':>7}  equal")
    for name, fargs in cases(args.rows):
        py_fn = getattr(_kernels_py, name)
        t_py = best_of(lambda: py_fn(*fargs), args.repeats)
        if _kernels is None:
            print(f"{name:<16} {t_py:>10.4f} {'-':>10} {'-':>7}  -")
            continue
        cy_fn = getattr(_kernels, name)
        t_cy = best_of(lambda: cy_fn(*fargs), args.repeats)
        eq = same(py_fn(*fargs), cy_fn(*fargs))
        print(f"{name:<16} {t_py:>10.4f} {t_cy:>10.4f} {t_py / t_cy:>7.2f}  {eq}")


if __name__ == "__main__":
    main()
