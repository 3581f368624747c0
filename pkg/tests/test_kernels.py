"""The compiled kernels and the numpy fallback must agree bit for bit."""

from __future__ import annotations

import os
import subprocess
import sys

import numpy as np
import pytest

from fjord import _kernels_py, kernels
from fjord.inference import QSForest, random_tree

compiled = pytest.importorskip("fjord._kernels")


def test_backend_is_selected():
    assert kernels.BACKEND in ("cython", "python")


def test_env_var_forces_fallback():
    code = "from fjord import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, FJORD_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@pytest.mark.parametrize("seed", range(5))
def test_hash_join_pairs_match(seed):
    rng = np.random.default_rng(seed)
    left = rng.integers(0, 50, 400).astype(np.int64)
    right = rng.integers(0, 50, 300).astype(np.int64)
    a = _kernels_py.hash_join_pairs(left, right)
    b = compiled.hash_join_pairs(left, right)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_hash_join_pairs_empty():
    e = np.empty(0, np.int64)
    for mod in (_kernels_py, compiled):
        li, ri = mod.hash_join_pairs(e, np.arange(3, dtype=np.int64))
        assert li.shape == ri.shape == (0,)


@pytest.mark.parametrize("seed", range(3))
def test_qs_kernels_match(seed):
    rng = np.random.default_rng(seed)
    forest = QSForest.from_trees([random_tree(rng, 12, 6) for _ in range(20)], 12)
    x = rng.standard_normal((257, 12)).astype(np.float32)
    args = (x, forest.fids, forest.thresholds, forest.node_tree, forest.bitvectors, forest.n_trees)
    m1, m2 = _kernels_py.qs_masks(*args), compiled.qs_masks(*args)
    np.testing.assert_array_equal(m1, m2)
    np.testing.assert_array_equal(_kernels_py.exit_leaves(m1), compiled.exit_leaves(m2))


def test_pq_distances_match(rng):
    tables = rng.random((33, 4 * 8)).astype(np.float32)
    offsets = (np.arange(4) * 8).astype(np.int64)
    codes = rng.integers(0, 8, (100, 4)).astype(np.int64)
    np.testing.assert_array_equal(_kernels_py.pq_distances(tables, offsets, codes),
                                  compiled.pq_distances(tables, offsets, codes))
