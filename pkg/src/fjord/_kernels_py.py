"""Pure numpy implementations of the hot kernels.

Every function here has a twin in ``_kernels.pyx`` with the same signature
and bit-identical output. The compiled module is preferred when importable.
"""

from __future__ import annotations

import numpy as np

ALL_ONES = np.uint64(0xFFFFFFFFFFFFFFFF)
_QS_ROW_CHUNK = 256


def hash_join_pairs(left: np.ndarray, right: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Matching row pairs of an equi-join on int64 keys.

    Pairs come out ordered by left row index, then right row index. The
    fallback gets there with a stable sort of the right keys and binary
    search, which yields the same order a hash build/probe does.
    """
    left = np.ascontiguousarray(left, dtype=np.int64)
    right = np.ascontiguousarray(right, dtype=np.int64)
    order = np.argsort(right, kind="stable")
    sorted_right = right[order]
    lo = np.searchsorted(sorted_right, left, side="left")
    hi = np.searchsorted(sorted_right, left, side="right")
    counts = hi - lo
    total = int(counts.sum())
    li = np.repeat(np.arange(left.shape[0], dtype=np.int64), counts)
    if total == 0:
        return li, np.empty(0, dtype=np.int64)
    starts = np.cumsum(counts) - counts
    within = np.arange(total, dtype=np.int64) - np.repeat(starts, counts)
    ri = order[np.repeat(lo, counts) + within].astype(np.int64)
    return li, ri


def qs_masks(
    x: np.ndarray,
    fids: np.ndarray,
    thresholds: np.ndarray,
    node_tree: np.ndarray,
    bitvectors: np.ndarray,
    n_trees: int,
) -> np.ndarray:
    """Per-row, per-tree leaf masks: AND of bitvectors over false nodes.

    A node is false when ``x[fid] >= threshold``. Nodes must be grouped by
    tree in ascending tree order. Trees without nodes keep an all-ones mask.
    Returns an array of shape (rows, n_trees, blocks).
    """
    x = np.ascontiguousarray(x, dtype=np.float32)
    n_rows = x.shape[0]
    n_blocks = bitvectors.shape[1] if bitvectors.ndim == 2 else 1
    out = np.full((n_rows, n_trees, n_blocks), ALL_ONES, dtype=np.uint64)
    if fids.shape[0] == 0 or n_rows == 0:
        return out
    bitvectors = bitvectors.reshape(fids.shape[0], n_blocks)
    # trees that own at least one node, and the offset of their first node
    owners, starts = np.unique(node_tree, return_index=True)
    for lo in range(0, n_rows, _QS_ROW_CHUNK):
        chunk = x[lo : lo + _QS_ROW_CHUNK]
        false = chunk[:, fids] >= thresholds[None, :]
        vals = np.where(false[:, :, None], bitvectors[None, :, :], ALL_ONES)
        reduced = np.bitwise_and.reduceat(vals, starts, axis=1)
        out[lo : lo + chunk.shape[0], owners, :] = reduced
    return out


def exit_leaves(masks: np.ndarray) -> np.ndarray:
    """Index of the lowest set bit per (row, tree); -1 for an all-zero mask."""
    n_rows, n_trees, n_blocks = masks.shape
    result = np.full((n_rows, n_trees), -1, dtype=np.int32)
    pending = np.ones((n_rows, n_trees), dtype=bool)
    for b in range(n_blocks):
        block = masks[:, :, b]
        hit = pending & (block != 0)
        if hit.any():
            vals = block[hit]
            lowest = vals & (~vals + np.uint64(1))
            bit = np.log2(lowest.astype(np.float64)).astype(np.int32)
            result[hit] = 64 * b + bit
            pending &= ~hit
    return result


def pq_distances(tables: np.ndarray, offsets: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """sqrt of the sum over parts of ``tables[r, offsets[k] + codes[i, k]]``.

    Accumulation is float32 in ascending part order.
    """
    tables = np.ascontiguousarray(tables, dtype=np.float32)
    n_rows = tables.shape[0]
    n_db, n_parts = codes.shape
    acc = np.zeros((n_rows, n_db), dtype=np.float32)
    for k in range(n_parts):
        acc += tables[:, offsets[k] + codes[:, k]]
    return np.sqrt(acc)
