# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels. Contracts match ``_kernels_py`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrtf
from libc.stdint cimport int64_t, uint64_t, int32_t

cnp.import_array()

cdef uint64_t ALL_ONES = 0xFFFFFFFFFFFFFFFFULL

cdef extern from *:
    int __builtin_ctzll(unsigned long long) nogil


cdef inline uint64_t _hash(int64_t key) nogil:
    return (<uint64_t>key) * 0x9E3779B97F4A7C15ULL


def hash_join_pairs(left, right):
    left = np.ascontiguousarray(left, dtype=np.int64)
    right = np.ascontiguousarray(right, dtype=np.int64)
    cdef Py_ssize_t n_left = left.shape[0], n_right = right.shape[0]
    cdef bint build_left = n_left < n_right
    cdef const int64_t[::1] build = left if build_left else right
    cdef const int64_t[::1] probe = right if build_left else left
    cdef Py_ssize_t n_build = build.shape[0], n_probe = probe.shape[0]

    cdef Py_ssize_t cap = 16
    cdef int shift = 60
    while cap < 2 * n_build + 1:
        cap <<= 1
        shift -= 1
    slot_key_arr = np.zeros(cap, dtype=np.int64)
    slot_head_arr = np.full(cap, -1, dtype=np.int64)
    nxt_arr = np.full(max(n_build, 1), -1, dtype=np.int64)
    counts_arr = np.zeros(n_probe + 1, dtype=np.int64)
    cdef int64_t[::1] slot_key = slot_key_arr
    cdef int64_t[::1] slot_head = slot_head_arr
    cdef int64_t[::1] nxt = nxt_arr
    cdef int64_t[::1] counts = counts_arr
    cdef Py_ssize_t i, s, j
    cdef uint64_t mask = <uint64_t>(cap - 1)
    cdef int64_t key, c, total, pos

    with nogil:
        # insert in reverse so each chain lists build rows in ascending order
        for i in range(n_build - 1, -1, -1):
            key = build[i]
            s = <Py_ssize_t>((_hash(key) >> shift) & mask)
            while slot_head[s] != -1 and slot_key[s] != key:
                s = (s + 1) & mask
            if slot_head[s] == -1:
                slot_key[s] = key
            nxt[i] = slot_head[s]
            slot_head[s] = i
        total = 0
        for i in range(n_probe):
            key = probe[i]
            s = <Py_ssize_t>((_hash(key) >> shift) & mask)
            c = 0
            while slot_head[s] != -1:
                if slot_key[s] == key:
                    j = slot_head[s]
                    while j != -1:
                        c += 1
                        j = nxt[j]
                    break
                s = (s + 1) & mask
            counts[i] = c
            total += c

    probe_idx_arr = np.empty(total, dtype=np.int64)
    build_idx_arr = np.empty(total, dtype=np.int64)
    cdef int64_t[::1] probe_idx = probe_idx_arr
    cdef int64_t[::1] build_idx = build_idx_arr
    with nogil:
        pos = 0
        for i in range(n_probe):
            if counts[i] == 0:
                continue
            key = probe[i]
            s = <Py_ssize_t>((_hash(key) >> shift) & mask)
            while slot_key[s] != key or slot_head[s] == -1:
                s = (s + 1) & mask
            j = slot_head[s]
            while j != -1:
                probe_idx[pos] = i
                build_idx[pos] = j
                pos += 1
                j = nxt[j]

    if not build_left:
        return probe_idx_arr, build_idx_arr

    # build side was the left: stable counting sort by left index
    li_arr = np.empty(total, dtype=np.int64)
    ri_arr = np.empty(total, dtype=np.int64)
    start_arr = np.zeros(n_left + 1, dtype=np.int64)
    cdef int64_t[::1] li = li_arr
    cdef int64_t[::1] ri = ri_arr
    cdef int64_t[::1] start = start_arr
    with nogil:
        for pos in range(total):
            start[build_idx[pos] + 1] += 1
        for i in range(n_left):
            start[i + 1] += start[i]
        for pos in range(total):
            j = build_idx[pos]
            li[start[j]] = j
            ri[start[j]] = probe_idx[pos]
            start[j] += 1
    return li_arr, ri_arr


def qs_masks(x, fids, thresholds, node_tree, bitvectors, int n_trees):
    x = np.ascontiguousarray(x, dtype=np.float32)
    fids = np.ascontiguousarray(fids, dtype=np.int32)
    thresholds = np.ascontiguousarray(thresholds, dtype=np.float32)
    node_tree = np.ascontiguousarray(node_tree, dtype=np.int32)
    cdef Py_ssize_t n_nodes = fids.shape[0]
    cdef Py_ssize_t n_blocks = bitvectors.shape[1] if bitvectors.ndim == 2 else 1
    bv_arr = np.ascontiguousarray(bitvectors, dtype=np.uint64).reshape(n_nodes, n_blocks)
    cdef Py_ssize_t n_rows = x.shape[0]
    out_arr = np.full((n_rows, n_trees, n_blocks), 0xFFFFFFFFFFFFFFFF, dtype=np.uint64)
    cdef const float[:, ::1] xv = x
    cdef const int32_t[::1] fv = fids
    cdef const float[::1] tv = thresholds
    cdef const int32_t[::1] nt = node_tree
    cdef const uint64_t[:, ::1] bv = bv_arr
    cdef uint64_t[:, :, ::1] out = out_arr
    cdef Py_ssize_t r, n, b
    cdef int32_t t
    with nogil:
        for r in range(n_rows):
            for n in range(n_nodes):
                if xv[r, fv[n]] >= tv[n]:
                    t = nt[n]
                    for b in range(n_blocks):
                        out[r, t, b] &= bv[n, b]
    return out_arr


def exit_leaves(masks):
    masks = np.ascontiguousarray(masks, dtype=np.uint64)
    cdef const uint64_t[:, :, ::1] m = masks
    cdef Py_ssize_t n_rows = masks.shape[0], n_trees = masks.shape[1], n_blocks = masks.shape[2]
    res_arr = np.full((n_rows, n_trees), -1, dtype=np.int32)
    cdef int32_t[:, ::1] res = res_arr
    cdef Py_ssize_t r, t, b
    with nogil:
        for r in range(n_rows):
            for t in range(n_trees):
                for b in range(n_blocks):
                    if m[r, t, b] != 0:
                        res[r, t] = <int32_t>(64 * b + __builtin_ctzll(m[r, t, b]))
                        break
    return res_arr


def pq_distances(tables, offsets, codes):
    tables = np.ascontiguousarray(tables, dtype=np.float32)
    offsets = np.ascontiguousarray(offsets, dtype=np.int64)
    codes = np.ascontiguousarray(codes, dtype=np.int64)
    cdef const float[:, ::1] tb = tables
    cdef const int64_t[::1] off = offsets
    cdef const int64_t[:, ::1] cd = codes
    cdef Py_ssize_t n_rows = tables.shape[0], n_db = codes.shape[0], n_parts = codes.shape[1]
    out_arr = np.empty((n_rows, n_db), dtype=np.float32)
    cdef float[:, ::1] out = out_arr
    cdef Py_ssize_t r, i, k
    cdef float acc
    with nogil:
        for r in range(n_rows):
            for i in range(n_db):
                acc = 0.0
                for k in range(n_parts):
                    acc = acc + tb[r, off[k] + cd[i, k]]
                out[r, i] = sqrtf(acc)
    return out_arr
