"""Inference operators and their factorized (partial/combine) forms.

Dense layers split the weight matrix by row blocks, one per feature source;
the partial products are summed where the sources meet. QuickScorer forests
split their nodes by feature owner and AND the partial leaf masks. Product
quantization splits the per-part distance tables. All arithmetic is float32.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels

MAX_LEAVES = 64
MAX_DEPTH = 6


def _f32(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float32)


def _rows(x: np.ndarray) -> np.ndarray:
    x = _f32(x)
    return x[None, :] if x.ndim == 1 else x


# ------------------------------------------------------------------- dense


@dataclass(frozen=True)
class FeaturePartition:
    """Disjoint feature index sets, one per source, covering 0..n_features-1."""

    sources: tuple[str, ...]
    indices: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        idx = tuple(np.asarray(i, dtype=np.int64) for i in self.indices)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "sources", tuple(self.sources))
        if len(self.sources) != len(idx):
            raise ValueError("one index set per source")
        if len(set(self.sources)) != len(self.sources):
            raise ValueError("duplicate source names")
        allidx = np.concatenate(idx) if idx else np.empty(0, np.int64)
        if np.unique(allidx).shape[0] != allidx.shape[0]:
            raise ValueError("feature index sets overlap")
        if allidx.shape[0] and not np.array_equal(np.sort(allidx), np.arange(allidx.shape[0])):
            raise ValueError("feature index sets must cover 0..n-1 exactly")

    @classmethod
    def contiguous(cls, sources: Sequence[str], sizes: Sequence[int]) -> "FeaturePartition":
        bounds = np.cumsum([0, *sizes])
        return cls(tuple(sources), tuple(np.arange(bounds[i], bounds[i + 1]) for i in range(len(sizes))))

    @property
    def n_features(self) -> int:
        return int(sum(i.shape[0] for i in self.indices))

    def index_of(self, source: str) -> np.ndarray:
        return self.indices[self.sources.index(source)]

    def split(self, x: np.ndarray) -> list[np.ndarray]:
        x = _rows(x)
        return [x[:, i] for i in self.indices]


def dense_partial(x_k: np.ndarray, weight: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Partial product of one source: x_k times the weight rows it owns."""
    w = _f32(weight)[np.asarray(rows, dtype=np.int64)]
    return _rows(x_k) @ w


def apply_activation(z: np.ndarray, activation: str | None) -> np.ndarray:
    if activation in (None, "none", "identity"):
        return z
    if activation == "relu":
        return np.maximum(z, np.float32(0))
    if activation == "softmax":
        shifted = z - z.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return (e / e.sum(axis=1, keepdims=True)).astype(np.float32)
    if activation == "sigmoid":
        return (1.0 / (1.0 + np.exp(-z))).astype(np.float32)
    raise ValueError(f"unknown activation {activation!r}")


def dense_combine(partials: Sequence[np.ndarray], bias: np.ndarray | None = None, activation: str | None = None) -> np.ndarray:
    """Sum partials in list order, then add the bias and apply the activation once."""
    if not partials:
        raise ValueError("nothing to combine")
    acc = _f32(partials[0]).copy()
    for p in partials[1:]:
        acc += _f32(p)
    if bias is not None:
        acc += _f32(bias)
    return apply_activation(acc, activation)


@dataclass(frozen=True)
class DenseLayer:
    weight: np.ndarray = field(repr=False)
    bias: np.ndarray = field(repr=False)
    activation: str = "relu"

    def __post_init__(self) -> None:
        object.__setattr__(self, "weight", _f32(self.weight))
        object.__setattr__(self, "bias", _f32(self.bias))
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ValueError("dense layer needs W (in, out) and b (out,)")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return apply_activation(_rows(x) @ self.weight + self.bias, self.activation)


@dataclass(frozen=True)
class FFNNModel:
    layers: tuple[DenseLayer, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        for a, b in zip(self.layers, self.layers[1:]):
            if a.weight.shape[1] != b.weight.shape[0]:
                raise ValueError("consecutive layer shapes do not chain")

    @property
    def n_inputs(self) -> int:
        return self.layers[0].weight.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer(x)
        return x

    def factorized(self, parts: Sequence[np.ndarray], partition: FeaturePartition) -> np.ndarray:
        """First layer from per-source partials, remaining layers as usual."""
        first = self.layers[0]
        partials = [dense_partial(p, first.weight, idx) for p, idx in zip(parts, partition.indices)]
        x = dense_combine(partials, first.bias, first.activation)
        for layer in self.layers[1:]:
            x = layer(x)
        return x


# ------------------------------------------------------------- QuickScorer


@dataclass(frozen=True)
class DecisionTree:
    """Explicit binary tree. Leaves have ``left == right == -1``.

    A row goes left at an internal node when ``x[feature] < threshold``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def traverse(self, x: np.ndarray) -> int:
        """Node index of the exit leaf for one row."""
        k = 0
        while self.left[k] != -1:
            k = self.left[k] if x[self.feature[k]] < self.threshold[k] else self.right[k]
        return int(k)

    def leaf_order(self) -> list[int]:
        """Leaf node indices from left to right."""
        out, stack = [], [0]
        while stack:
            k = stack.pop()
            if self.left[k] == -1:
                out.append(k)
            else:
                stack.append(int(self.right[k]))
                stack.append(int(self.left[k]))
        return out

    def depth(self) -> int:
        best, stack = 0, [(0, 0)]
        while stack:
            k, d = stack.pop()
            if self.left[k] == -1:
                best = max(best, d)
            else:
                stack += [(int(self.left[k]), d + 1), (int(self.right[k]), d + 1)]
        return best


def random_tree(rng: np.random.Generator, n_features: int, depth: int = MAX_DEPTH, split_prob: float = 0.85) -> DecisionTree:
    """Random tree with thresholds drawn from N(0, 1); root always splits."""
    feat, thr, left, right, val = [], [], [], [], []

    def grow(d: int) -> int:
        k = len(feat)
        feat.append(-1), thr.append(0.0), left.append(-1), right.append(-1), val.append(0.0)
        if d < depth and (d == 0 or rng.random() < split_prob):
            feat[k] = int(rng.integers(n_features))
            thr[k] = float(rng.normal())
            left[k] = grow(d + 1)
            right[k] = grow(d + 1)
        else:
            val[k] = float(rng.normal())
        return k

    grow(0)
    return DecisionTree(
        np.array(feat, np.int64), np.array(thr, np.float32), np.array(left, np.int64),
        np.array(right, np.int64), np.array(val, np.float32),
    )


@dataclass(frozen=True)
class QSForest:
    """Forest in QuickScorer layout.

    Nodes are grouped by tree. ``bitvectors[n]`` has bit d set when leaf d of
    the node's tree can still be the exit leaf after the node tests false
    (``x[fid] >= threshold``); bit 0 is the leftmost leaf.
    """

    n_features: int
    leaves_per_tree: np.ndarray
    node_tree: np.ndarray
    fids: np.ndarray
    thresholds: np.ndarray
    bitvectors: np.ndarray  # (nodes, blocks) uint64
    leaf_values: np.ndarray  # (trees, max_leaves) float32

    def __post_init__(self) -> None:
        object.__setattr__(self, "leaves_per_tree", np.asarray(self.leaves_per_tree, np.int64))
        object.__setattr__(self, "node_tree", np.asarray(self.node_tree, np.int32))
        object.__setattr__(self, "fids", np.asarray(self.fids, np.int32))
        object.__setattr__(self, "thresholds", _f32(self.thresholds))
        bv = np.asarray(self.bitvectors, np.uint64)
        object.__setattr__(self, "bitvectors", bv.reshape(bv.shape[0], -1) if bv.size else bv.reshape(0, self.n_blocks))
        object.__setattr__(self, "leaf_values", _f32(self.leaf_values))

    @property
    def n_trees(self) -> int:
        return int(self.leaves_per_tree.shape[0])

    @property
    def n_blocks(self) -> int:
        return max(1, int(np.ceil(int(self.leaves_per_tree.max(initial=1)) / 64)))

    @property
    def max_depth(self) -> int:
        return int(np.ceil(np.log2(max(int(self.leaves_per_tree.max(initial=1)), 1))))

    @classmethod
    def from_trees(cls, trees: Sequence[DecisionTree], n_features: int) -> "QSForest":
        leaves = [len(t.leaf_order()) for t in trees]
        n_blocks = max(1, int(np.ceil(max(leaves) / 64)))
        node_tree, fids, thrs, bvs = [], [], [], []
        values = np.zeros((len(trees), max(leaves)), np.float32)
        for ti, t in enumerate(trees):
            order = t.leaf_order()
            rank = {k: d for d, k in enumerate(order)}
            values[ti, : len(order)] = t.value[order]

            def leaves_under(k: int) -> list[int]:
                if t.left[k] == -1:
                    return [rank[k]]
                return leaves_under(int(t.left[k])) + leaves_under(int(t.right[k]))

            full = (1 << len(order)) - 1
            for k in range(t.left.shape[0]):
                if t.left[k] == -1:
                    continue
                blocked = sum(1 << d for d in leaves_under(int(t.left[k])))
                bits = full & ~blocked
                node_tree.append(ti)
                fids.append(int(t.feature[k]))
                thrs.append(float(t.threshold[k]))
                bvs.append([(bits >> (64 * b)) & 0xFFFFFFFFFFFFFFFF for b in range(n_blocks)])
        return cls(
            n_features, np.array(leaves), np.array(node_tree, np.int32), np.array(fids, np.int32),
            np.array(thrs, np.float32), np.array(bvs, dtype=np.uint64).reshape(len(bvs), n_blocks), values,
        )

    def subset(self, feature_ids: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        """Nodes testing any of ``feature_ids``, and their fids remapped to local positions."""
        feature_ids = np.asarray(feature_ids, np.int64)
        local = np.full(self.n_features, -1, np.int64)
        local[feature_ids] = np.arange(feature_ids.shape[0])
        sel = np.nonzero(local[self.fids] >= 0)[0]
        return sel, local[self.fids[sel]].astype(np.int32)

    def to_json(self) -> dict:
        nodes = []
        for n in range(self.fids.shape[0]):
            bits = 0
            for b in range(self.bitvectors.shape[1]):
                bits |= int(self.bitvectors[n, b]) << (64 * b)
            nodes.append({"tree": int(self.node_tree[n]), "fid": int(self.fids[n]),
                          "threshold": float(self.thresholds[n]), "bitvector": format(bits, "x")})
        return {"n_features": self.n_features, "leaves_per_tree": self.leaves_per_tree.tolist(),
                "nodes": nodes, "leaf_values": self.leaf_values.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "QSForest":
        leaves = np.asarray(obj["leaves_per_tree"], np.int64)
        n_blocks = max(1, int(np.ceil(int(leaves.max(initial=1)) / 64)))
        nodes = obj["nodes"]
        bvs = np.zeros((len(nodes), n_blocks), np.uint64)
        for i, nd in enumerate(nodes):
            bits = int(nd["bitvector"], 16)
            for b in range(n_blocks):
                bvs[i, b] = (bits >> (64 * b)) & 0xFFFFFFFFFFFFFFFF
        return cls(
            int(obj["n_features"]), leaves, np.array([n["tree"] for n in nodes], np.int32),
            np.array([n["fid"] for n in nodes], np.int32), np.array([n["threshold"] for n in nodes], np.float32),
            bvs, np.asarray(obj["leaf_values"], np.float32),
        )


def qs_partial(forest: QSForest, x_k: np.ndarray, feature_ids: Sequence[int]) -> np.ndarray:
    """Leaf masks from the nodes whose features ``x_k`` holds (columns in ``feature_ids`` order)."""
    sel, local = forest.subset(feature_ids)
    return kernels.qs_masks(_rows(x_k), local, forest.thresholds[sel], forest.node_tree[sel],
                            forest.bitvectors[sel], forest.n_trees)


def qs_combine(masks: Sequence[np.ndarray]) -> np.ndarray:
    """Bitwise AND of partial masks."""
    if not masks:
        raise ValueError("nothing to combine")
    out = np.array(masks[0], dtype=np.uint64, copy=True)
    for m in masks[1:]:
        out &= m
    return out


def qs_exit_leaves(masks: np.ndarray) -> np.ndarray:
    return kernels.exit_leaves(np.ascontiguousarray(masks, dtype=np.uint64))


def qs_score_from_masks(forest: QSForest, masks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(score, exit leaves): the score sums leaf values tree by tree in float32."""
    leaves = qs_exit_leaves(masks)
    if (leaves < 0).any():
        raise ValueError("leaf mask is all zero; bitvectors are inconsistent")
    vals = forest.leaf_values[np.arange(forest.n_trees)[None, :], leaves]
    score = np.zeros(vals.shape[0], np.float32)
    for t in range(forest.n_trees):
        score += vals[:, t]
    return score, leaves


def qs_score(forest: QSForest, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Monolithic scoring over the full feature vector."""
    masks = qs_partial(forest, x, np.arange(forest.n_features))
    return qs_score_from_masks(forest, masks)


# ------------------------------------------------- product quantization


@dataclass(frozen=True)
class PQModel:
    """Codebooks per part and the quantized database.

    Part k covers query dimensions ``bounds[k]:bounds[k+1]`` and has
    codebook ``codebooks[k]`` of shape (clusters_k, subdim_k).
    """

    bounds: tuple[int, ...]
    codebooks: tuple[np.ndarray, ...]
    codes: np.ndarray  # (database, parts)
    k: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "bounds", tuple(int(b) for b in self.bounds))
        object.__setattr__(self, "codebooks", tuple(_f32(c) for c in self.codebooks))
        object.__setattr__(self, "codes", np.asarray(self.codes, np.int64))

    @property
    def n_parts(self) -> int:
        return len(self.codebooks)

    @property
    def n_features(self) -> int:
        return self.bounds[-1]

    @property
    def database_size(self) -> int:
        return int(self.codes.shape[0])

    def part_range(self, k: int) -> range:
        return range(self.bounds[k], self.bounds[k + 1])

    def parts_within(self, feature_ids: Sequence[int]) -> list[int] | None:
        """Parts entirely covered by ``feature_ids``; None if a part is split."""
        have = set(int(f) for f in feature_ids)
        out = []
        for k in range(self.n_parts):
            rng = set(self.part_range(k))
            if rng <= have:
                out.append(k)
            elif rng & have:
                return None
        return out

    def decode(self, i: int) -> np.ndarray:
        return np.concatenate([self.codebooks[k][self.codes[i, k]] for k in range(self.n_parts)])

    def to_json(self) -> dict:
        return {"bounds": list(self.bounds), "codebooks": [c.tolist() for c in self.codebooks],
                "codes": self.codes.tolist(), "k": self.k}

    @classmethod
    def from_json(cls, obj: dict) -> "PQModel":
        return cls(tuple(obj["bounds"]), tuple(np.asarray(c, np.float32) for c in obj["codebooks"]),
                   np.asarray(obj["codes"], np.int64), int(obj.get("k", 1)))


def pq_partial(x_k: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Squared distances from each row's sub-vector to every centroid, shape (rows, clusters)."""
    x_k = _rows(x_k)
    diff = x_k[:, None, :] - _f32(codebook)[None, :, :]
    return np.einsum("rcd,rcd->rc", diff, diff, dtype=np.float32)


def pq_tables(model: PQModel, x: np.ndarray, parts: Sequence[int], columns: Sequence[int] | None = None) -> np.ndarray:
    """Concatenated distance tables for ``parts``; ``columns`` maps global dims to columns of ``x``."""
    x = _rows(x)
    cols = None if columns is None else {int(c): j for j, c in enumerate(columns)}
    blocks = []
    for k in parts:
        dims = list(model.part_range(k))
        idx = dims if cols is None else [cols[d] for d in dims]
        blocks.append(pq_partial(x[:, idx], model.codebooks[k]))
    return np.concatenate(blocks, axis=1) if blocks else np.empty((x.shape[0], 0), np.float32)


def pq_distances(tables: np.ndarray, cluster_counts: Sequence[int], codes: np.ndarray) -> np.ndarray:
    """Distance from each row to every database vector, summing parts in order."""
    offsets = np.concatenate([[0], np.cumsum(cluster_counts)[:-1]]).astype(np.int64)
    return kernels.pq_distances(_f32(tables), offsets, np.asarray(codes, np.int64))


def top_k(dist: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """k smallest per row, ties broken by ascending index."""
    if k > dist.shape[1]:
        raise ValueError(f"k={k} exceeds database size {dist.shape[1]}")
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    return order, np.take_along_axis(dist, order, axis=1)


def pq_combine(tables: Sequence[np.ndarray], codes: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Nearest ``k`` database entries from per-part tables listed in part order."""
    tables = [_rows(t) for t in tables]
    counts = [t.shape[1] for t in tables]
    dist = pq_distances(np.concatenate(tables, axis=1), counts, codes)
    return top_k(dist, k)


def pq_search(model: PQModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    tables = [pq_partial(_rows(x)[:, list(model.part_range(k))], model.codebooks[k]) for k in range(model.n_parts)]
    return pq_combine(tables, model.codes, model.k)


# ----------------------------------------------------------------- scalers


@dataclass(frozen=True)
class ScalerSpec:
    """Min-max bounds per feature, or the category list of a one-hot encoder."""

    kind: str
    mins: tuple[float, ...] = ()
    maxs: tuple[float, ...] = ()
    categories: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.kind == "minmax":
            if len(self.mins) != len(self.maxs) or not self.mins:
                raise ValueError("min-max scaler needs equal-length mins and maxs")
            if any(lo > hi for lo, hi in zip(self.mins, self.maxs)):
                raise ValueError("min-max scaler has min > max")
        elif self.kind == "onehot":
            if not self.categories or len(set(self.categories)) != len(self.categories):
                raise ValueError("one-hot encoder needs distinct categories")
        else:
            raise ValueError(f"unknown scaler kind {self.kind!r}")

    @property
    def out_dim(self) -> int:
        return len(self.mins) if self.kind == "minmax" else len(self.categories)

    def to_json(self) -> dict:
        if self.kind == "minmax":
            return {"kind": "minmax", "mins": list(self.mins), "maxs": list(self.maxs)}
        return {"kind": "onehot", "categories": list(self.categories)}

    @classmethod
    def from_json(cls, obj: dict) -> "ScalerSpec":
        if obj["kind"] == "minmax":
            return cls("minmax", tuple(map(float, obj["mins"])), tuple(map(float, obj["maxs"])))
        return cls("onehot", categories=tuple(str(c) for c in obj["categories"]))


def min_max(x: np.ndarray, spec: ScalerSpec) -> np.ndarray:
    """(x - min) / (max - min) per feature; a constant feature maps to 0."""
    x = _rows(x)
    lo = np.asarray(spec.mins, np.float32)
    span = np.asarray(spec.maxs, np.float32) - lo
    safe = np.where(span == 0, np.float32(1), span)
    return np.where(span == 0, np.float32(0), (x - lo) / safe).astype(np.float32)


def one_hot(values: np.ndarray, spec: ScalerSpec) -> tuple[np.ndarray, int]:
    """One-hot rows; unknown categories give an all-zero row and are counted."""
    flat = np.asarray(values, dtype=object).reshape(-1)
    pos = {c: j for j, c in enumerate(spec.categories)}
    out = np.zeros((flat.shape[0], len(spec.categories)), np.float32)
    unknown = 0
    for r, v in enumerate(flat):
        j = pos.get(str(v))
        if j is None:
            unknown += 1
        else:
            out[r, j] = 1.0
    return out, unknown


# ------------------------------------------------------------ model bundle


@dataclass
class ModelBundle:
    """Named parameters referenced by expression nodes."""

    matrices: dict[str, np.ndarray] = field(default_factory=dict)
    vectors: dict[str, np.ndarray] = field(default_factory=dict)
    forests: dict[str, QSForest] = field(default_factory=dict)
    pq: dict[str, PQModel] = field(default_factory=dict)
    scalers: dict[str, ScalerSpec] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "matrices": {k: _f32(v).tolist() for k, v in self.matrices.items()},
            "vectors": {k: _f32(v).tolist() for k, v in self.vectors.items()},
            "forests": {k: f.to_json() for k, f in self.forests.items()},
            "pq": {k: p.to_json() for k, p in self.pq.items()},
            "scalers": {k: s.to_json() for k, s in self.scalers.items()},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelBundle":
        return cls(
            {k: _f32(v) for k, v in obj.get("matrices", {}).items()},
            {k: _f32(v) for k, v in obj.get("vectors", {}).items()},
            {k: QSForest.from_json(v) for k, v in obj.get("forests", {}).items()},
            {k: PQModel.from_json(v) for k, v in obj.get("pq", {}).items()},
            {k: ScalerSpec.from_json(v) for k, v in obj.get("scalers", {}).items()},
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), separators=(",", ":")))

    @classmethod
    def load(cls, path: str | Path) -> "ModelBundle":
        return cls.from_json(json.loads(Path(path).read_text()))

    def validate(self) -> list[str]:
        """Human-readable problems; empty when the bundle is consistent."""
        problems = []
        for k, w in self.matrices.items():
            if w.ndim != 2 or 0 in w.shape:
                problems.append(f"matrix {k}: expected a non-empty 2-D array, got shape {w.shape}")
            elif not np.isfinite(w).all():
                problems.append(f"matrix {k}: non-finite values")
        for k, v in self.vectors.items():
            if v.ndim != 1:
                problems.append(f"vector {k}: expected 1-D, got shape {v.shape}")
        for k, f in self.forests.items():
            problems += [f"forest {k}: {p}" for p in _forest_problems(f)]
        for k, p in self.pq.items():
            problems += [f"pq {k}: {q}" for q in _pq_problems(p)]
        return problems


def _forest_problems(f: QSForest) -> list[str]:
    out = []
    if (f.leaves_per_tree > MAX_LEAVES).any():
        out.append(f"a tree has more than {MAX_LEAVES} leaves")
    if (f.leaves_per_tree < 1).any():
        out.append("a tree has no leaves")
    if f.fids.size and (f.fids.min() < 0 or f.fids.max() >= f.n_features):
        out.append("feature id out of range")
    if f.node_tree.size and (np.diff(f.node_tree) < 0).any():
        out.append("nodes are not grouped by tree")
    if f.node_tree.size and (f.node_tree.min() < 0 or f.node_tree.max() >= f.n_trees):
        out.append("node tree id out of range")
    for n in range(f.fids.shape[0]):
        t = int(f.node_tree[n])
        bits = sum(int(f.bitvectors[n, b]) << (64 * b) for b in range(f.bitvectors.shape[1]))
        if bits >> int(f.leaves_per_tree[t]):
            out.append(f"node {n}: bitvector has bits beyond the tree's leaves")
            break
        if bits == 0:
            out.append(f"node {n}: bitvector has no set bit")
            break
    if f.leaf_values.shape[0] != f.n_trees:
        out.append("leaf value rows do not match the tree count")
    return out


def _pq_problems(p: PQModel) -> list[str]:
    out = []
    if len(p.bounds) != p.n_parts + 1 or p.bounds[0] != 0 or any(b >= c for b, c in zip(p.bounds, p.bounds[1:])):
        out.append("part bounds must start at 0 and strictly increase")
        return out
    for k, cb in enumerate(p.codebooks):
        if cb.ndim != 2 or cb.shape[1] != p.bounds[k + 1] - p.bounds[k]:
            out.append(f"codebook {k} has shape {cb.shape}, sub-dimension {p.bounds[k + 1] - p.bounds[k]}")
    if p.codes.ndim != 2 or p.codes.shape[1] != p.n_parts:
        out.append("codes must have one column per part")
    else:
        for k, cb in enumerate(p.codebooks):
            if p.codes[:, k].min(initial=0) < 0 or p.codes[:, k].max(initial=0) >= cb.shape[0]:
                out.append(f"codes of part {k} exceed the codebook size")
    if p.k < 1 or p.k > p.database_size:
        out.append(f"k={p.k} is outside 1..{p.database_size}")
    return out
