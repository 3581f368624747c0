"""Plan cost: compute at push sites plus weighted data movement.

    cost(x) = sum over pushing nodes i of n_i * u(units run at i, merges at i)
            + lambda * sum over all nodes i of n_i * width_i(x)

n_i is the node's (estimated) output cardinality, u the calibrated per-tuple
work and width_i the value slots per output row. Join CPU work is the same
for every plan and is left out. The residual is not charged either.

``PlanCoster`` evaluates a plan in time linear in the number of units by
summing cardinalities along root paths instead of materializing layouts;
``layout.plan_layout`` is the node-by-node reference it must agree with.
"""

from __future__ import annotations

import heapq
import time
import timeit
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .factorize import RESIDUAL, FactorizationMap
from .join_tree import JoinTree, availability, repair
from .layout import sites


@dataclass(frozen=True)
class CostConfig:
    lam: float = 1.0
    multipliers: Mapping[str, float] = field(default_factory=dict)
    aggregate: bool = True
    bytes_per_slot: int = 4

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError("lambda must be non-negative")

    def mult(self, kind: str) -> float:
        return float(self.multipliers.get(kind, 1.0))

    def price(self, work: Mapping[str, float]) -> float:
        return sum(v * self.mult(k) for k, v in work.items())


class PlanCoster:
    """Precomputed context for repeated cost evaluations over one (tree, map, config)."""

    def __init__(self, tree: JoinTree, fmap: FactorizationMap, config: CostConfig | None = None):
        self.tree = tree
        self.fmap = fmap
        self.config = config or CostConfig()
        self.homes = fmap.homes()
        size = tree.size
        self.card = [0.0] + [float(tree.nodes[i].cardinality) for i in range(1, size + 1)]
        self.parent = [0] * (size + 1)
        for c, p in tree.parent.items():
            self.parent[c] = p
        # path sums of cardinality from each node up to and including the root
        self.pathsum = [0.0] * (size + 1)
        for i in range(size, 0, -1):
            self.pathsum[i] = self.card[i] + (self.pathsum[self.parent[i]] if self.parent[i] else 0.0)
        self.key_io = sum(self.card[i] * len(tree.key_columns(i)) for i in range(1, size + 1))
        self.units = [(u.uid, u.home, self.config.price(u.work)) for u in fmap.units]
        self.raw = [(r.leaf, r.dim, r.consumers) for r in fmap.raw]
        agg = self.config.aggregate
        self.plain_exports = []
        self.combine_exports: dict[str, list[int]] = {c: [] for c in fmap.combines}
        for u in fmap.units:
            for e in u.exports:
                if e.combine is not None and e.combine in fmap.combines:
                    self.combine_exports[e.combine].append(u.uid)
                else:
                    self.plain_exports.append((u.uid, e.dim, e.consumers))
        self.combines = [
            (c.node, c.owner, c.dim, self.config.mult(c.merge_kind) * c.merge_work, agg)
            for c in fmap.combines.values()
        ]
        self.evaluations = 0

    # -------------------------------------------------------------- core

    def _sites(self, plan: Sequence[int]) -> list[int]:
        size = self.tree.size
        s = [0] * (size + 1)  # 0 means "above the root" (residual)
        for i in range(size, 0, -1):
            s[i] = i if plan[i - 1] else s[self.parent[i]] if self.parent[i] else 0
        return s

    def breakdown(self, plan: Sequence[int]) -> tuple[float, float]:
        """(compute term, data-movement term before lambda) of a valid plan."""
        self.evaluations += 1
        card, ps, parent = self.card, self.pathsum, self.parent
        s = self._sites(plan)
        place = {uid: s[home] for uid, home, _ in self.units}
        compute = 0.0
        for uid, home, cost in self.units:
            p = place[uid]
            if p:
                compute += card[p] * cost
        io = self.key_io

        def top(consumers) -> int:
            best = 0
            for c in consumers:
                if c == RESIDUAL:
                    return 0
                p = place[c]
                if not p:
                    return 0
                best = max(best, p)
            return best

        for leaf, dim, consumers in self.raw:
            io += dim * (ps[leaf] - ps[top(consumers)])
        for uid, dim, consumers in self.plain_exports:
            io += dim * (ps[place[uid]] - ps[top(consumers)])
        for cname, owner, dim, merge, agg in self.combines:
            contributors = self.combine_exports[cname]
            if not contributors:
                continue
            q = 0 if owner == RESIDUAL else place[owner]
            if not agg:
                for uid in contributors:
                    io += dim * (ps[place[uid]] - ps[q])
                if q:
                    compute += card[q] * (len(contributors) - 1) * merge
                continue
            arrivals: dict[int, int] = {}
            for uid in contributors:
                p = place[uid]
                arrivals[p] = arrivals.get(p, 0) + 1
            heap = list(arrivals)
            heapq.heapify(heap)
            while heap:
                site = heapq.heappop(heap)
                k = arrivals[site]
                if k >= 2:
                    compute += card[site] * (k - 1) * merge
                if site == q:
                    continue
                nxt = s[parent[site]] if parent[site] else 0
                io += dim * (ps[site] - ps[nxt])
                if nxt:
                    if nxt not in arrivals:
                        arrivals[nxt] = 0
                        heapq.heappush(heap, nxt)
                    arrivals[nxt] += 1
        return compute, io

    def cost(self, plan: Sequence[int]) -> float:
        compute, io = self.breakdown(plan)
        return compute + self.config.lam * io

    def repaired_cost(self, plan: Sequence[int]) -> float:
        return self.cost(repair(self.tree, plan, self.homes))

    def delta(self, plan: Sequence[int], node: int) -> float:
        """Signed change from setting ``node`` to 1 (both sides repaired)."""
        flipped = list(plan)
        flipped[node - 1] = 1
        return self.repaired_cost(flipped) - self.repaired_cost(plan)


def plan_cost(tree: JoinTree, plan: Sequence[int], fmap: FactorizationMap, config: CostConfig | None = None) -> float:
    return PlanCoster(tree, fmap, config).cost(plan)


def node_delta_cost(tree: JoinTree, plan: Sequence[int], node: int, fmap: FactorizationMap,
                    config: CostConfig | None = None) -> float:
    """Cost change of pushing at ``node`` (which must be 0 and have something available)."""
    if plan[node - 1]:
        raise ValueError(f"node {node} already pushes")
    if not availability(tree, plan, fmap.homes())[node]:
        raise ValueError(f"node {node} has nothing available to push")
    return PlanCoster(tree, fmap, config).delta(plan, node)


# ------------------------------------------------------------- node features


@dataclass(frozen=True)
class NodeCostFeatures:
    """Inputs of the push-down benefit predictor for one node.

    cardinality_ratio: rows out of the parent join / rows this node feeds in
    factorized_cost: per-tuple work of the units available at the node
    tuple_dim_ratio: output width when pushing / output width when not
    depth_ratio: depth of the node / height of the tree
    """

    cardinality_ratio: float
    factorized_cost: float
    tuple_dim_ratio: float
    depth_ratio: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cardinality_ratio, self.factorized_cost, self.tuple_dim_ratio, self.depth_ratio)


def node_features(tree: JoinTree, plan: Sequence[int], node: int, fmap: FactorizationMap,
                  config: CostConfig | None = None) -> NodeCostFeatures:
    from .layout import plan_layout

    config = config or CostConfig()
    homes = fmap.homes()
    avail = availability(tree, plan, homes)[node]
    units = fmap.by_uid()
    work = sum(config.price(units[u].work) for u in avail)
    n = tree.nodes[node].cardinality
    parent = tree.parent.get(node)
    card_ratio = (tree.nodes[parent].cardinality / n) if parent and n > 0 else 1.0
    base = repair(tree, plan, homes)
    pushed = list(plan)
    pushed[node - 1] = 1
    pushed = repair(tree, pushed, homes)
    w0 = plan_layout(tree, base, fmap, config.aggregate)[node].width
    w1 = plan_layout(tree, pushed, fmap, config.aggregate)[node].width
    dim_ratio = w1 / w0 if w0 else 1.0
    depth_ratio = tree.depth[node] / tree.height if tree.height else 0.0
    return NodeCostFeatures(card_ratio, work, dim_ratio, depth_ratio)


# --------------------------------------------------------------- calibration


@dataclass(frozen=True)
class Calibration:
    multipliers: dict[str, float]
    residuals: dict[str, float]  # root-mean-square relative residual per op kind
    points: dict[str, int]


def calibrate_op_costs(samples: Mapping[str, Sequence[tuple[float, float]]], min_points: int = 5) -> Calibration:
    """Fit ns = multiplier * flops per op kind, through the origin.

    Each point is weighted by 1 / ns so the fit minimizes relative rather
    than absolute error; otherwise the largest sizes decide the multiplier.
    """
    mult, resid, points = {}, {}, {}
    for kind, pts in sorted(samples.items()):
        arr = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        if len(arr) < min_points:
            raise ValueError(f"{kind}: need at least {min_points} timing points, got {len(arr)}")
        if (arr[:, 1] <= 0).any():
            raise ValueError(f"{kind}: timings must be positive")
        flops, ns = arr[:, :1], arr[:, 1]
        coef, _, rank, _ = np.linalg.lstsq(flops / ns[:, None], np.ones_like(ns), rcond=None)
        if rank < 1:
            raise ValueError(f"{kind}: rank-deficient design (all FLOP counts are zero)")
        mult[kind] = float(coef[0])
        resid[kind] = float(np.sqrt(np.mean((flops[:, 0] * coef[0] / ns - 1.0) ** 2)))
        points[kind] = len(arr)
    return Calibration(mult, resid, points)


def microbench(seed: int = 0, repeats: int = 5, min_ns: float = 2e6) -> dict[str, list[tuple[float, float]]]:
    """Time the kernels behind each op kind at a few sizes: kind -> [(flops, ns per call)].

    Each size runs in a loop long enough to take ``min_ns``; the fastest of
    ``repeats`` loops is kept. Outputs go to preallocated buffers so the
    timings leave out allocation.
    """
    from . import kernels
    from .inference import QSForest, random_tree

    rng = np.random.default_rng(seed)

    def best(fn) -> float:
        timer = timeit.Timer(fn, timer=time.perf_counter_ns)
        n = 1
        while timer.timeit(n) < min_ns and n < 1 << 16:
            n *= 2
        return min(timer.repeat(repeats, n)) / n

    out: dict[str, list[tuple[float, float]]] = {k: [] for k in ("MatMul", "MatAdd", "Relu", "DecisionForest", "PQSearch")}
    rows = 2048
    for d in (8, 16, 32, 64, 128):
        x = rng.standard_normal((rows, d)).astype(np.float32)
        w = rng.standard_normal((d, 32)).astype(np.float32)
        buf, prod = np.empty_like(x), np.empty((rows, 32), np.float32)
        out["MatMul"].append((rows * 2.0 * d * 32, best(lambda: np.matmul(x, w, out=prod))))
        out["MatAdd"].append((rows * float(d), best(lambda: np.add(x, x, out=buf))))
        out["Relu"].append((rows * float(d), best(lambda: np.maximum(x, 0, out=buf))))
    for trees in (4, 8, 16, 24, 32):
        # full trees, so the node count grows with trees * depth as the flop rule assumes
        forest = QSForest.from_trees([random_tree(rng, 16, 4, split_prob=1.0) for _ in range(trees)], 16)
        x = rng.random((512, 16)).astype(np.float32)
        out["DecisionForest"].append((512.0 * trees * forest.max_depth, best(lambda: kernels.qs_masks(
            x, forest.fids, forest.thresholds, forest.node_tree, forest.bitvectors, forest.n_trees))))
    for clusters in (4, 8, 16, 32, 64):
        offsets = (np.arange(4) * clusters).astype(np.int64)
        codes = rng.integers(0, clusters, (2048, 4)).astype(np.int64)
        tables = rng.random((64, 4 * clusters)).astype(np.float32)
        out["PQSearch"].append((64.0 * 2048 * 4, best(lambda: kernels.pq_distances(tables, offsets, codes))))
    return out


__all__ = [
    "CostConfig", "PlanCoster", "plan_cost", "node_delta_cost", "NodeCostFeatures", "node_features", "sites",
    "Calibration", "calibrate_op_costs", "microbench",
]
