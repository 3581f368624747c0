"""Execute a push-down plan over real tables and compare results across plans.

Execution is bottom-up over the join tree. Each node's frame holds the
raw columns, unit outputs ("blocks") and join keys its layout says must
leave the node, plus row-id metadata per base table that is used only to
line results up for verification. Unit work runs over fixed-size row
chunks, so the thread count never changes a result.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import expr as ex
from . import inference as inf
from .cost_model import CostConfig, PlanCoster
from .factorize import RESIDUAL, FactorizationMap
from .join_tree import JoinTree, validate_plan
from .layout import NodeLayout, placements, plan_layout
from .relational import INT64, Column, DataType, Table, float_array, join_indices

CHUNK_ROWS = 16384
ROWID_SUFFIX = ".__rowid"


class ExecutionError(RuntimeError):
    pass


@dataclass(frozen=True)
class RewrittenPlan:
    tree: JoinTree
    plan: tuple[int, ...]
    fmap: FactorizationMap
    models: inf.ModelBundle
    layout: Mapping[int, NodeLayout]
    aggregate: bool
    monolithic: bool  # every unit lands at the root, so the original graph runs there unsplit

    @property
    def pushed_nodes(self) -> list[int]:
        return [i for i, v in enumerate(self.plan, start=1) if v]


def rewrite(tree: JoinTree, plan: Sequence[int], fmap: FactorizationMap, models: inf.ModelBundle,
            aggregate: bool = True) -> RewrittenPlan:
    if fmap.graph is None or fmap.original is None:
        raise ValueError("factorization map carries no expression graph; build it with factorize.analyze")
    plan = tuple(int(v) for v in plan)
    if not validate_plan(tree, plan, fmap.homes()):
        raise ValueError(f"plan {list(plan)} is not valid for this tree")
    place = placements(tree, plan, fmap)
    mono = all(p == tree.root or p is None for p in place.values())
    return RewrittenPlan(tree, plan, fmap, models, plan_layout(tree, plan, fmap, aggregate), aggregate, mono)


# --------------------------------------------------------------------- frames


@dataclass
class Frame:
    rows: int
    raw: dict[str, np.ndarray] = field(default_factory=dict)
    blocks: dict[str, np.ndarray] = field(default_factory=dict)
    keys: dict[str, np.ndarray] = field(default_factory=dict)
    rowids: dict[str, np.ndarray] = field(default_factory=dict)

    def width(self, dims: Mapping[str, int]) -> int:
        w = sum(dims[c] for c in self.raw) + len(self.keys)
        return w + sum(b.shape[1] for b in self.blocks.values())

    def take(self, idx: np.ndarray, pool: ThreadPoolExecutor | None) -> "Frame":
        items = [("raw", k, v) for k, v in self.raw.items()] + [("blocks", k, v) for k, v in self.blocks.items()]
        items += [("keys", k, v) for k, v in self.keys.items()] + [("rowids", k, v) for k, v in self.rowids.items()]

        def gather(item):
            return item[2][idx]

        taken = list(pool.map(gather, items)) if pool is not None else [gather(it) for it in items]
        out = Frame(int(idx.shape[0]))
        for (kind, k, _), v in zip(items, taken):
            getattr(out, kind)[k] = v
        return out


def _merge(a: Frame, b: Frame, li: np.ndarray, ri: np.ndarray, pool) -> Frame:
    left, right = a.take(li, pool), b.take(ri, pool)
    for kind in ("raw", "blocks", "keys", "rowids"):
        getattr(left, kind).update(getattr(right, kind))
    return left


def _chunked(fn: Callable[[slice], dict[str, np.ndarray]], rows: int, pool) -> dict[str, np.ndarray]:
    """Run ``fn`` over fixed row chunks and stitch the per-chunk outputs back in order."""
    spans = [slice(lo, min(lo + CHUNK_ROWS, rows)) for lo in range(0, rows, CHUNK_ROWS)] or [slice(0, 0)]
    parts = list(pool.map(fn, spans)) if pool is not None and len(spans) > 1 else [fn(s) for s in spans]
    return {k: np.concatenate([p[k] for p in parts], axis=0) for k in parts[0]}


def _fold(kind: str, arrays: Sequence[np.ndarray]) -> np.ndarray:
    if kind == "sum":
        return inf.dense_combine(list(arrays))
    out = arrays[0].copy()
    for a in arrays[1:]:
        np.bitwise_and(out, a, out=out)
    return out


# ------------------------------------------------------------------ metrics


@dataclass
class RunMetrics:
    strategy: str = ""
    seed: int | None = None
    threads: int = 1
    plan: tuple[int, ...] = ()
    rows: dict[int, int] = field(default_factory=dict)
    widths: dict[int, int] = field(default_factory=dict)
    bytes_moved: dict[int, int] = field(default_factory=dict)
    stages: dict[str, float] = field(default_factory=dict)
    predicted_cost: float = 0.0
    optimize_time: float = 0.0

    @property
    def execute_time(self) -> float:
        return sum(self.stages.values())

    @property
    def total_time(self) -> float:
        return self.optimize_time + self.execute_time

    def to_json(self, timings: bool = True) -> dict:
        out = {
            "strategy": self.strategy, "seed": self.seed, "threads": self.threads, "plan": list(self.plan),
            "rows": {str(k): v for k, v in sorted(self.rows.items())},
            "widths": {str(k): v for k, v in sorted(self.widths.items())},
            "bytes_moved": {str(k): v for k, v in sorted(self.bytes_moved.items())},
            "total_bytes": sum(self.bytes_moved.values()), "predicted_cost": self.predicted_cost,
        }
        if timings:
            out["stages"] = dict(self.stages)
            out["optimize_time"] = self.optimize_time
            out["execute_time"] = self.execute_time
        return out


# ------------------------------------------------------------------ execute


class _Runner:
    def __init__(self, rp: RewrittenPlan, tables: Mapping[str, Table], pool, stats: ex.EvalStats):
        self.rp = rp
        self.tables = tables
        self.pool = pool
        self.stats = stats
        self.fgraph = rp.fmap.graph
        self.units = rp.fmap.by_uid()
        self.combines = rp.fmap.combines
        self.col_dims: dict[str, int] = {}
        self.export_combine = {e.node: e.combine for u in rp.fmap.units for e in u.exports}

    def scan(self, i: int) -> Frame:
        tree, lay = self.rp.tree, self.rp.layout
        tname = tree.nodes[i].table
        if tname not in self.tables:
            raise ExecutionError(f"table {tname!r} was not provided")
        t = self.tables[tname]
        f = Frame(t.row_count)
        cols = [c for r in self.rp.fmap.raw if r.leaf == i for c in r.columns]
        for q in cols:
            name = q.split(".", 1)[1]
            if name not in t:
                raise ExecutionError(f"table {tname} has no column {name!r} needed by the plan")
            c = t.column(name)
            f.raw[q] = c.values
            self.col_dims[q] = c.dtype.slots
        for k in tree.key_columns(i):
            name = k.split(".", 1)[1]
            if name not in t:
                raise ExecutionError(f"table {tname} has no join key {name!r}")
            f.keys[k] = t.column(name).values
        f.rowids[tname] = np.arange(t.row_count, dtype=np.int64)
        return f

    def join(self, j: int, a: Frame, b: Frame) -> Frame:
        node = self.rp.tree.nodes[j]
        if node.left_key is None or node.right_key is None:
            raise ExecutionError(f"join node {j} has no join keys")
        lk, rk = a.keys[node.left_key], b.keys[node.right_key]
        dt = DataType("int64") if lk.dtype.kind in "iu" else DataType("string") if lk.dtype == object else DataType("float32")
        li, ri = join_indices(Column(node.left_key, dt, lk), Column(node.right_key, dt, rk))
        return _merge(a, b, li, ri, self.pool)

    def run_units(self, i: int, f: Frame) -> None:
        lay = self.rp.layout[i]
        for uid in lay.landed:
            self._run_unit(self.units[uid], f)
        for m in lay.merges:
            if m.output is None:
                continue
            c = self.combines[m.combine]
            f.blocks[m.output] = _fold(c.kind, [f.blocks.pop(n) for n in m.inputs])

    def _args(self, n: ex.ExprNode, local: Mapping[str, np.ndarray], f: Frame, sl: slice,
              cols: Mapping[str, np.ndarray]) -> list[np.ndarray]:
        is_combine = n.id in self.combines
        args = []
        for i in n.inputs:
            if i in local:
                args.append(local[i])
            elif is_combine and self.export_combine.get(i) == n.id:
                continue  # picked up below, possibly already pre-aggregated
            elif f"x:{i}" in f.blocks:
                args.append(f.blocks[f"x:{i}"][sl])
            elif self.fgraph[i].op == "InputRef":
                args.append(ex.eval_node(self.fgraph[i], [], self.rp.models, self.stats, cols))
            else:
                raise ExecutionError(f"node {n.id}: input {i} is not available here")
        if is_combine:
            args += [b[sl] for name, b in f.blocks.items() if self.block_combine(name) == n.id]
        return args

    def block_combine(self, name: str) -> str | None:
        if name.startswith("a:"):
            return name[2:].rsplit("@", 1)[0]
        return self.export_combine.get(name[2:])

    def _eval(self, node_ids: Sequence[str], f: Frame, wanted: Sequence[str]) -> dict[str, np.ndarray]:
        graph, models = self.fgraph, self.rp.models

        def work(sl: slice) -> dict[str, np.ndarray]:
            cols = {k: v[sl] for k, v in f.raw.items()}
            local: dict[str, np.ndarray] = {}
            for nid in node_ids:
                n = graph[nid]
                local[nid] = ex.eval_node(n, self._args(n, local, f, sl, cols), models, self.stats, cols)
            return {k: local[k] for k in wanted}

        return _chunked(work, f.rows, self.pool)

    def _run_unit(self, u, f: Frame) -> None:
        out = self._eval(u.nodes, f, [e.node for e in u.exports])
        for c in self.combines.values():
            if c.owner == u.uid:
                for name in [b for b in f.blocks if self.block_combine(b) == c.node]:
                    del f.blocks[name]
        for e in u.exports:
            f.blocks[f"x:{e.node}"] = out[e.node]

    def residual(self, f: Frame) -> dict[str, np.ndarray]:
        graph = self.fgraph
        wanted = [o for o in graph.outputs]
        in_residual = [o for o in wanted if o in set(self.rp.fmap.residual_nodes)]
        vals = self._eval(self.rp.fmap.residual_nodes, f, in_residual) if self.rp.fmap.residual_nodes else {}
        out = {}
        for o in wanted:
            if o in vals:
                out[o] = vals[o]
            elif f"x:{o}" in f.blocks:
                out[o] = f.blocks[f"x:{o}"]
            elif graph[o].op == "InputRef":
                out[o] = ex.eval_node(graph[o], [], self.rp.models, self.stats, f.raw)
            else:
                raise ExecutionError(f"output {o} was not produced")
        return out

    def monolithic(self, f: Frame) -> dict[str, np.ndarray]:
        graph = self.rp.fmap.original

        def work(sl: slice) -> dict[str, np.ndarray]:
            cols = {k: v[sl] for k, v in f.raw.items()}
            vals: dict[str, np.ndarray] = {}
            for n in graph.nodes:
                vals[n.id] = ex.eval_node(n, [vals[i] for i in n.inputs], self.rp.models, self.stats, cols)
            return {o: vals[o] for o in graph.outputs}

        return _chunked(work, f.rows, self.pool)


def _output_columns(rp: RewrittenPlan, values: Mapping[str, np.ndarray]) -> list[Column]:
    graph = rp.fmap.original
    cols = []
    for o in graph.outputs:
        v = np.asarray(values[o])
        n = graph[o]
        if n.op == "DecisionForest" and n.params.get("with_leaves"):
            cols.append(Column(f"{o}.score", DataType("float32"), v[:, 0].astype(np.float32)))
            cols.append(Column(f"{o}.leaves", float_array(v.shape[1] - 1), v[:, 1:].astype(np.float32)))
        elif n.op == "PQSearch":
            k = v.shape[1] // 2
            cols.append(Column(f"{o}.indices", float_array(k), v[:, :k].astype(np.float32)))
            cols.append(Column(f"{o}.distances", float_array(k), v[:, k:].astype(np.float32)))
        elif v.dtype == object:
            raise ExecutionError(f"output {o} is not numeric")
        elif v.ndim == 2 and v.shape[1] == 1:
            cols.append(Column(o, DataType("float32"), v[:, 0].astype(np.float32)))
        else:
            cols.append(Column(o, float_array(v.shape[1]), v.astype(np.float32)))
    return cols


def exact_columns(graph: ex.ExprGraph) -> list[str]:
    """Result columns that must match bit for bit across plans."""
    out = []
    for o in graph.outputs:
        n = graph[o]
        if n.op == "DecisionForest" and n.params.get("with_leaves"):
            out.append(f"{o}.leaves")
        elif n.op == "PQSearch":
            out.append(f"{o}.indices")
        elif n.op == "OneHot":
            out.append(o)
    return out


def execute(rp: RewrittenPlan, tables: Mapping[str, Table], threads: int = 1, config: CostConfig | None = None,
            strategy: str = "", seed: int | None = None) -> tuple[Table, RunMetrics]:
    """Run ``rp`` over ``tables``; returns the result table (outputs plus row-id chain) and metrics."""
    tree = rp.tree
    config = config or CostConfig(aggregate=rp.aggregate)
    metrics = RunMetrics(strategy=strategy, seed=seed, threads=threads, plan=rp.plan)
    metrics.predicted_cost = PlanCoster(tree, rp.fmap, config).cost(rp.plan)
    stats = ex.EvalStats()
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        runner = _Runner(rp, tables, pool, stats)
        frames: dict[int, Frame] = {}
        for i in range(1, tree.size + 1):
            kids = tree.children(i)
            t0 = time.perf_counter()
            if not kids:
                f = runner.scan(i)
                metrics.stages[f"scan:{i}"] = time.perf_counter() - t0
            else:
                f = runner.join(i, frames.pop(kids[0]), frames.pop(kids[1]))
                metrics.stages[f"join:{i}"] = time.perf_counter() - t0
            lay = rp.layout[i]
            if lay.landed and not (rp.monolithic and i == tree.root):
                t0 = time.perf_counter()
                runner.run_units(i, f)
                metrics.stages[f"pushed:{i}"] = time.perf_counter() - t0
            if rp.monolithic and i == tree.root:
                # the fused pipeline never splits the root's units; report the planned width
                w = lay.width
            else:
                _project(f, lay, tree.key_columns(i))
                w = f.width(runner.col_dims)
                if w != lay.width:
                    raise ExecutionError(f"node {i}: executed width {w} differs from planned width {lay.width}")
            metrics.rows[i], metrics.widths[i] = f.rows, w
            metrics.bytes_moved[i] = f.rows * w * config.bytes_per_slot
            frames[i] = f
        f = frames[tree.root]
        t0 = time.perf_counter()
        values = runner.monolithic(f) if rp.monolithic else runner.residual(f)
        metrics.stages["final"] = time.perf_counter() - t0
        cols = _output_columns(rp, values)
        for tname in sorted(f.rowids):
            cols.append(Column(f"{tname}{ROWID_SUFFIX}", INT64, f.rowids[tname]))
    finally:
        if pool is not None:
            pool.shutdown()
    return Table("result", tuple(cols)), metrics


def _project(f: Frame, lay: NodeLayout, keys: Sequence[str]) -> None:
    keep_raw = set(lay.raw_columns)
    keep_blocks = {b.name for b in lay.blocks}
    missing = keep_blocks - set(f.blocks)
    if missing:
        raise ExecutionError(f"node {lay.node}: blocks {sorted(missing)} were never produced")
    f.raw = {k: v for k, v in f.raw.items() if k in keep_raw}
    f.blocks = {k: f.blocks[k] for k in (b.name for b in lay.blocks)}
    f.keys = {k: f.keys[k] for k in keys}


# -------------------------------------------------------------------- verify


@dataclass(frozen=True)
class ColumnDiff:
    column: str
    max_abs: float
    max_rel: float
    row: int  # row (after sorting) of the worst cell, -1 when equal
    exact: bool
    passed: bool


@dataclass(frozen=True)
class VerifyReport:
    passed: bool
    rows: int
    columns: tuple[ColumnDiff, ...]

    @property
    def max_rel(self) -> float:
        return max((c.max_rel for c in self.columns), default=0.0)

    def to_json(self) -> dict:
        return {"passed": self.passed, "rows": self.rows, "max_rel": self.max_rel,
                "columns": [c.__dict__ for c in self.columns]}


def _sort_order(t: Table) -> np.ndarray:
    names = sorted(c.name for c in t.columns if c.name.endswith(ROWID_SUFFIX))
    if not names:
        return np.arange(t.row_count)
    return np.lexsort([t.column(n).values for n in reversed(names)])


def verify(a: Table, b: Table, rel_tol: float = 1e-4, exact: Sequence[str] = ()) -> VerifyReport:
    """Compare two results after sorting both by their row-id chain.

    Float cells pass when |x - y| <= rel_tol * max(|x|, |y|, 1); columns in
    ``exact`` and integer columns must match exactly.
    """
    if a.column_names != b.column_names:
        raise ValueError(f"schema mismatch: {a.column_names} vs {b.column_names}")
    for ca, cb in zip(a.columns, b.columns):
        if ca.dtype != cb.dtype:
            raise ValueError(f"column {ca.name}: type {ca.dtype} vs {cb.dtype}")
    if a.row_count != b.row_count:
        return VerifyReport(False, a.row_count, (ColumnDiff("<rows>", float("inf"), float("inf"), -1, True, False),))
    oa, ob = _sort_order(a), _sort_order(b)
    diffs = []
    for ca, cb in zip(a.columns, b.columns):
        x, y = ca.values[oa], cb.values[ob]
        is_exact = ca.name in exact or ca.dtype.kind in ("int64", "string")
        if ca.dtype.kind == "string":
            bad = x != y
            ok = not bad.any()
            row = int(np.argmax(bad)) if not ok else -1
            diffs.append(ColumnDiff(ca.name, 0.0 if ok else float("inf"), 0.0 if ok else float("inf"), row, True, ok))
            continue
        x64, y64 = x.astype(np.float64), y.astype(np.float64)
        if x64.ndim == 1:
            x64, y64 = x64[:, None], y64[:, None]
        absd = np.abs(x64 - y64)
        both_nan = np.isnan(x64) & np.isnan(y64)
        absd[both_nan] = 0.0
        scale = np.maximum(np.maximum(np.abs(x64), np.abs(y64)), 1.0)
        rel = absd / scale
        rel[np.isnan(rel)] = np.inf
        max_abs = float(absd.max(initial=0.0))
        max_rel = float(rel.max(initial=0.0))
        ok = max_abs == 0.0 if is_exact else max_rel <= rel_tol
        row = int(np.unravel_index(np.argmax(rel), rel.shape)[0]) if rel.size and max_rel > 0 else -1
        diffs.append(ColumnDiff(ca.name, max_abs, max_rel, row, is_exact, ok))
    return VerifyReport(all(d.passed for d in diffs), a.row_count, tuple(diffs))
