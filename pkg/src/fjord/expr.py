"""Expression graphs for in-query inference pipelines.

A graph is a DAG of typed operator nodes. Values are 2-D arrays of shape
(rows, dim). ``InputRef`` nodes read qualified table columns
("table.column"). Parameters that are too large to inline (weights,
forests, codebooks, scalers) are referenced by name in a ``ModelBundle``.

Besides the user-facing operators the graph also carries the internal
split forms produced by factorization: partial products/masks/tables and
the combine nodes that reassemble them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import inference as inf

USER_OPS = (
    "InputRef", "MatMul", "MatAdd", "Bias", "Relu", "Softmax", "Concat", "DecisionForest",
    "PQSearch", "MinMaxScale", "OneHot", "Compare", "BoolOp", "Arith", "Cond", "OpaqueUDF",
)
PARTIAL_OPS = ("PartialMatMul", "PartialForest", "PartialPQ")
COMBINE_OPS = ("CombineSum", "ForestCombine", "PQCombine")
ALL_OPS = USER_OPS + PARTIAL_OPS + COMBINE_OPS

# operators that distribute over a split of their input features
FACTORIZABLE = frozenset({"MatMul", "MatAdd", "Concat", "DecisionForest", "PQSearch", "MinMaxScale", "OneHot"})

_ARITY: dict[str, tuple[int, int | None]] = {
    "InputRef": (0, 0), "MatMul": (1, 1), "MatAdd": (2, None), "Bias": (1, 1), "Relu": (1, 1),
    "Softmax": (1, 1), "Concat": (1, None), "DecisionForest": (1, 1), "PQSearch": (1, 1),
    "MinMaxScale": (1, 1), "OneHot": (1, 1), "Compare": (1, 2), "BoolOp": (1, 2), "Arith": (1, 2),
    "Cond": (3, 3), "OpaqueUDF": (1, None), "PartialMatMul": (1, None), "PartialForest": (1, None),
    "PartialPQ": (1, None), "CombineSum": (1, None), "ForestCombine": (1, None), "PQCombine": (1, None),
}

UDFS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "identity": lambda x: x,
    "tanh": np.tanh,
    "sigmoid": lambda x: 1.0 / (1.0 + np.exp(-x)),
    "square": np.square,
    "abs": np.abs,
    "log1p_abs": lambda x: np.log1p(np.abs(x)),
    "rowsum": lambda x: x.sum(axis=1, keepdims=True),
    "l2norm": lambda x: np.sqrt((x * x).sum(axis=1, keepdims=True)),
}
_REDUCING_UDFS = {"rowsum", "l2norm"}


class ExprError(ValueError):
    pass


@dataclass(frozen=True)
class ExprNode:
    id: str
    op: str
    inputs: tuple[str, ...] = ()
    params: Mapping = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.op not in ALL_OPS:
            raise ExprError(f"node {self.id}: unknown op {self.op!r}")
        object.__setattr__(self, "inputs", tuple(self.inputs))
        lo, hi = _ARITY[self.op]
        n = len(self.inputs)
        if n < lo or (hi is not None and n > hi):
            raise ExprError(f"node {self.id}: {self.op} takes {lo}..{hi or 'n'} inputs, got {n}")

    def to_json(self) -> dict:
        return {"id": self.id, "op": self.op, "params": dict(self.params), "inputs": list(self.inputs)}


@dataclass(frozen=True)
class ExprGraph:
    """Nodes in topological order (inputs before consumers) plus output ids."""

    nodes: tuple[ExprNode, ...]
    outputs: tuple[str, ...]
    by_id: Mapping[str, ExprNode] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "outputs", tuple(self.outputs))
        by_id: dict[str, ExprNode] = {}
        for n in self.nodes:
            if n.id in by_id:
                raise ExprError(f"duplicate node id {n.id!r}")
            for i in n.inputs:
                if i not in by_id:
                    raise ExprError(f"node {n.id}: input {i!r} is undefined or not earlier in topological order")
            by_id[n.id] = n
        if not self.outputs:
            raise ExprError("graph has no outputs")
        for o in self.outputs:
            if o not in by_id:
                raise ExprError(f"output {o!r} is not a node")
        for n in self.nodes:
            if n.op == "InputRef" and not n.params.get("columns"):
                raise ExprError(f"InputRef {n.id} lists no columns")
        object.__setattr__(self, "by_id", by_id)

    def __getitem__(self, nid: str) -> ExprNode:
        return self.by_id[nid]

    def consumers(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for i in n.inputs:
                out[i].append(n.id)
        return out

    def sources(self) -> list[ExprNode]:
        return [n for n in self.nodes if n.op == "InputRef"]

    def columns(self) -> list[str]:
        cols: list[str] = []
        for n in self.sources():
            for c in n.params["columns"]:
                if c not in cols:
                    cols.append(c)
        return cols

    def position(self) -> dict[str, int]:
        return {n.id: k for k, n in enumerate(self.nodes)}

    def to_json(self) -> dict:
        return {"nodes": [n.to_json() for n in self.nodes], "outputs": list(self.outputs)}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))


def parse_graph(obj: dict | str) -> ExprGraph:
    """Parse the JSON form; nodes may appear in any order as long as the graph is acyclic."""
    if isinstance(obj, str):
        obj = json.loads(obj)
    raw = obj["nodes"]
    nodes = {}
    for r in raw:
        nid = str(r["id"])
        if nid in nodes:
            raise ExprError(f"duplicate node id {nid!r}")
        nodes[nid] = ExprNode(nid, r["op"], tuple(str(i) for i in r.get("inputs", [])), dict(r.get("params", {})))
    for n in nodes.values():
        for i in n.inputs:
            if i not in nodes:
                raise ExprError(f"node {n.id}: input {i!r} is undefined")
    # stable topological sort (Kahn, preserving the listed order among ready nodes)
    order = [str(r["id"]) for r in raw]
    indeg = {k: len(set(nodes[k].inputs)) for k in order}
    users: dict[str, list[str]] = {k: [] for k in order}
    for k in order:
        for i in set(nodes[k].inputs):
            users[i].append(k)
    ready = [k for k in order if indeg[k] == 0]
    placed: list[str] = []
    rank = {k: j for j, k in enumerate(order)}
    while ready:
        ready.sort(key=rank.__getitem__)
        k = ready.pop(0)
        placed.append(k)
        for u in users[k]:
            indeg[u] -= 1
            if indeg[u] == 0:
                ready.append(u)
    if len(placed) != len(order):
        raise ExprError("expression graph has a cycle")
    return ExprGraph(tuple(nodes[k] for k in placed), tuple(str(o) for o in obj["outputs"]))


def print_graph(graph: ExprGraph) -> str:
    return graph.dumps()


# ------------------------------------------------------------- dimensions


def infer_dims(graph: ExprGraph, column_dims: Mapping[str, int], models: inf.ModelBundle) -> dict[str, int]:
    """Output width (value slots per row) of every node; raises on shape mismatches."""
    dims: dict[str, int] = {}
    for n in graph.nodes:
        ins = [dims[i] for i in n.inputs]
        p = n.params
        op = n.op
        if op == "InputRef":
            try:
                d = sum(int(column_dims[c]) for c in p["columns"])
            except KeyError as e:
                raise ExprError(f"InputRef {n.id}: unknown column {e.args[0]!r}") from None
        elif op == "MatMul":
            w = _matrix(models, p["weight"])
            if ins[0] != w.shape[0]:
                raise ExprError(f"MatMul {n.id}: input width {ins[0]} vs weight rows {w.shape[0]}")
            d = w.shape[1]
        elif op == "PartialMatMul":
            w = _matrix(models, p["weight"])
            if sum(ins) != len(p["rows"]):
                raise ExprError(f"PartialMatMul {n.id}: input width {sum(ins)} vs {len(p['rows'])} rows")
            d = w.shape[1]
        elif op in ("MatAdd", "CombineSum"):
            if len(set(ins)) != 1:
                raise ExprError(f"{op} {n.id}: inputs have different widths {ins}")
            d = ins[0]
        elif op == "Bias":
            v = _vector(models, p["vector"])
            if v.shape[0] != ins[0]:
                raise ExprError(f"Bias {n.id}: width {ins[0]} vs bias length {v.shape[0]}")
            d = ins[0]
        elif op in ("Relu", "Softmax"):
            d = ins[0]
        elif op == "Concat":
            d = sum(ins)
        elif op == "DecisionForest":
            f = _forest(models, p["forest"])
            if ins[0] != f.n_features:
                raise ExprError(f"DecisionForest {n.id}: width {ins[0]} vs {f.n_features} features")
            d = 1 + (f.n_trees if p.get("with_leaves") else 0)
        elif op == "PartialForest":
            f = _forest(models, p["forest"])
            if sum(ins) != len(p["features"]):
                raise ExprError(f"PartialForest {n.id}: input width vs feature list")
            d = f.n_trees * f.n_blocks
        elif op == "ForestCombine":
            f = _forest(models, p["forest"])
            d = 1 + (f.n_trees if p.get("with_leaves") else 0)
        elif op == "PQSearch":
            q = _pq(models, p["pq"])
            if ins[0] != q.n_features:
                raise ExprError(f"PQSearch {n.id}: width {ins[0]} vs {q.n_features} dims")
            d = 2 * q.k
        elif op == "PartialPQ":
            q = _pq(models, p["pq"])
            d = sum(q.codebooks[k].shape[0] for k in p["parts"])
        elif op == "PQCombine":
            d = 2 * _pq(models, p["pq"]).k
        elif op == "MinMaxScale":
            s = _scaler(models, p["scaler"], "minmax")
            if s.out_dim != ins[0]:
                raise ExprError(f"MinMaxScale {n.id}: width {ins[0]} vs scaler width {s.out_dim}")
            d = ins[0]
        elif op == "OneHot":
            s = _scaler(models, p["scaler"], "onehot")
            if ins[0] != 1:
                raise ExprError(f"OneHot {n.id}: expects one column")
            d = s.out_dim
        elif op in ("Compare", "Arith", "BoolOp"):
            if len(ins) == 2 and ins[0] != ins[1]:
                raise ExprError(f"{op} {n.id}: operand widths differ")
            d = ins[0]
        elif op == "Cond":
            if ins[1] != ins[2] or ins[0] not in (1, ins[1]):
                raise ExprError(f"Cond {n.id}: branch widths differ")
            d = ins[1]
        elif op == "OpaqueUDF":
            name = p.get("name", "")
            if name not in UDFS:
                raise ExprError(f"OpaqueUDF {n.id}: unknown function {name!r}")
            d = 1 if name in _REDUCING_UDFS else sum(ins)
        else:  # pragma: no cover
            raise ExprError(f"no width rule for {op}")
        dims[n.id] = int(d)
    return dims


def _lookup(table: Mapping, key: str, what: str):
    try:
        return table[key]
    except KeyError:
        raise ExprError(f"unknown {what} {key!r}") from None


def _matrix(m: inf.ModelBundle, k: str) -> np.ndarray:
    return _lookup(m.matrices, k, "matrix")


def _vector(m: inf.ModelBundle, k: str) -> np.ndarray:
    return _lookup(m.vectors, k, "vector")


def _forest(m: inf.ModelBundle, k: str) -> inf.QSForest:
    return _lookup(m.forests, k, "forest")


def _pq(m: inf.ModelBundle, k: str) -> inf.PQModel:
    return _lookup(m.pq, k, "pq model")


def _scaler(m: inf.ModelBundle, k: str, kind: str) -> inf.ScalerSpec:
    s = _lookup(m.scalers, k, "scaler")
    if s.kind != kind:
        raise ExprError(f"scaler {k} is {s.kind}, expected {kind}")
    return s


# --------------------------------------------------------------- evaluation


@dataclass
class EvalStats:
    unknown_categories: int = 0


_CMP = {"<": np.less, "<=": np.less_equal, ">": np.greater, ">=": np.greater_equal, "==": np.equal, "!=": np.not_equal}
_ARITH = {"+": np.add, "-": np.subtract, "*": np.multiply, "/": np.divide}


def _binary(n: ExprNode, args: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    if len(args) == 2:
        return args[0], args[1]
    if "rhs" not in n.params:
        raise ExprError(f"{n.op} {n.id}: needs a second input or an 'rhs' constant")
    return args[0], np.float32(n.params["rhs"])


def as_matrix(values: np.ndarray) -> np.ndarray:
    """Column values as a (rows, width) block; object columns stay object."""
    if values.ndim == 1:
        values = values[:, None]
    return values if values.dtype == object else np.ascontiguousarray(values, dtype=np.float32)


def eval_node(
    n: ExprNode, args: list[np.ndarray], models: inf.ModelBundle, stats: EvalStats | None = None,
    columns: Mapping[str, np.ndarray] | None = None,
) -> np.ndarray:
    """Evaluate one node given its input values (combine nodes take any number of partials)."""
    p = n.params
    op = n.op
    if op == "InputRef":
        assert columns is not None
        blocks = [as_matrix(columns[c]) for c in p["columns"]]
        if len(blocks) == 1:
            return blocks[0]
        if any(b.dtype == object for b in blocks):
            return np.concatenate([b.astype(object) for b in blocks], axis=1)
        return np.concatenate(blocks, axis=1)
    if op == "MatMul":
        return inf._rows(args[0]) @ _matrix(models, p["weight"])
    if op == "PartialMatMul":
        x = args[0] if len(args) == 1 else np.concatenate(args, axis=1)
        return inf.dense_partial(x, _matrix(models, p["weight"]), np.asarray(p["rows"]))
    if op in ("MatAdd", "CombineSum"):
        return inf.dense_combine(args)
    if op == "Bias":
        return (args[0] + _vector(models, p["vector"])).astype(np.float32)
    if op == "Relu":
        return inf.apply_activation(args[0], "relu")
    if op == "Softmax":
        return inf.apply_activation(args[0], "softmax")
    if op == "Concat":
        if any(a.dtype == object for a in args):
            return np.concatenate([a.astype(object) for a in args], axis=1)
        return np.concatenate(args, axis=1)
    if op == "DecisionForest":
        f = _forest(models, p["forest"])
        score, leaves = inf.qs_score(f, args[0])
        return _forest_output(score, leaves, p)
    if op == "PartialForest":
        f = _forest(models, p["forest"])
        x = args[0] if len(args) == 1 else np.concatenate(args, axis=1)
        masks = inf.qs_partial(f, x, p["features"])
        return masks.reshape(masks.shape[0], -1)
    if op == "ForestCombine":
        f = _forest(models, p["forest"])
        masks = inf.qs_combine(args).reshape(-1, f.n_trees, f.n_blocks)
        score, leaves = inf.qs_score_from_masks(f, masks)
        return _forest_output(score, leaves, p)
    if op == "PQSearch":
        q = _pq(models, p["pq"])
        idx, dist = inf.pq_search(q, args[0])
        return np.concatenate([idx.astype(np.float32), dist], axis=1)
    if op == "PartialPQ":
        q = _pq(models, p["pq"])
        x = args[0] if len(args) == 1 else np.concatenate(args, axis=1)
        return inf.pq_tables(q, x, p["parts"], p["features"])
    if op == "PQCombine":
        q = _pq(models, p["pq"])
        # inputs arrive in the order listed in params["parts"]; reorder to part order
        order = [k for parts in p["parts"] for k in parts]
        cols = np.concatenate(args, axis=1)
        counts = [q.codebooks[k].shape[0] for k in order]
        offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
        blocks = {k: cols[:, offsets[j] : offsets[j] + counts[j]] for j, k in enumerate(order)}
        idx, dist = inf.pq_combine([blocks[k] for k in range(q.n_parts)], q.codes, q.k)
        return np.concatenate([idx.astype(np.float32), dist], axis=1)
    if op == "MinMaxScale":
        return inf.min_max(args[0], _scaler(models, p["scaler"], "minmax"))
    if op == "OneHot":
        out, unknown = inf.one_hot(args[0], _scaler(models, p["scaler"], "onehot"))
        if stats is not None:
            stats.unknown_categories += unknown
        return out
    if op == "Compare":
        a, b = _binary(n, args)
        return _CMP[p["op"]](a, b).astype(np.float32)
    if op == "BoolOp":
        if p["op"] == "not":
            return (args[0] == 0).astype(np.float32)
        a, b = args[0] != 0, args[1] != 0
        return (a & b if p["op"] == "and" else a | b).astype(np.float32)
    if op == "Arith":
        a, b = _binary(n, args)
        with np.errstate(divide="ignore", invalid="ignore"):
            return _ARITH[p["op"]](a, b).astype(np.float32)
    if op == "Cond":
        return np.where(args[0] != 0, args[1], args[2]).astype(np.float32)
    if op == "OpaqueUDF":
        x = args[0] if len(args) == 1 else np.concatenate(args, axis=1)
        with np.errstate(over="ignore"):
            return np.asarray(UDFS[p["name"]](x.astype(np.float32)), dtype=np.float32)
    raise ExprError(f"cannot evaluate {op}")  # pragma: no cover


def _forest_output(score: np.ndarray, leaves: np.ndarray, params: Mapping) -> np.ndarray:
    if params.get("with_leaves"):
        return np.concatenate([score[:, None], leaves.astype(np.float32)], axis=1)
    return score[:, None]


def evaluate(
    graph: ExprGraph, columns: Mapping[str, np.ndarray], models: inf.ModelBundle, stats: EvalStats | None = None
) -> dict[str, np.ndarray]:
    """Evaluate the whole graph over the given columns; returns output id -> value."""
    vals: dict[str, np.ndarray] = {}
    for n in graph.nodes:
        vals[n.id] = eval_node(n, [vals[i] for i in n.inputs], models, stats, columns)
    return {o: vals[o] for o in graph.outputs}


# --------------------------------------------------------------------- cost

COST_KINDS = ("MatMul", "MatAdd", "Relu", "DecisionForest", "PQSearch", "other")
_COST_KIND = {
    "MatMul": "MatMul", "PartialMatMul": "MatMul", "MatAdd": "MatAdd", "CombineSum": "MatAdd",
    "Relu": "Relu", "DecisionForest": "DecisionForest", "PartialForest": "DecisionForest",
    "ForestCombine": "DecisionForest", "PQSearch": "PQSearch", "PartialPQ": "PQSearch", "PQCombine": "PQSearch",
}


def cost_kind(op: str) -> str:
    return _COST_KIND.get(op, "other")


def node_flops(n: ExprNode, dims: Mapping[str, int], models: inf.ModelBundle) -> float:
    """Per-tuple work of one node before calibration.

    Combine nodes report only their fixed part; summing k partials costs
    (k - 1) * width on top, which depends on the plan.
    """
    p = n.params
    op = n.op
    if op == "InputRef":
        return 0.0
    if op == "MatMul":
        w = _matrix(models, p["weight"])
        return 2.0 * w.shape[0] * w.shape[1]
    if op == "PartialMatMul":
        return 2.0 * len(p["rows"]) * _matrix(models, p["weight"]).shape[1]
    if op == "MatAdd":
        return float(dims[n.id] * (len(n.inputs) - 1))
    if op == "CombineSum":
        return 0.0
    if op == "DecisionForest":
        f = _forest(models, p["forest"])
        return float(f.n_trees * max(f.max_depth, 1))
    if op == "PartialForest":
        f = _forest(models, p["forest"])
        sel, _ = f.subset(p["features"])
        share = sel.shape[0] / max(f.fids.shape[0], 1)
        return float(f.n_trees * max(f.max_depth, 1) * share)
    if op == "ForestCombine":
        return float(_forest(models, p["forest"]).n_trees)
    if op == "PQSearch":
        q = _pq(models, p["pq"])
        return float(sum(3 * cb.shape[0] * cb.shape[1] for cb in q.codebooks))
    if op == "PartialPQ":
        q = _pq(models, p["pq"])
        return float(sum(3 * q.codebooks[k].shape[0] * q.codebooks[k].shape[1] for k in p["parts"]))
    if op == "PQCombine":
        q = _pq(models, p["pq"])
        return float(q.database_size * q.n_parts)
    return float(dims[n.id])


def merge_flops(n: ExprNode, dims: Mapping[str, int], models: inf.ModelBundle) -> float:
    """Work of folding one more partial into a combine node's running result."""
    if n.op == "CombineSum":
        return float(dims[n.id])
    if n.op == "ForestCombine":
        f = _forest(models, n.params["forest"])
        return float(f.n_trees * f.n_blocks)
    return 0.0


def expr_cost(
    graph: ExprGraph, dims: Mapping[str, int], models: inf.ModelBundle,
    multipliers: Mapping[str, float] | None = None, nodes: Sequence[str] | None = None,
) -> float:
    """Calibrated per-tuple cost of ``nodes`` (default: the whole graph)."""
    mult = multipliers or {}
    ids = nodes if nodes is not None else [n.id for n in graph.nodes]
    total = 0.0
    for nid in ids:
        n = graph[nid]
        total += node_flops(n, dims, models) * float(mult.get(cost_kind(n.op), 1.0))
    return total
