"""Synthetic star/snowflake workloads with an inference model over the joined features.

Every table has an ``id`` primary key and a ``feat`` float32-array column.
A table referencing another holds ``fk_<name>``; with fan-out f each
referenced row is matched f times on average (exactly f under the uniform
distribution), so the join on that edge returns ``rows(referenced) * f`` rows.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import expr as ex
from . import inference as inf
from .join_tree import JoinSpec, JoinTree, QuerySpec, build_join_tree
from .relational import INT64, STRING, Column, DataType, Table, float_array, load_csv, write_csv

MODELS = ("ffnn", "qs", "pq", "pipeline")
TREE_COUNTS = (16, 48, 64, 128)
MAX_ROWS = 100_000
MAX_NEURONS = 256


@dataclass(frozen=True)
class WorkloadConfig:
    n_tables: int = 3
    shape: str = "star"  # or "snowflake"
    fact_rows: int = 10_000
    fanout: int | Sequence[int] = 10
    features: int | Sequence[int] = 30  # total, or one entry per table
    distribution: str = "uniform"  # or "zipf"
    model: str = "ffnn"
    layers: int | None = None  # sampled from 1..5 when None
    neurons: int | Sequence[int] | None = None  # sampled from 16..256 when None
    trees: int | None = None  # sampled from TREE_COUNTS when None
    depth: int = 6
    pq_database: int = 128
    pq_clusters: int = 16
    pq_k: int = 4
    categories: int = 8
    seed: int = 0

    def to_json(self) -> dict:
        d = asdict(self)
        for k in ("fanout", "features", "neurons"):
            if isinstance(d[k], tuple):
                d[k] = list(d[k])
        return d

    @classmethod
    def from_json(cls, d: dict) -> "WorkloadConfig":
        d = dict(d)
        for k in ("fanout", "features", "neurons"):
            if isinstance(d.get(k), list):
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class Workload:
    config: WorkloadConfig
    tables: dict[str, Table]
    query: QuerySpec
    graph: ex.ExprGraph
    models: inf.ModelBundle
    parents: dict[str, str] = field(default_factory=dict)  # referenced table -> referencing table

    @property
    def column_dims(self) -> dict[str, int]:
        return {f"{t.name}.{c.name}": c.dtype.slots for t in self.tables.values() for c in t.columns}

    def join_tree(self) -> JoinTree:
        return build_join_tree(self.tables, self.query, self.query.order)

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        schema = {}
        for name, t in self.tables.items():
            write_csv(t, d / f"{name}.csv")
            schema[name] = [[c, dt.to_json()] for c, dt in t.schema]
        _dump(d / "schema.json", schema)
        _dump(d / "query.json", self.query.to_json())
        (d / "graph.json").write_text(self.graph.dumps() + "\n")
        _dump(d / "workload.json", {"config": self.config.to_json(), "parents": self.parents})
        self.models.save(d / "models.json")

    @classmethod
    def load(cls, directory: str | Path) -> "Workload":
        d = Path(directory)
        schema = json.loads((d / "schema.json").read_text())
        tables = {}
        for name, cols in schema.items():
            tables[name] = load_csv(d / f"{name}.csv", [(c, DataType.from_json(t)) for c, t in cols], name)
        meta = json.loads((d / "workload.json").read_text())
        return cls(
            WorkloadConfig.from_json(meta["config"]), tables, QuerySpec.from_json(json.loads((d / "query.json").read_text())),
            ex.parse_graph((d / "graph.json").read_text()), inf.ModelBundle.load(d / "models.json"), meta["parents"],
        )


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _per_table(value: int | Sequence[int], n: int, what: str) -> list[int]:
    if isinstance(value, int):
        return [value] * n
    out = [int(v) for v in value]
    if len(out) != n:
        raise ValueError(f"{what}: expected {n} entries, got {len(out)}")
    return out


def _split_features(total: int | Sequence[int], n: int, rng: np.random.Generator) -> list[int]:
    if not isinstance(total, int):
        return _per_table(total, n, "features")
    if total < n:
        raise ValueError(f"need at least one feature per table ({n}), got {total}")
    extra = rng.multinomial(total - n, [1.0 / n] * n)
    return [1 + int(e) for e in extra]


def _foreign_keys(rng: np.random.Generator, n_rows: int, n_ref: int, distribution: str) -> np.ndarray:
    if distribution == "uniform":
        return rng.permutation(np.arange(n_rows, dtype=np.int64) % n_ref)
    if distribution == "zipf":
        p = 1.0 / np.arange(1, n_ref + 1)
        return rng.choice(n_ref, size=n_rows, p=p / p.sum()).astype(np.int64)
    raise ValueError(f"unknown distribution {distribution!r}")


def gen_workload(config: WorkloadConfig, seed: int | None = None) -> Workload:
    """Tables, query and model for ``config``; fully determined by the seed."""
    cfg = config if seed is None else WorkloadConfig(**{**asdict(config), "seed": seed})
    n = cfg.n_tables
    if not 2 <= n <= 20:
        raise ValueError("table count must be between 2 and 20")
    if cfg.shape not in ("star", "snowflake"):
        raise ValueError(f"unknown shape {cfg.shape!r}")
    if cfg.model not in MODELS:
        raise ValueError(f"unknown model {cfg.model!r}; choose from {', '.join(MODELS)}")
    if not 1 <= cfg.fact_rows <= MAX_ROWS:
        raise ValueError(f"fact rows must be in 1..{MAX_ROWS}")
    rng = np.random.default_rng(cfg.seed)
    names = ["fact"] + [f"d{k}" for k in range(1, n)]
    parent = {}
    for k in range(1, n):
        parent[names[k]] = "fact" if cfg.shape == "star" or k == 1 else names[int(rng.integers(0, k))]
    fanouts = _per_table(cfg.fanout, n - 1, "fanout")
    if any(f < 1 for f in fanouts):
        raise ValueError("fan-out must be at least 1")
    rows = {"fact": cfg.fact_rows}
    for k in range(1, n):
        rows[names[k]] = max(1, rows[parent[names[k]]] // fanouts[k - 1])
    feats = dict(zip(names, _split_features(cfg.features, n, rng)))
    cat_table = names[1] if cfg.model == "pipeline" else None

    tables = {}
    for name in names:
        cols = [Column("id", INT64, np.arange(rows[name], dtype=np.int64))]
        for k in range(1, n):
            child = names[k]
            if parent[child] == name:
                cols.append(Column(f"fk_{child}", INT64, _foreign_keys(rng, rows[name], rows[child], cfg.distribution)))
        x = rng.standard_normal((rows[name], feats[name])).astype(np.float32)
        cols.append(Column("feat", float_array(feats[name]), x))
        if name == cat_table:
            cats = rng.integers(0, cfg.categories, rows[name])
            cols.append(Column("cat", STRING, np.array([f"c{c}" for c in cats], dtype=object)))
        tables[name] = Table(name, tuple(cols))
    joins = tuple(JoinSpec(f"{parent[c]}.fk_{c}", f"{c}.id") for c in names[1:])
    query = QuerySpec(tuple(names), joins, tuple(names))
    graph, models = _model(cfg, rng, names, feats, tables)
    return Workload(cfg, tables, query, graph, models, parent)


def _dense(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return (rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)).astype(np.float32)


def _model(cfg: WorkloadConfig, rng: np.random.Generator, names: list[str], feats: dict[str, int],
           tables: dict[str, Table]) -> tuple[ex.ExprGraph, inf.ModelBundle]:
    nodes: list[ex.ExprNode] = []
    models = inf.ModelBundle()
    inputs = []
    for t in names:
        nid = f"in_{t}"
        nodes.append(ex.ExprNode(nid, "InputRef", (), {"columns": [f"{t}.feat"]}))
        inputs.append(nid)
    total = sum(feats.values())
    outputs: list[str] = []

    if cfg.model == "pipeline":
        scaled = []
        for t, nid in zip(names, inputs):
            x = tables[t].column("feat").values
            lo, hi = x.min(axis=0) if len(x) else np.zeros(feats[t]), x.max(axis=0) if len(x) else np.ones(feats[t])
            models.scalers[f"mm_{t}"] = inf.ScalerSpec("minmax", tuple(map(float, lo)), tuple(map(float, hi)))
            nodes.append(ex.ExprNode(f"scale_{t}", "MinMaxScale", (nid,), {"scaler": f"mm_{t}"}))
            scaled.append(f"scale_{t}")
        models.scalers["cat"] = inf.ScalerSpec("onehot", categories=tuple(f"c{c}" for c in range(cfg.categories)))
        nodes.append(ex.ExprNode("in_cat", "InputRef", (), {"columns": [f"{names[1]}.cat"]}))
        nodes.append(ex.ExprNode("onehot", "OneHot", ("in_cat",), {"scaler": "cat"}))
        scaled.append("onehot")
        total += cfg.categories
        inputs = scaled
        outputs.append("onehot")
    nodes.append(ex.ExprNode("x", "Concat", tuple(inputs)))

    if cfg.model in ("ffnn", "pipeline"):
        layers = cfg.layers if cfg.layers is not None else int(rng.integers(1, 6))
        widths = _per_table(cfg.neurons, layers, "neurons") if cfg.neurons is not None else [
            int(rng.integers(16, MAX_NEURONS + 1)) for _ in range(layers)]
        if any(not 1 <= w <= MAX_NEURONS for w in widths):
            raise ValueError(f"layer widths must be in 1..{MAX_NEURONS}")
        prev, fan_in = "x", total
        for li, w in enumerate(widths):
            models.matrices[f"W{li}"] = _dense(rng, fan_in, w)
            models.vectors[f"b{li}"] = (0.1 * rng.standard_normal(w)).astype(np.float32)
            nodes.append(ex.ExprNode(f"mm{li}", "MatMul", (prev,), {"weight": f"W{li}"}))
            nodes.append(ex.ExprNode(f"bias{li}", "Bias", (f"mm{li}",), {"vector": f"b{li}"}))
            prev = f"bias{li}"
            if li < layers - 1:
                nodes.append(ex.ExprNode(f"relu{li}", "Relu", (prev,)))
                prev = f"relu{li}"
            fan_in = w
        outputs.insert(0, prev)
    elif cfg.model == "qs":
        trees = cfg.trees if cfg.trees is not None else int(rng.choice(TREE_COUNTS))
        forest = inf.QSForest.from_trees([inf.random_tree(rng, total, cfg.depth) for _ in range(trees)], total)
        models.forests["forest"] = forest
        nodes.append(ex.ExprNode("score", "DecisionForest", ("x",), {"forest": "forest", "with_leaves": True}))
        outputs.append("score")
    else:
        bounds = [0]
        for t in names:
            start = bounds[-1]
            for lo in range(0, feats[t], 8):
                bounds.append(start + min(lo + 8, feats[t]))
        books = tuple((rng.standard_normal((cfg.pq_clusters, b - a))).astype(np.float32) for a, b in zip(bounds, bounds[1:]))
        codes = rng.integers(0, cfg.pq_clusters, (cfg.pq_database, len(books)))
        models.pq["pq"] = inf.PQModel(tuple(bounds), books, codes, cfg.pq_k)
        nodes.append(ex.ExprNode("nn", "PQSearch", ("x",), {"pq": "pq"}))
        outputs.append("nn")
    return ex.ExprGraph(tuple(nodes), tuple(outputs)), models


def star_speedup_workload(seed: int = 0, dim_rows: int = 100, fanout: int = 500, features: int = 500,
                          hidden: int = 32) -> Workload:
    """Three small dimension tables, a large fact table, and a wide first layer over dimension features.

    The fact table carries a single feature so nearly all of the first
    layer's input comes from tables that the join repeats ``fanout`` times.
    """
    per_dim = (features - 1) // 3
    feats = (1, per_dim, per_dim, features - 1 - 2 * per_dim)
    cfg = WorkloadConfig(n_tables=4, shape="star", fact_rows=dim_rows * fanout, fanout=fanout, features=feats,
                         model="ffnn", layers=2, neurons=(hidden, 4), seed=seed)
    return gen_workload(cfg)
