"""Shared builders for the test suite."""

from __future__ import annotations

import random

import numpy as np

from fjord.expr import ExprGraph, ExprNode
from fjord.factorize import simple_map
from fjord.inference import ModelBundle, PQModel, QSForest, random_tree
from fjord.join_tree import JoinTree

ACCEPTANCE_LINES: list[str] = []


def report_criterion(n: int, ok: bool, detail: str) -> None:
    """Record and print one acceptance line, then fail the test when ``ok`` is false."""
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def random_shape(m: int, rng: random.Random):
    """Random binary join shape over tables t1..tm, leaves kept in order."""
    parts = [f"t{k}" for k in range(1, m + 1)]
    while len(parts) > 1:
        i = rng.randrange(len(parts) - 1)
        parts[i:i + 2] = [(parts[i], parts[i + 1])]
    return parts[0]


def random_instance(m: int, rng: random.Random, shape=None):
    """Join tree with keys and random cardinalities plus a one-unit-per-leaf map."""
    tree = JoinTree.from_shape(shape if shape is not None else random_shape(m, rng), keys=True)
    cards = [0.0] * tree.size
    for i in range(1, tree.size + 1):
        kids = tree.children(i)
        if not kids:
            cards[i - 1] = float(rng.choice([10, 100, 1000]))
        else:
            cards[i - 1] = max(cards[kids[0] - 1], cards[kids[1] - 1]) * rng.choice([0.5, 1, 2, 5, 20])
    tree = tree.with_cardinalities(cards)
    d = rng.randint(1, 16)
    fmap = simple_map(tree, [rng.randint(1, 100) for _ in range(m)], [rng.uniform(1, 200) for _ in range(m)], [d] * m)
    return tree, fmap




def random_graph(m: int, rng: np.random.Generator, steps: int = 6):
    """Random expression over tables t1..tm of a left-deep tree.

    Returns (graph, models, column_dims, columns) where ``columns`` holds
    aligned random values for 17 joined rows.
    """
    models = ModelBundle()
    dims = {f"t{k}.x": int(rng.integers(2, 6)) for k in range(1, m + 1)}
    nodes: list[ExprNode] = []
    pool: list[tuple[str, int]] = []
    for k in range(1, m + 1):
        nodes.append(ExprNode(f"in{k}", "InputRef", (), {"columns": [f"t{k}.x"]}))
        pool.append((f"in{k}", dims[f"t{k}.x"]))
    if m >= 2 and rng.random() < 0.5:
        nodes.append(ExprNode("in_mix", "InputRef", (), {"columns": ["t1.x", f"t{m}.x"]}))
        pool.append(("in_mix", dims["t1.x"] + dims[f"t{m}.x"]))

    def pick(n):
        idx = rng.choice(len(pool), size=min(n, len(pool)), replace=False)
        return [pool[i] for i in sorted(idx)]

    def concat(picked, name):
        if len(picked) == 1:
            return picked[0]
        nodes.append(ExprNode(name, "Concat", tuple(p[0] for p in picked)))
        return name, sum(p[1] for p in picked)

    for s in range(steps):
        op = rng.choice(["MatMul", "MatMul", "Relu", "Bias", "MatAdd", "Arith", "Compare", "OpaqueUDF",
                         "DecisionForest", "PQSearch", "Softmax", "Cond"])
        nid = f"n{s}"
        if op in ("MatMul", "DecisionForest", "PQSearch"):
            src, d = concat(pick(int(rng.integers(1, 4))), f"c{s}")
            if op == "MatMul":
                out = int(rng.integers(2, 6))
                models.matrices[f"W{s}"] = rng.normal(size=(d, out)).astype(np.float32)
                nodes.append(ExprNode(nid, "MatMul", (src,), {"weight": f"W{s}"}))
                pool.append((nid, out))
            elif op == "DecisionForest":
                trees = [random_tree(rng, d, depth=4) for _ in range(5)]
                models.forests[f"F{s}"] = QSForest.from_trees(trees, d)
                leaves = bool(rng.random() < 0.5)
                nodes.append(ExprNode(nid, "DecisionForest", (src,), {"forest": f"F{s}", "with_leaves": leaves}))
                pool.append((nid, 1 + (5 if leaves else 0)))
            else:
                bounds = sorted({0, d, *rng.integers(1, d, size=2).tolist()}) if d > 1 else [0, 1]
                books = tuple(rng.normal(size=(4, b - a)).astype(np.float32) for a, b in zip(bounds, bounds[1:]))
                codes = rng.integers(0, 4, size=(30, len(books)))
                models.pq[f"P{s}"] = PQModel(tuple(bounds), books, codes, 2)
                nodes.append(ExprNode(nid, "PQSearch", (src,), {"pq": f"P{s}"}))
                pool.append((nid, 4))
        elif op in ("Relu", "Softmax"):
            (src, d), = pick(1)
            nodes.append(ExprNode(nid, op, (src,)))
            pool.append((nid, d))
        elif op == "Bias":
            (src, d), = pick(1)
            models.vectors[f"b{s}"] = rng.normal(size=d).astype(np.float32)
            nodes.append(ExprNode(nid, "Bias", (src,), {"vector": f"b{s}"}))
            pool.append((nid, d))
        elif op in ("MatAdd", "Arith", "Compare", "Cond"):
            (src, d), = pick(1)
            same = [p for p in pool if p[1] == d and p[0] != src]
            if not same:
                continue
            other = same[int(rng.integers(len(same)))][0]
            if op == "MatAdd":
                nodes.append(ExprNode(nid, "MatAdd", (src, other)))
            elif op == "Arith":
                nodes.append(ExprNode(nid, "Arith", (src, other), {"op": str(rng.choice(["+", "-", "*"]))}))
            elif op == "Compare":
                nodes.append(ExprNode(nid, "Compare", (src, other), {"op": str(rng.choice(["<", ">="]))}))
            else:
                nodes.append(ExprNode(f"p{s}", "Compare", (src,), {"op": ">", "rhs": 0.0}))
                nodes.append(ExprNode(nid, "Cond", (f"p{s}", src, other)))
            pool.append((nid, d))
        else:
            picked = pick(int(rng.integers(1, 3)))
            name = str(rng.choice(["tanh", "rowsum", "square"]))
            nodes.append(ExprNode(nid, "OpaqueUDF", tuple(p[0] for p in picked), {"name": name}))
            pool.append((nid, 1 if name == "rowsum" else sum(p[1] for p in picked)))
    outputs = [pool[-1][0]]
    if len(pool) > m + 1 and rng.random() < 0.5:
        outputs.append(pool[int(rng.integers(m, len(pool) - 1))][0])
    graph = ExprGraph(tuple(nodes), tuple(dict.fromkeys(outputs)))
    columns = {c: rng.normal(size=(17, d)).astype(np.float32) for c, d in dims.items()}
    return graph, models, dims, columns
