"""Split an expression graph into units that can run below the root of a join tree.

The analysis walks the graph from its ``InputRef`` sources upward:

* every node gets a home, the smallest join-tree node holding all the
  columns it depends on;
* a ``MatMul``, ``DecisionForest`` or ``PQSearch`` fed by a ``Concat`` of
  inputs with different homes is split into one partial per home plus a
  combine node at the common ancestor;
* a ``MatAdd`` of computed values with different homes becomes a combine;
* nodes are grouped so that a group holds connected nodes sharing a home.

Groups homed below the root become units; everything homed at the root is
the residual, which always runs last at the root.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from . import expr as ex
from . import inference as inf
from .join_tree import JoinTree

RESIDUAL = -1
TRIVIAL_OPS = frozenset({"Concat", "CombineSum"})
AGGREGATING = {"CombineSum": "sum", "ForestCombine": "and"}


@dataclass(frozen=True)
class Export:
    """A value a unit hands to other units or to the residual."""

    node: str
    dim: int
    combine: str | None  # combine node folding this value, when it can be pre-aggregated
    consumers: tuple[int, ...]


@dataclass(frozen=True)
class Unit:
    uid: int
    home: int
    nodes: tuple[str, ...] = ()
    raw_inputs: tuple[str, ...] = ()
    unit_inputs: tuple[int, ...] = ()
    exports: tuple[Export, ...] = ()
    work: Mapping[str, float] = field(default_factory=dict)  # flops per cost kind, per tuple

    @property
    def output_dim(self) -> int:
        return sum(e.dim for e in self.exports)


@dataclass(frozen=True)
class Combine:
    node: str
    kind: str  # "sum" or "and"
    dim: int  # width of one partial block
    owner: int  # unit id or RESIDUAL
    merge_kind: str
    merge_work: float
    contributors: tuple[int, ...]


@dataclass(frozen=True)
class RawGroup:
    """Raw columns of one leaf read by the same set of consumers."""

    leaf: int
    columns: tuple[str, ...]
    dim: int
    consumers: tuple[int, ...]


@dataclass(frozen=True)
class FactorizationMap:
    units: tuple[Unit, ...]
    combines: Mapping[str, Combine]
    raw: tuple[RawGroup, ...]
    residual_nodes: tuple[str, ...] = ()
    residual_work: Mapping[str, float] = field(default_factory=dict)
    graph: ex.ExprGraph | None = None
    original: ex.ExprGraph | None = None
    dims: Mapping[str, int] = field(default_factory=dict)

    def homes(self) -> dict[int, int]:
        return {u.uid: u.home for u in self.units}

    def unit(self, uid: int) -> Unit:
        for u in self.units:
            if u.uid == uid:
                return u
        raise KeyError(uid)

    def by_uid(self) -> dict[int, Unit]:
        return {u.uid: u for u in self.units}


def simple_map(
    tree: JoinTree,
    raw_widths: Sequence[int],
    unit_costs: Sequence[float],
    out_dims: Sequence[int],
    aggregate_into: str | None = "agg",
) -> FactorizationMap:
    """One unit per leaf reading that leaf's raw columns, all feeding one sum combine.

    Handy for optimizer studies where no real expression is involved. With
    ``aggregate_into=None`` (or unequal output widths) the unit outputs go to
    the residual as separate blocks.
    """
    m = tree.m
    if not (len(raw_widths) == len(unit_costs) == len(out_dims) == m):
        raise ValueError("one raw width, unit cost and output width per leaf")
    combine = aggregate_into if aggregate_into and len(set(out_dims)) == 1 else None
    units, raw = [], []
    for j in range(1, m + 1):
        exp = Export(f"u{j}", int(out_dims[j - 1]), combine, (RESIDUAL,))
        units.append(Unit(j, j, (f"u{j}",), (f"t{j}.x",), (), (exp,), {"MatMul": float(unit_costs[j - 1])}))
        raw.append(RawGroup(j, (f"t{j}.x",), int(raw_widths[j - 1]), (j,)))
    combines = {}
    if combine:
        combines[combine] = Combine(combine, "sum", int(out_dims[0]), RESIDUAL, "MatAdd", float(out_dims[0]), tuple(range(1, m + 1)))
    return FactorizationMap(tuple(units), combines, tuple(raw))


# ---------------------------------------------------------------- lineage


def column_table(col: str) -> str:
    if "." not in col:
        raise ex.ExprError(f"column {col!r} is not qualified as table.column")
    return col.split(".", 1)[0]


def lineage(graph: ex.ExprGraph, tree: JoinTree) -> dict[str, int]:
    """InputRef id -> smallest join-tree node whose subtree holds all its columns."""
    out = {}
    for n in graph.sources():
        tables = sorted({column_table(c) for c in n.params["columns"]})
        out[n.id] = tree.node_for_tables(tables)
    return out


# -------------------------------------------------------------- expansion


def _split(n: ex.ExprNode, concat: ex.ExprNode, homes: dict[str, int], dims: Mapping[str, int],
           models: inf.ModelBundle, tree: JoinTree) -> list[tuple[ex.ExprNode, int]] | None:
    """Per-home partials and the combine replacing ``n``, or None when no split applies."""
    by_home: dict[int, list[tuple[str, list[int]]]] = {}
    offset = 0
    for i in concat.inputs:
        width = dims[i]
        by_home.setdefault(homes[i], []).append((i, list(range(offset, offset + width))))
        offset += width
    if len(by_home) < 2:
        return None
    top = tree.lca(list(by_home))
    parts: list[tuple[ex.ExprNode, int]] = []
    p = n.params
    if n.op == "MatMul":
        for h, items in by_home.items():
            rows = [r for _, rs in items for r in rs]
            parts.append((ex.ExprNode(f"{n.id}#{h}", "PartialMatMul", tuple(i for i, _ in items),
                                      {"weight": p["weight"], "rows": rows}), h))
        combine = ex.ExprNode(n.id, "CombineSum", tuple(q.id for q, _ in parts), {})
    elif n.op == "DecisionForest":
        forest = models.forests[p["forest"]]
        for h, items in by_home.items():
            feats = [r for _, rs in items for r in rs]
            if forest.subset(feats)[0].shape[0] == 0:
                continue
            parts.append((ex.ExprNode(f"{n.id}#{h}", "PartialForest", tuple(i for i, _ in items),
                                      {"forest": p["forest"], "features": feats}), h))
        if not parts:
            return None
        combine = ex.ExprNode(n.id, "ForestCombine", tuple(q.id for q, _ in parts),
                              {"forest": p["forest"], "with_leaves": bool(p.get("with_leaves", False))})
    elif n.op == "PQSearch":
        model = models.pq[p["pq"]]
        part_lists = []
        for h, items in by_home.items():
            feats = [r for _, rs in items for r in rs]
            owned = model.parts_within(feats)
            if owned is None:
                return None
            if not owned:
                continue
            parts.append((ex.ExprNode(f"{n.id}#{h}", "PartialPQ", tuple(i for i, _ in items),
                                      {"pq": p["pq"], "parts": owned, "features": feats}), h))
            part_lists.append(owned)
        combine = ex.ExprNode(n.id, "PQCombine", tuple(q.id for q, _ in parts), {"pq": p["pq"], "parts": part_lists})
    else:
        return None
    return parts + [(combine, top)]


def expand(graph: ex.ExprGraph, tree: JoinTree, column_dims: Mapping[str, int], models: inf.ModelBundle
           ) -> tuple[ex.ExprGraph, dict[str, int]]:
    """Rewrite splittable operators into partial + combine form; returns the graph and node homes."""
    dims = ex.infer_dims(graph, column_dims, models)
    src_home = lineage(graph, tree)
    homes: dict[str, int] = {}
    nodes: list[ex.ExprNode] = []
    for n in graph.nodes:
        if n.op == "InputRef":
            nodes.append(n)
            homes[n.id] = src_home[n.id]
            continue
        if n.op in ("MatMul", "DecisionForest", "PQSearch") and graph[n.inputs[0]].op == "Concat":
            pieces = _split(n, graph[n.inputs[0]], homes, dims, models, tree)
            if pieces is not None:
                for node, h in pieces:
                    nodes.append(node)
                    homes[node.id] = h
                continue
        in_homes = [homes[i] for i in n.inputs]
        h = tree.lca(in_homes)
        if n.op == "MatAdd" and len(set(in_homes)) > 1 and all(graph[i].op != "InputRef" for i in n.inputs):
            n = ex.ExprNode(n.id, "CombineSum", n.inputs, {})
        nodes.append(n)
        homes[n.id] = h
    # drop nodes nothing reaches (e.g. a Concat whose only consumer was split)
    live, stack = set(), list(graph.outputs)
    by_id = {n.id: n for n in nodes}
    while stack:
        k = stack.pop()
        if k not in live:
            live.add(k)
            stack.extend(by_id[k].inputs)
    kept = tuple(n for n in nodes if n.id in live)
    return ex.ExprGraph(kept, graph.outputs), {k: v for k, v in homes.items() if k in live}


# --------------------------------------------------------------- grouping


class _Groups:
    def __init__(self) -> None:
        self.parent: list[int] = []
        self.home: list[int] = []

    def new(self, home: int) -> int:
        self.parent.append(len(self.parent))
        self.home.append(home)
        return len(self.parent) - 1

    def find(self, g: int) -> int:
        while self.parent[g] != g:
            self.parent[g] = self.parent[self.parent[g]]
            g = self.parent[g]
        return g

    def union(self, a: int, b: int) -> int:
        a, b = self.find(a), self.find(b)
        if a != b:
            self.parent[max(a, b)] = min(a, b)
        return min(a, b)


def _sccs(vertices: list[int], edges: dict[int, set[int]]) -> list[list[int]]:
    """Strongly connected components (iterative Tarjan)."""
    index: dict[int, int] = {}
    low: dict[int, int] = {}
    on_stack: set[int] = set()
    stack: list[int] = []
    out: list[list[int]] = []
    counter = 0
    for root in vertices:
        if root in index:
            continue
        work = [(root, iter(sorted(edges.get(root, ()))))]
        index[root] = low[root] = counter
        counter += 1
        stack.append(root)
        on_stack.add(root)
        while work:
            v, it = work[-1]
            nxt = next(it, None)
            if nxt is None:
                work.pop()
                if work:
                    low[work[-1][0]] = min(low[work[-1][0]], low[v])
                if low[v] == index[v]:
                    comp = []
                    while True:
                        w = stack.pop()
                        on_stack.discard(w)
                        comp.append(w)
                        if w == v:
                            break
                    out.append(comp)
            elif nxt not in index:
                index[nxt] = low[nxt] = counter
                counter += 1
                stack.append(nxt)
                on_stack.add(nxt)
                work.append((nxt, iter(sorted(edges.get(nxt, ())))))
            elif nxt in on_stack:
                low[v] = min(low[v], index[nxt])
    return out


def _group_nodes(graph: ex.ExprGraph, homes: Mapping[str, int]) -> dict[str, int]:
    g = _Groups()
    group_of: dict[str, int] = {}
    for n in graph.nodes:
        if n.op == "InputRef":
            continue
        h = homes[n.id]
        if n.op in ex.PARTIAL_OPS or n.op in ex.COMBINE_OPS:
            gid = g.new(h)
        else:
            same = sorted({g.find(group_of[i]) for i in n.inputs if i in group_of and g.home[g.find(group_of[i])] == h})
            gid = same[0] if same else g.new(h)
            for other in same[1:]:
                gid = g.union(gid, other)
        group_of[n.id] = gid

    consumers = graph.consumers()
    outputs = set(graph.outputs)

    def members(root: int) -> list[str]:
        return [k for k, v in group_of.items() if g.find(v) == root]

    # fold glue-only upstream groups (concat / pre-summed partials) into the partial they feed
    for n in graph.nodes:
        if n.op not in ex.PARTIAL_OPS:
            continue
        for i in n.inputs:
            if i not in group_of:
                continue
            up, mine = g.find(group_of[i]), g.find(group_of[n.id])
            if up == mine or g.home[up] != g.home[mine]:
                continue
            ms = members(up)
            if any(graph[k].op not in TRIVIAL_OPS or k in outputs for k in ms):
                continue
            if all(g.find(group_of[c]) in (up, mine) for k in ms for c in consumers[k]):
                g.union(up, mine)

    # merge dependency cycles between groups (they necessarily share a home)
    roots = sorted({g.find(v) for v in group_of.values()})
    edges: dict[int, set[int]] = defaultdict(set)
    for n in graph.nodes:
        if n.id not in group_of:
            continue
        for i in n.inputs:
            if i in group_of:
                a, b = g.find(group_of[i]), g.find(group_of[n.id])
                if a != b:
                    edges[a].add(b)
    for comp in _sccs(roots, edges):
        for other in comp[1:]:
            g.union(comp[0], other)
    return {k: g.find(v) for k, v in group_of.items()}


# ---------------------------------------------------------------- analyze


def _work(nodes: Sequence[str], graph: ex.ExprGraph, dims: Mapping[str, int], models: inf.ModelBundle) -> dict[str, float]:
    work: dict[str, float] = defaultdict(float)
    for k in nodes:
        n = graph[k]
        work[ex.cost_kind(n.op)] += ex.node_flops(n, dims, models)
    return dict(work)


def analyze(
    graph: ex.ExprGraph, tree: JoinTree, column_dims: Mapping[str, int], models: inf.ModelBundle
) -> FactorizationMap:
    """Factorization map of ``graph`` over ``tree``."""
    fgraph, homes = expand(graph, tree, column_dims, models)
    dims = ex.infer_dims(fgraph, column_dims, models)
    group_of = _group_nodes(fgraph, homes)
    pos = fgraph.position()

    group_home = {}
    group_nodes: dict[int, list[str]] = defaultdict(list)
    for n in fgraph.nodes:
        if n.id in group_of:
            gid = group_of[n.id]
            group_home[gid] = homes[n.id]
            group_nodes[gid].append(n.id)

    unit_groups = sorted((gid for gid in group_nodes if group_home[gid] != tree.root),
                         key=lambda gid: (group_home[gid], pos[group_nodes[gid][0]]))
    uid_of_group = {gid: k for k, gid in enumerate(unit_groups, start=1)}

    def owner(nid: str) -> int:
        return uid_of_group.get(group_of[nid], RESIDUAL)

    consumers = fgraph.consumers()
    outputs = set(fgraph.outputs)
    residual_nodes = tuple(n.id for n in fgraph.nodes if n.id in group_of and owner(n.id) == RESIDUAL)

    # raw column consumers
    col_consumers: dict[str, set[int]] = defaultdict(set)
    for s in fgraph.sources():
        users = {owner(c) for c in consumers[s.id]}
        if s.id in outputs:
            users.add(RESIDUAL)
        for c in s.params["columns"]:
            col_consumers[c] |= users

    units = []
    for gid in unit_groups:
        uid = uid_of_group[gid]
        nodes = tuple(group_nodes[gid])
        mine = set(nodes)
        raw_inputs: list[str] = []
        unit_inputs: set[int] = set()
        exports = []
        for k in nodes:
            for i in fgraph[k].inputs:
                if fgraph[i].op == "InputRef":
                    raw_inputs += [c for c in fgraph[i].params["columns"] if c not in raw_inputs]
                elif i not in mine:
                    unit_inputs.add(owner(i))
            outside = [c for c in consumers[k] if c not in mine]
            if not outside and k not in outputs:
                continue
            users = sorted({owner(c) for c in outside} | ({RESIDUAL} if k in outputs else set()))
            combine = None
            if k not in outputs and len(set(outside)) == 1 and fgraph[outside[0]].op in AGGREGATING:
                combine = outside[0]
            exports.append(Export(k, dims[k], combine, tuple(users)))
        unit_inputs.discard(RESIDUAL)
        units.append(Unit(uid, group_home[gid], nodes, tuple(raw_inputs), tuple(sorted(unit_inputs)),
                          tuple(exports), _work(nodes, fgraph, dims, models)))

    combines = {}
    for n in fgraph.nodes:
        if n.op not in AGGREGATING:
            continue
        contributors = tuple(u.uid for u in units if any(e.combine == n.id for e in u.exports))
        cn = fgraph[n.id]
        combines[n.id] = Combine(n.id, AGGREGATING[n.op], dims[n.inputs[0]], owner(n.id), ex.cost_kind(n.op),
                                 ex.merge_flops(cn, dims, models), contributors)

    col_dims = {c: int(column_dims[c]) for c in fgraph.columns()}
    raw_groups: dict[tuple[int, tuple[int, ...]], list[str]] = defaultdict(list)
    for c in fgraph.columns():
        leaf = tree.leaf_of_table(column_table(c))
        raw_groups[(leaf, tuple(sorted(col_consumers[c])))].append(c)
    raw = tuple(
        RawGroup(leaf, tuple(cols), sum(col_dims[c] for c in cols), users)
        for (leaf, users), cols in sorted(raw_groups.items())
    )
    return FactorizationMap(
        units=tuple(units), combines=combines, raw=raw, residual_nodes=residual_nodes,
        residual_work=_work(residual_nodes, fgraph, dims, models), graph=fgraph, original=graph, dims=dims,
    )
