"""Binary join trees and the push-down decision space over them.

Node ids run 1..2m-1: leaves 1..m left to right, join nodes m+1.. in
post-order, so every ancestor has a larger id than its descendants and the
root is 2m-1. A plan is a 0/1 tuple whose position i-1 is the decision for
node i: 1 means "evaluate every computation still available here".

Computations ("units") are identified by integer ids and each has a home
node, the lowest node whose subtree holds all the columns it reads. By
default there is one unit per leaf, with the unit id equal to the leaf id.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .relational import Histogram, Table, build_histogram, estimate_join_cardinality

Plan = tuple[int, ...]

MAX_ENUMERATE_TABLES = 16


@dataclass(frozen=True)
class PlanNode:
    id: int
    kind: str  # "scan" or "join"
    cardinality: float
    table: str | None = None
    left: int | None = None
    right: int | None = None
    left_key: str | None = None  # qualified "table.column", lives in the left subtree
    right_key: str | None = None

    @property
    def is_leaf(self) -> bool:
        return self.kind == "scan"


@dataclass(frozen=True)
class JoinTree:
    nodes: Mapping[int, PlanNode]
    parent: Mapping[int, int] = field(init=False)
    tables: Mapping[int, tuple[str, ...]] = field(init=False)
    depth: Mapping[int, int] = field(init=False)

    def __post_init__(self) -> None:
        ids = sorted(self.nodes)
        n = len(ids)
        if n == 0 or n % 2 == 0 or ids != list(range(1, n + 1)):
            raise ValueError("join tree node ids must be 1..2m-1")
        m = (n + 1) // 2
        parent: dict[int, int] = {}
        for i in ids:
            node = self.nodes[i]
            if (i <= m) != node.is_leaf:
                raise ValueError(f"node {i}: leaves must be numbered 1..{m}")
            if not node.is_leaf:
                for c in (node.left, node.right):
                    if c is None or c >= i or c in parent:
                        raise ValueError(f"node {i}: bad child {c}")
                    parent[c] = i
        roots = [i for i in ids if i not in parent]
        if roots != [n]:
            raise ValueError("the root must be the single node 2m-1")
        tables: dict[int, tuple[str, ...]] = {}
        for i in ids:
            node = self.nodes[i]
            if node.is_leaf:
                tables[i] = (node.table or f"t{i}",)
            else:
                tables[i] = tables[node.left] + tables[node.right]
        depth = {n: 0}
        for i in reversed(ids):
            if i in parent:
                depth[i] = depth[parent[i]] + 1
        object.__setattr__(self, "parent", parent)
        object.__setattr__(self, "tables", tables)
        object.__setattr__(self, "depth", depth)

    # structure ------------------------------------------------------------

    @property
    def size(self) -> int:
        return len(self.nodes)

    @property
    def m(self) -> int:
        return (self.size + 1) // 2

    @property
    def root(self) -> int:
        return self.size

    @property
    def height(self) -> int:
        return max(self.depth.values())

    def leaves(self) -> list[int]:
        return list(range(1, self.m + 1))

    def children(self, i: int) -> tuple[int, int] | tuple[()]:
        node = self.nodes[i]
        return () if node.is_leaf else (node.left, node.right)

    def subtree(self, i: int) -> list[int]:
        out, stack = [], [i]
        while stack:
            j = stack.pop()
            out.append(j)
            stack.extend(self.children(j))
        return sorted(out)

    def ancestors(self, i: int) -> list[int]:
        """Strict ancestors of ``i``, nearest first."""
        out = []
        while i in self.parent:
            i = self.parent[i]
            out.append(i)
        return out

    def is_ancestor_or_self(self, a: int, b: int) -> bool:
        """True when ``a`` lies on the path from ``b`` to the root."""
        while True:
            if a == b:
                return True
            if b not in self.parent:
                return False
            b = self.parent[b]

    def lca(self, ids: Sequence[int]) -> int:
        ids = list(ids)
        if not ids:
            raise ValueError("lca of nothing")
        paths = [[i] + self.ancestors(i) for i in ids]
        common = set(paths[0]).intersection(*map(set, paths[1:]))
        return min(common, key=lambda j: -self.depth[j])

    def leaf_of_table(self, table: str) -> int:
        for i in self.leaves():
            if self.nodes[i].table == table:
                return i
        raise KeyError(f"table {table!r} is not in the join tree")

    def node_for_tables(self, tables: Sequence[str]) -> int:
        """Smallest node whose subtree holds every listed table."""
        return self.lca([self.leaf_of_table(t) for t in tables])

    def cardinalities(self) -> list[float]:
        return [self.nodes[i].cardinality for i in range(1, self.size + 1)]

    def key_columns(self, i: int) -> tuple[str, ...]:
        """Join-key columns in node ``i``'s output that some ancestor join still needs."""
        mine = set(self.tables[i])
        keys: list[str] = []
        for a in self.ancestors(i):
            node = self.nodes[a]
            for k in (node.left_key, node.right_key):
                if k is not None and k.split(".", 1)[0] in mine and k not in keys:
                    keys.append(k)
        return tuple(keys)

    def with_cardinalities(self, cards: Sequence[float]) -> "JoinTree":
        if len(cards) != self.size:
            raise ValueError("one cardinality per node")
        return JoinTree({i: _replace_card(n, cards[i - 1]) for i, n in self.nodes.items()})

    # constructors -----------------------------------------------------------

    @classmethod
    def from_shape(cls, shape, cardinalities: Sequence[float] | None = None, keys: bool = False) -> "JoinTree":
        """Build from nested pairs of leaf labels, e.g. ``(("a", "b"), ("c", "d"))``.

        Leaves are numbered left to right, joins in post-order. Labels become
        table names. With ``keys`` each join matches ``<t>.k`` of the first
        table on either side, otherwise no join keys are attached.
        """
        leaves: list[str] = []

        def collect(s):
            if isinstance(s, tuple):
                if len(s) != 2:
                    raise ValueError("join tree shapes are binary")
                collect(s[0])
                collect(s[1])
            else:
                leaves.append(str(s))

        collect(shape)
        m = len(leaves)
        nodes: dict[int, PlanNode] = {}
        counter = iter(range(m + 1, 2 * m))
        leaf_ids = iter(range(1, m + 1))

        first: dict[int, str] = {}

        def build(s) -> int:
            if not isinstance(s, tuple):
                i = next(leaf_ids)
                nodes[i] = PlanNode(i, "scan", 1.0, table=str(s))
                first[i] = str(s)
                return i
            a = build(s[0])
            b = build(s[1])
            j = next(counter)
            lk, rk = (f"{first[a]}.k", f"{first[b]}.k") if keys else (None, None)
            nodes[j] = PlanNode(j, "join", 1.0, left=a, right=b, left_key=lk, right_key=rk)
            first[j] = first[a]
            return j

        build(shape)
        tree = cls(nodes)
        if cardinalities is not None:
            tree = tree.with_cardinalities(cardinalities)
        return tree

    @classmethod
    def left_deep(cls, m: int, cardinalities: Sequence[float] | None = None, keys: bool = False) -> "JoinTree":
        if m < 1:
            raise ValueError("need at least one table")
        shape = "t1"
        for k in range(2, m + 1):
            shape = (shape, f"t{k}")
        return cls.from_shape(shape, cardinalities, keys)


def _replace_card(node: PlanNode, card: float) -> PlanNode:
    return PlanNode(node.id, node.kind, float(card), node.table, node.left, node.right, node.left_key, node.right_key)


# ------------------------------------------------------------ query + build


@dataclass(frozen=True)
class JoinSpec:
    left: str  # "table.column"
    right: str

    def tables(self) -> tuple[str, str]:
        return self.left.split(".", 1)[0], self.right.split(".", 1)[0]


@dataclass(frozen=True)
class QuerySpec:
    tables: tuple[str, ...]
    joins: tuple[JoinSpec, ...]
    order: tuple[str, ...] | None = None

    @classmethod
    def from_json(cls, obj: dict) -> "QuerySpec":
        joins = tuple(JoinSpec(j["left"], j["right"]) for j in obj["joins"])
        order = tuple(obj["order"]) if obj.get("order") else None
        return cls(tuple(obj["tables"]), joins, order)

    def to_json(self) -> dict:
        out: dict = {"tables": list(self.tables), "joins": [{"left": j.left, "right": j.right} for j in self.joins]}
        if self.order:
            out["order"] = list(self.order)
        return out


class _Estimator:
    def __init__(self, tables: Mapping[str, Table], buckets: int):
        self.tables = tables
        self.buckets = buckets
        self._hist: dict[str, Histogram] = {}

    def hist(self, qualified: str) -> Histogram:
        if qualified not in self._hist:
            t, c = qualified.split(".", 1)
            self._hist[qualified] = build_histogram(self.tables[t].column(c), self.buckets)
        return self._hist[qualified]

    def rows(self, table: str) -> int:
        return self.tables[table].row_count

    def join(self, left_rows: float, right_rows: float, lkey: str, rkey: str) -> float:
        lt, rt = lkey.split(".", 1)[0], rkey.split(".", 1)[0]
        base = estimate_join_cardinality(self.hist(lkey), self.hist(rkey))
        scale_l = left_rows / max(self.rows(lt), 1)
        scale_r = right_rows / max(self.rows(rt), 1)
        return base * scale_l * scale_r


def _edge_between(query: QuerySpec, joined: set[str], new: str) -> tuple[str, str] | None:
    """Join predicate linking ``new`` to the already joined tables, as (left_key, right_key)."""
    found = []
    for j in query.joins:
        a, b = j.tables()
        if a in joined and b == new:
            found.append((j.left, j.right))
        elif b in joined and a == new:
            found.append((j.right, j.left))
    if len(found) > 1:
        raise ValueError(f"table {new} has several join predicates to {sorted(joined)}; only one is supported")
    return found[0] if found else None


def greedy_order(tables: Mapping[str, Table], query: QuerySpec, buckets: int = 100) -> list[str]:
    """Start at the smallest table, then add the connected table with the smallest estimated join."""
    est = _Estimator(tables, buckets)
    remaining = sorted(query.tables, key=lambda t: (tables[t].row_count, t))
    order = [remaining.pop(0)]
    rows = float(tables[order[0]].row_count)
    while remaining:
        best = None
        for t in remaining:
            edge = _edge_between(query, set(order), t)
            if edge is None:
                continue
            size = est.join(rows, tables[t].row_count, edge[0], edge[1])
            rank = (size, tables[t].row_count, t)
            if best is None or rank < best[0]:
                best = (rank, t, size)
        if best is None:
            raise ValueError(f"tables {remaining} are not connected to {order}; cross products are unsupported")
        order.append(best[1])
        remaining.remove(best[1])
        rows = best[2]
    return order


def build_join_tree(
    tables: Mapping[str, Table], query: QuerySpec, order: Sequence[str] | None = None, buckets: int = 100
) -> JoinTree:
    """Left-deep join tree with histogram-estimated cardinalities.

    ``order`` (or ``query.order``) fixes the leaf order; otherwise the greedy
    ascending-size order is used.
    """
    for t in query.tables:
        if t not in tables:
            raise KeyError(f"query references unknown table {t!r}")
    for j in query.joins:
        for side in (j.left, j.right):
            t, c = side.split(".", 1)
            if t not in query.tables:
                raise ValueError(f"join predicate references {t!r}, which is not in the query")
            if c not in tables[t]:
                raise KeyError(f"table {t} has no column {c!r}")
        lt, rt = j.tables()
        if tables[lt].column(j.left.split(".", 1)[1]).dtype != tables[rt].column(j.right.split(".", 1)[1]).dtype:
            raise TypeError(f"join keys {j.left} and {j.right} have different types")
    order = list(order or query.order or greedy_order(tables, query, buckets))
    if sorted(order) != sorted(query.tables):
        raise ValueError("join order must list every query table exactly once")
    est = _Estimator(tables, buckets)
    m = len(order)
    nodes: dict[int, PlanNode] = {}
    for i, t in enumerate(order, start=1):
        nodes[i] = PlanNode(i, "scan", float(tables[t].row_count), table=t)
    joined = {order[0]}
    acc_id, acc_rows = 1, float(tables[order[0]].row_count)
    for k in range(1, m):
        t = order[k]
        edge = _edge_between(query, joined, t)
        if edge is None:
            raise ValueError(f"no join predicate links {t} to {sorted(joined)}")
        rows = est.join(acc_rows, tables[t].row_count, edge[0], edge[1])
        j = m + k
        nodes[j] = PlanNode(j, "join", rows, left=acc_id, right=k + 1, left_key=edge[0], right_key=edge[1])
        joined.add(t)
        acc_id, acc_rows = j, rows
    return JoinTree(nodes)


# ----------------------------------------------------- availability + plans


def default_homes(tree: JoinTree) -> dict[int, int]:
    """One unit per leaf, unit id = leaf id."""
    return {j: j for j in tree.leaves()}


def _units_by_home(tree: JoinTree, homes: Mapping[int, int] | None) -> dict[int, list[int]]:
    homes = default_homes(tree) if homes is None else homes
    local: dict[int, list[int]] = {i: [] for i in tree.nodes}
    for uid in sorted(homes):
        h = homes[uid]
        if h not in local:
            raise ValueError(f"unit {uid} has home {h}, which is not a tree node")
        local[h].append(uid)
    return local


def _check_plan(tree: JoinTree, plan: Sequence[int]) -> None:
    if len(plan) != tree.size:
        raise ValueError(f"plan has {len(plan)} entries, tree has {tree.size} nodes")
    if any(v not in (0, 1) for v in plan):
        raise ValueError("plan entries must be 0 or 1")


def availability(tree: JoinTree, plan: Sequence[int], homes: Mapping[int, int] | None = None) -> dict[int, frozenset[int]]:
    """Units available at each node: home in its subtree, not consumed by a pushing descendant."""
    _check_plan(tree, plan)
    local = _units_by_home(tree, homes)
    avail: dict[int, frozenset[int]] = {}
    flowing: dict[int, frozenset[int]] = {}
    for i in range(1, tree.size + 1):
        d = set(local[i])
        for c in tree.children(i):
            d |= flowing[c]
        avail[i] = frozenset(d)
        flowing[i] = frozenset() if plan[i - 1] else avail[i]
    return avail


def validate_plan(tree: JoinTree, plan: Sequence[int], homes: Mapping[int, int] | None = None) -> bool:
    """A plan is valid when it never pushes at a node with nothing available
    and pushes at the root whenever something is still available there."""
    avail = availability(tree, plan, homes)
    for i in range(1, tree.size + 1):
        if plan[i - 1] and not avail[i]:
            return False
    return not (avail[tree.root] and not plan[tree.root - 1])


def repair(tree: JoinTree, plan: Sequence[int], homes: Mapping[int, int] | None = None) -> Plan:
    """Clear pushes at empty nodes bottom-up, then force the root if needed. Idempotent."""
    _check_plan(tree, plan)
    local = _units_by_home(tree, homes)
    x = list(plan)
    flowing: dict[int, bool] = {}
    for i in range(1, tree.size + 1):
        has = bool(local[i]) or any(flowing[c] for c in tree.children(i))
        if not has:
            x[i - 1] = 0
        if i == tree.root and has:
            x[i - 1] = 1
        flowing[i] = has and not x[i - 1]
    return tuple(x)


def plan_space_size(m: int) -> int:
    """Closed form 5 * 2**(m-1) - 6 of the recurrence f(2)=4, f(m)=2(f(m-1)+3).

    The recurrence assumes each extra table adds three options to every
    smaller plan. That holds for m <= 3 only; ``count_valid_plans`` and
    ``enumerate_valid_plans`` give the exact number (48 rather than 34 at m=4).
    """
    if m < 1:
        raise ValueError("m must be positive")
    if m == 1:
        return 1
    return 5 * 2 ** (m - 1) - 6


def _subtree_options(tree: JoinTree, local: dict[int, list[int]]):
    """Per node: list of (bitmask of pushes in the subtree, something still flowing up)."""
    opts: dict[int, list[tuple[int, bool]]] = {}
    for i in range(1, tree.size + 1):
        bit = 1 << (i - 1)
        kids = tree.children(i)
        if not kids:
            combos = [(0, False)]
        else:
            combos = [(a | b, fa or fb) for a, fa in opts[kids[0]] for b, fb in opts[kids[1]]]
        out = []
        for mask, flowing in combos:
            has = flowing or bool(local[i])
            if i == tree.root:
                out.append((mask | bit, False) if has else (mask, False))
            elif has:
                out.append((mask, True))
                out.append((mask | bit, False))
            else:
                out.append((mask, False))
        opts[i] = out
    return opts


def count_valid_plans(tree: JoinTree, homes: Mapping[int, int] | None = None) -> int:
    """Number of valid plans, by dynamic programming (no enumeration)."""
    local = _units_by_home(tree, homes)
    counts: dict[int, tuple[int, int]] = {}  # (flowing, not flowing)
    for i in range(1, tree.size + 1):
        kids = tree.children(i)
        if not kids:
            f_in, n_in = 0, 1
        else:
            (fa, na), (fb, nb) = counts[kids[0]], counts[kids[1]]
            total = (fa + na) * (fb + nb)
            n_in = na * nb
            f_in = total - n_in
        has = f_in + (n_in if local[i] else 0)
        empty = 0 if local[i] else n_in
        if i == tree.root:
            counts[i] = (0, has + empty)
        else:
            counts[i] = (has, has + empty)
    return counts[tree.root][1]


def enumerate_valid_plans(tree: JoinTree, homes: Mapping[int, int] | None = None) -> list[Plan]:
    """Every valid plan, in lexicographic order of the decision tuple."""
    if tree.m > MAX_ENUMERATE_TABLES:
        raise ValueError(f"plan enumeration is limited to m <= {MAX_ENUMERATE_TABLES} tables")
    local = _units_by_home(tree, homes)
    masks = [mask for mask, _ in _subtree_options(tree, local)[tree.root]]
    n = tree.size
    plans = [tuple((mask >> k) & 1 for k in range(n)) for mask in masks]
    plans.sort()
    return plans
