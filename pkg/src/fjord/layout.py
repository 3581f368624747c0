"""Per-node data layout of a push-down plan.

For a valid plan this works out, node by node and bottom-up, which units
run at the node, which partial results are pre-aggregated there, and which
raw columns, unit outputs and join keys leave the node. Widths are counted
in value slots (one slot per scalar, four bytes when materialized).

Placement rule: a unit runs at the lowest pushing node on the path from its
home to the root. Anything still pending after the root's decision runs in
the residual, after the root.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .factorize import RESIDUAL, FactorizationMap, RawGroup
from .join_tree import JoinTree


@dataclass(frozen=True)
class Block:
    """A materialized unit output (or a pre-aggregated sum of several) travelling up the tree."""

    name: str
    dim: int
    combine: str | None
    contributors: tuple[int, ...]
    consumers: tuple[int, ...]
    node: str | None = None  # export node when the block is one unit's output


@dataclass(frozen=True)
class Merge:
    """Fold ``inputs`` for ``combine``; ``output`` names the merged block, or None when the owner consumes them."""

    combine: str
    inputs: tuple[str, ...]
    output: str | None


@dataclass(frozen=True)
class NodeLayout:
    node: int
    pushed: bool
    landed: tuple[int, ...]
    merges: tuple[Merge, ...]
    raw: tuple[RawGroup, ...]
    blocks: tuple[Block, ...]
    keys: tuple[str, ...]
    work: Mapping[str, float] = field(default_factory=dict)  # per-tuple flops run here, by cost kind

    @property
    def width(self) -> int:
        return sum(r.dim for r in self.raw) + sum(b.dim for b in self.blocks) + len(self.keys)

    @property
    def raw_columns(self) -> list[str]:
        return [c for r in self.raw for c in r.columns]


def sites(tree: JoinTree, plan: Sequence[int]) -> dict[int, int | None]:
    """Lowest pushing node on the path from each node to the root (None above the root)."""
    out: dict[int, int | None] = {}
    for i in range(tree.size, 0, -1):
        if plan[i - 1]:
            out[i] = i
        else:
            out[i] = out[tree.parent[i]] if i in tree.parent else None
    return out


def placements(tree: JoinTree, plan: Sequence[int], fmap: FactorizationMap) -> dict[int, int | None]:
    s = sites(tree, plan)
    return {u.uid: s[u.home] for u in fmap.units}


def plan_layout(tree: JoinTree, plan: Sequence[int], fmap: FactorizationMap, aggregate: bool = True) -> dict[int, NodeLayout]:
    """Layout of every node for a valid ``plan``."""
    place = placements(tree, plan, fmap)
    units = fmap.by_uid()
    owned: dict[int, list[str]] = defaultdict(list)
    for cname, c in fmap.combines.items():
        if c.owner != RESIDUAL:
            owned[c.owner].append(cname)

    def consumed_by(i: int, consumers: Sequence[int]) -> bool:
        for c in consumers:
            p = RESIDUAL if c == RESIDUAL else place[c]
            if p == RESIDUAL or p is None or not tree.is_ancestor_or_self(i, p):
                return False
        return True

    layouts: dict[int, NodeLayout] = {}
    for i in range(1, tree.size + 1):
        kids = tree.children(i)
        if not kids:
            raw = [r for r in fmap.raw if r.leaf == i]
            blocks: list[Block] = []
        else:
            raw = list(layouts[kids[0]].raw) + list(layouts[kids[1]].raw)
            blocks = list(layouts[kids[0]].blocks) + list(layouts[kids[1]].blocks)
        pushed = bool(plan[i - 1])
        landed = tuple(sorted(uid for uid, p in place.items() if p == i))
        merges: list[Merge] = []
        work: dict[str, float] = defaultdict(float)
        for uid in landed:
            u = units[uid]
            for k, v in u.work.items():
                work[k] += v
            for cname in owned[uid]:
                c = fmap.combines[cname]
                ins = [b for b in blocks if b.combine == cname]
                if len(ins) >= 2:
                    work[c.merge_kind] += (len(ins) - 1) * c.merge_work
                merges.append(Merge(cname, tuple(b.name for b in ins), None))
                blocks = [b for b in blocks if b.combine != cname]
            for e in u.exports:
                blocks.append(Block(f"x:{e.node}", e.dim, e.combine, (uid,), e.consumers, e.node))
        if pushed and aggregate:
            for cname, c in fmap.combines.items():
                ins = [b for b in blocks if b.combine == cname]
                if len(ins) < 2:
                    continue
                work[c.merge_kind] += (len(ins) - 1) * c.merge_work
                merged = Block(
                    f"a:{cname}@{i}", c.dim, cname,
                    tuple(sorted({u for b in ins for u in b.contributors})), (c.owner,),
                )
                merges.append(Merge(cname, tuple(b.name for b in ins), merged.name))
                first = blocks.index(ins[0])
                blocks = [b for b in blocks if b.combine != cname]
                blocks.insert(min(first, len(blocks)), merged)
        raw = [r for r in raw if not consumed_by(i, r.consumers)]
        blocks = [b for b in blocks if not consumed_by(i, b.consumers)]
        layouts[i] = NodeLayout(i, pushed, landed, tuple(merges), tuple(raw), tuple(blocks),
                                tree.key_columns(i), dict(work))
    return layouts


def node_width(tree: JoinTree, plan: Sequence[int], fmap: FactorizationMap, node: int, aggregate: bool = True) -> int:
    """Value slots per output row of ``node`` under ``plan``."""
    return plan_layout(tree, plan, fmap, aggregate)[node].width


def node_widths(tree: JoinTree, plan: Sequence[int], fmap: FactorizationMap, aggregate: bool = True) -> list[int]:
    lay = plan_layout(tree, plan, fmap, aggregate)
    return [lay[i].width for i in range(1, tree.size + 1)]
