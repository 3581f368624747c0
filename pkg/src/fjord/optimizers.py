"""Push-down plan search: exhaustive, greedy, genetic and the literature baselines.

Every strategy returns an ``OptimizerReport`` whose plan passes
``validate_plan`` and whose cost is ``plan_cost`` under the caller's config.
"""

from __future__ import annotations

import heapq
import random
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .benefit import LogisticModel, predict_benefit
from .cost_model import CostConfig, PlanCoster, node_features
from .factorize import FactorizationMap
from .join_tree import JoinTree, Plan, availability, enumerate_valid_plans, repair
from .layout import plan_layout, placements

MAX_EXHAUSTIVE_TABLES = 12

STRATEGIES = ("none", "full", "greedy", "genetic", "exhaustive", "morpheus-bu", "morpheus-td", "fl-bu", "fl-td")


@dataclass(frozen=True)
class OptimizerReport:
    strategy: str
    plan: Plan
    cost: float
    plans_evaluated: int
    wall_time: float
    trajectory: tuple[float, ...] = ()

    def to_json(self, timings: bool = True) -> dict:
        out = {"strategy": self.strategy, "plan": list(self.plan), "cost": self.cost,
               "plans_evaluated": self.plans_evaluated}
        if timings:
            out["wall_time"] = self.wall_time
        return out


@dataclass(frozen=True)
class GeneticConfig:
    g_max: int = 20
    population: int = 150
    offspring_k: int = 25
    seed: int = 0

    def __post_init__(self) -> None:
        if self.population < 2 or self.offspring_k < 1 or self.g_max < 0:
            raise ValueError("need population >= 2, offspring_k >= 1 and g_max >= 0")


class _Evaluator:
    """Memoized plan costs (the cache key is the repaired plan)."""

    def __init__(self, tree: JoinTree, fmap: FactorizationMap, config: CostConfig | None):
        self.coster = PlanCoster(tree, fmap, config)
        self.cache: dict[Plan, float] = {}

    def __call__(self, plan: Plan) -> float:
        c = self.cache.get(plan)
        if c is None:
            c = self.cache[plan] = self.coster.cost(plan)
        return c

    @property
    def evaluated(self) -> int:
        return len(self.cache)


def _report(name: str, plan: Plan, ev: _Evaluator, t0: float, trajectory: Sequence[float] = ()) -> OptimizerReport:
    cost = ev(plan)
    return OptimizerReport(name, plan, cost, ev.evaluated, time.perf_counter() - t0, tuple(trajectory))


# ------------------------------------------------------------------ baselines


def baseline_none(tree: JoinTree, fmap: FactorizationMap | None = None) -> Plan:
    """Everything runs after the final join."""
    homes = fmap.homes() if fmap is not None else None
    return repair(tree, (0,) * tree.size, homes)


def baseline_full(tree: JoinTree, fmap: FactorizationMap | None = None) -> Plan:
    """Every unit runs at its home node."""
    homes = fmap.homes() if fmap is not None else {j: j for j in tree.leaves()}
    x = [0] * tree.size
    for h in homes.values():
        x[h - 1] = 1
    return repair(tree, x, homes)


def _join_order(tree: JoinTree, direction: str) -> list[int]:
    joins = [i for i in range(1, tree.size + 1) if tree.children(i)]
    if direction == "bu":
        return sorted(joins, key=lambda i: (-tree.depth[i], i))
    if direction == "td":
        return sorted(joins, key=lambda i: (tree.depth[i], i))
    raise ValueError(f"unknown direction {direction!r}; use 'bu' or 'td'")


def morpheus_rule(n_out: float, n_child: float, w_child: float, w_sibling: float,
                  tuple_ratio: float = 5.0, feature_ratio: float = 1.0) -> bool:
    """Two-way rule: factorize the child's side when the join blows up its rows and its features dominate."""
    if n_child <= 0:
        return False
    fr = w_child / w_sibling if w_sibling > 0 else float("inf")
    return n_out / n_child >= tuple_ratio and fr >= feature_ratio


def baseline_morpheus(tree: JoinTree, fmap: FactorizationMap, direction: str = "bu",
                      config: CostConfig | None = None) -> Plan:
    """Apply the two-way rule at each join in level order, pushing below it on each qualifying side."""
    homes = fmap.homes()
    agg = (config or CostConfig()).aggregate
    x = list(baseline_none(tree, fmap))
    for j in _join_order(tree, direction):
        a, b = tree.children(j)
        cur = repair(tree, x, homes)
        avail = availability(tree, cur, homes)
        lay = plan_layout(tree, cur, fmap, agg)
        n_j = tree.nodes[j].cardinality
        for c, s in ((a, b), (b, a)):
            if not avail[c] or cur[c - 1]:
                continue
            if morpheus_rule(n_j, tree.nodes[c].cardinality, lay[c].width, lay[s].width):
                x[c - 1] = 1
        x = list(repair(tree, x, homes))
    return repair(tree, x, homes)


def subtree_cost(tree: JoinTree, plan: Sequence[int], fmap: FactorizationMap, node: int,
                 config: CostConfig | None = None) -> float:
    """Cost of ``node``'s subtree as if the query ended there.

    Units homed in the subtree but not placed inside it are charged once per
    output row of ``node``.
    """
    config = config or CostConfig()
    lay = plan_layout(tree, plan, fmap, config.aggregate)
    inside = set(tree.subtree(node))
    place = placements(tree, plan, fmap)
    total = 0.0
    for i in inside:
        n = tree.nodes[i].cardinality
        total += n * (config.price(lay[i].work) + config.lam * lay[i].width)
    n_top = tree.nodes[node].cardinality
    for u in fmap.units:
        if u.home in inside and place[u.uid] not in inside:
            total += n_top * config.price(u.work)
    return total


def baseline_fl(tree: JoinTree, fmap: FactorizationMap, direction: str = "bu",
                config: CostConfig | None = None) -> Plan:
    """At each join, push below it on a side when that lowers the join subtree's own I/O plus CPU cost."""
    homes = fmap.homes()
    x = list(baseline_none(tree, fmap))
    for j in _join_order(tree, direction):
        for c in tree.children(j):
            cur = repair(tree, x, homes)
            if cur[c - 1] or not availability(tree, cur, homes)[c]:
                continue
            trial = list(cur)
            trial[c - 1] = 1
            trial = repair(tree, trial, homes)
            if subtree_cost(tree, trial, fmap, j, config) < subtree_cost(tree, cur, fmap, j, config):
                x = list(trial)
            else:
                x = list(cur)
    return repair(tree, x, homes)


# ---------------------------------------------------------------- exhaustive


def exhaustive(tree: JoinTree, fmap: FactorizationMap, config: CostConfig | None = None) -> OptimizerReport:
    if tree.m > MAX_EXHAUSTIVE_TABLES:
        raise ValueError(f"exhaustive search is limited to m <= {MAX_EXHAUSTIVE_TABLES} tables, got {tree.m}")
    t0 = time.perf_counter()
    ev = _Evaluator(tree, fmap, config)
    best, best_cost = None, float("inf")
    for p in enumerate_valid_plans(tree, fmap.homes()):  # lexicographic, so strict < keeps the smallest tie
        c = ev(p)
        if c < best_cost:
            best, best_cost = p, c
    assert best is not None
    return _report("exhaustive", best, ev, t0)


# -------------------------------------------------------------------- greedy


def greedy(tree: JoinTree, fmap: FactorizationMap, config: CostConfig | None = None, threshold: float = 0.0,
           gate: Callable[[Plan, int], bool] | None = None) -> OptimizerReport:
    """Benefit-first search over signed cost deltas with lazy re-evaluation.

    A node is committed when its fresh delta is below ``-threshold`` (and the
    optional ``gate`` accepts it); committing removes the node and its
    descendants from the queue. Stale entries are re-costed on pop, and
    declined nodes get another look after each commit.
    """
    t0 = time.perf_counter()
    homes = fmap.homes()
    ev = _Evaluator(tree, fmap, config)
    plan = baseline_none(tree, fmap)
    current = ev(plan)
    version = 0
    heap: list[tuple[float, int, int]] = []
    for i in range(1, tree.size + 1):
        if not plan[i - 1]:
            heap.append((0.0, i, -1))  # -1: never evaluated
    heapq.heapify(heap)
    removed: set[int] = set()
    parked: list[int] = []  # declined at the current version; retried after the next commit
    while heap:
        key, i, stamp = heapq.heappop(heap)
        if i in removed or plan[i - 1]:
            continue
        if stamp != version:
            if not availability(tree, plan, homes)[i]:
                continue  # children already consumed everything here; may not come back
            trial = list(plan)
            trial[i - 1] = 1
            delta = ev(repair(tree, trial, homes)) - current
            heapq.heappush(heap, (delta, i, version))
            continue
        if key >= -threshold or (gate is not None and not gate(plan, i)):
            parked.append(i)
            continue
        trial = list(plan)
        trial[i - 1] = 1
        plan = repair(tree, trial, homes)
        current = ev(plan)
        version += 1
        removed.update(tree.subtree(i))
        for j in parked:
            heapq.heappush(heap, (key, j, -1))
        parked.clear()
    return _report("greedy", plan, ev, t0)


# ------------------------------------------------------------------- genetic


def crossover(p1: Plan, p2: Plan, tree: JoinTree, rng: random.Random, homes=None) -> tuple[Plan, Plan]:
    """Swap the subtree under a uniformly chosen join node between two parents, then repair both."""
    joins = [i for i in range(1, tree.size + 1) if tree.children(i)]
    if not joins:
        return p1, p2
    node = rng.choice(joins)
    return crossover_at(p1, p2, tree, node, homes)


def crossover_at(p1: Plan, p2: Plan, tree: JoinTree, node: int, homes=None) -> tuple[Plan, Plan]:
    c1, c2 = list(p1), list(p2)
    for i in tree.subtree(node):
        c1[i - 1], c2[i - 1] = p2[i - 1], p1[i - 1]
    return repair(tree, c1, homes), repair(tree, c2, homes)


def mutate(p: Plan, tree: JoinTree, rng: random.Random, homes=None) -> Plan:
    return mutate_at(p, tree, rng.randrange(tree.size) + 1, homes)


def mutate_at(p: Plan, tree: JoinTree, node: int, homes=None) -> Plan:
    x = list(p)
    x[node - 1] ^= 1
    return repair(tree, x, homes)


def genetic(tree: JoinTree, fmap: FactorizationMap, config: CostConfig | None = None,
            gconf: GeneticConfig | None = None) -> OptimizerReport:
    """Elitist genetic search: grow the population with offspring, keep the fittest ``population``."""
    gconf = gconf or GeneticConfig()
    t0 = time.perf_counter()
    rng = random.Random(gconf.seed)
    homes = fmap.homes()
    ev = _Evaluator(tree, fmap, config)
    pop: list[Plan] = []
    seen: set[Plan] = set()
    for _ in range(10 * gconf.population):
        if len(pop) >= gconf.population:
            break
        p = repair(tree, [rng.randint(0, 1) for _ in range(tree.size)], homes)
        if p not in seen:
            seen.add(p)
            pop.append(p)
    while len(pop) < gconf.population:  # plan space smaller than the population
        pop.append(repair(tree, [rng.randint(0, 1) for _ in range(tree.size)], homes))

    def rank(plans: list[Plan]) -> list[Plan]:
        return sorted(plans, key=lambda q: (ev(q), q))

    pop = rank(pop)
    trajectory = [ev(pop[0])]
    for _ in range(gconf.g_max):
        target = gconf.population + gconf.offspring_k
        while len(pop) < target:
            a, b = rng.sample(range(len(pop)), 2)
            kids = crossover(pop[a], pop[b], tree, rng, homes)
            for k in kids:
                if len(pop) < target:
                    pop.append(mutate(k, tree, rng, homes))
        pop = rank(pop)[: gconf.population]
        trajectory.append(ev(pop[0]))
    return _report("genetic", pop[0], ev, t0, trajectory)


def benefit_gate(model: LogisticModel, tree: JoinTree, fmap: FactorizationMap, config: CostConfig | None = None,
                 cutoff: float = 0.5) -> Callable[[Plan, int], bool]:
    """Greedy gate accepting a push when the model's benefit probability exceeds ``cutoff``.

    The model is trained on costs per row of raw input width, so the node's
    per-tuple work is divided by its unpushed width (times lambda) first.
    """
    config = config or CostConfig()
    homes = fmap.homes()

    def gate(plan: Plan, node: int) -> bool:
        feats = node_features(tree, plan, node, fmap, config)
        w0 = plan_layout(tree, repair(tree, plan, homes), fmap, config.aggregate)[node].width
        fc = feats.factorized_cost / (max(config.lam, 1e-12) * max(w0, 1))
        x = [feats.cardinality_ratio, fc, feats.tuple_dim_ratio, feats.depth_ratio]
        return bool(predict_benefit([x], model)[0] > cutoff)

    return gate


# ------------------------------------------------------------------ dispatch


@dataclass
class OptimizeOptions:
    config: CostConfig = field(default_factory=CostConfig)
    genetic: GeneticConfig = field(default_factory=GeneticConfig)
    threshold: float = 0.0
    gate: Callable[[Plan, int], bool] | None = None


def optimize(strategy: str, tree: JoinTree, fmap: FactorizationMap, options: OptimizeOptions | None = None) -> OptimizerReport:
    opts = options or OptimizeOptions()
    cfg = opts.config
    if strategy == "greedy":
        return greedy(tree, fmap, cfg, opts.threshold, opts.gate)
    if strategy == "genetic":
        return genetic(tree, fmap, cfg, opts.genetic)
    if strategy == "exhaustive":
        return exhaustive(tree, fmap, cfg)
    t0 = time.perf_counter()
    if strategy == "none":
        plan = baseline_none(tree, fmap)
    elif strategy == "full":
        plan = baseline_full(tree, fmap)
    elif strategy in ("morpheus-bu", "morpheus-td"):
        plan = baseline_morpheus(tree, fmap, strategy[-2:], cfg)
    elif strategy in ("fl-bu", "fl-td"):
        plan = baseline_fl(tree, fmap, strategy[-2:], cfg)
    else:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {', '.join(STRATEGIES)}")
    ev = _Evaluator(tree, fmap, cfg)
    return _report(strategy, plan, ev, t0)
