from __future__ import annotations

import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fjord.cost_model import (
    CostConfig,
    PlanCoster,
    calibrate_op_costs,
    microbench,
    node_delta_cost,
    node_features,
    plan_cost,
)
from fjord.factorize import simple_map
from fjord.join_tree import JoinTree, availability, enumerate_valid_plans, repair
from fjord.layout import node_width, node_widths, plan_layout

from helpers import random_instance


# ------------------------------------------------------------ cost oracle


def leftmost_table(tree: JoinTree, i: int) -> str:
    while tree.children(i):
        i = tree.children(i)[0]
    return tree.nodes[i].table


def subtree_nodes(tree: JoinTree, i: int) -> set[int]:
    out, stack = set(), [i]
    while stack:
        k = stack.pop()
        out.add(k)
        stack.extend(tree.children(k))
    return out


def key_slots(tree: JoinTree, i: int) -> int:
    """Join keys of i's tables that a strict ancestor join matches on."""
    mine = {tree.nodes[k].table for k in subtree_nodes(tree, i) if not tree.children(k)}
    keys = set()
    a = i
    while a in tree.parent:
        a = tree.parent[a]
        for c in tree.children(a):
            t = leftmost_table(tree, c)
            if t in mine:
                keys.add(f"{t}.k")
    return len(keys)


def recompute_cost(tree, plan, raw, unit_cost, out_dim, lam, aggregate, merge_dim):
    """Plan cost from scratch for one unit per leaf.

    Unit j lands at the first pushing node above leaf j. Partial blocks
    travel up and, with aggregation, fold into one block at a pushing node;
    ``merge_dim`` is None when the unit outputs cannot be folded.
    """
    n = {i: tree.nodes[i].cardinality for i in range(1, tree.size + 1)}
    land = {}
    for j in range(1, tree.m + 1):
        k = j
        while not plan[k - 1] and k in tree.parent:
            k = tree.parent[k]
        land[j] = k if plan[k - 1] else None
    compute = sum(n[land[j]] * unit_cost[j - 1] for j in land if land[j] is not None)
    blocks, io = {}, 0.0
    for i in range(1, tree.size + 1):
        below = subtree_nodes(tree, i)
        b = sum(blocks[c] for c in tree.children(i)) + sum(1 for j in land if land[j] == i)
        if plan[i - 1] and aggregate and merge_dim is not None and b >= 2:
            compute += n[i] * (b - 1) * merge_dim
            b = 1
        blocks[i] = b
        raw_w = sum(raw[j - 1] for j in range(1, tree.m + 1) if j in below and land[j] not in below)
        io += n[i] * (raw_w + b * out_dim + key_slots(tree, i))
    return compute + lam * io


def instance_params(fmap):
    raw = [g.dim for g in sorted(fmap.raw, key=lambda g: g.leaf)]
    cost = [u.work["MatMul"] for u in fmap.units]
    dim = fmap.units[0].exports[0].dim
    merge = fmap.combines["agg"].merge_work if fmap.combines else None
    return raw, cost, dim, merge


# -------------------------------------------------------------- golden


def two_leaf_instance():
    tree = JoinTree.left_deep(2, [100, 100, 100], keys=True)
    return tree, simple_map(tree, [50, 50], [10, 10], [5, 5])


def test_golden_two_leaf_plan():
    tree, fmap = two_leaf_instance()
    assert plan_cost(tree, (1, 1, 0), fmap, CostConfig(lam=1.0)) == 4200.0
    coster = PlanCoster(tree, fmap, CostConfig(lam=1.0))
    assert coster.breakdown((1, 1, 0)) == (2000.0, 2200.0)
    assert node_widths(tree, (1, 1, 0), fmap) == [6, 6, 10]


def test_lambda_zero_root_only():
    tree, fmap = two_leaf_instance()
    # both units plus one merge of a 5-wide partial, all at the root
    assert plan_cost(tree, (0, 0, 1), fmap, CostConfig(lam=0.0)) == 100 * (10 + 10 + 5)


def test_negative_lambda_rejected():
    with pytest.raises(ValueError):
        CostConfig(lam=-1.0)


def test_multipliers_scale_compute():
    tree, fmap = two_leaf_instance()
    cfg = CostConfig(lam=0.0, multipliers={"MatMul": 3.0, "MatAdd": 0.0})
    assert plan_cost(tree, (0, 0, 1), fmap, cfg) == 100 * 60


@pytest.mark.parametrize("aggregate", [True, False])
@pytest.mark.parametrize("combine", ["agg", None])
def test_cost_matches_recomputation_on_random_trees(aggregate, combine):
    rng = random.Random(11)
    checked = 0
    for _ in range(20):
        m = rng.randint(2, 6)
        tree, fmap = random_instance(m, rng)
        if combine is None:
            raw, cost, dim, _ = instance_params(fmap)
            fmap = simple_map(tree, raw, cost, [dim] * m, aggregate_into=None)
        raw, cost, dim, merge = instance_params(fmap)
        lam = rng.choice([0.0, 0.5, 1.0, 3.0])
        coster = PlanCoster(tree, fmap, CostConfig(lam=lam, aggregate=aggregate))
        for plan in enumerate_valid_plans(tree, fmap.homes()):
            want = recompute_cost(tree, plan, raw, cost, dim, lam, aggregate, merge)
            assert coster.cost(plan) == pytest.approx(want, rel=1e-12)
            checked += 1
    assert checked > 200


def test_layout_widths_agree_with_recomputation():
    rng = random.Random(5)
    for _ in range(10):
        tree, fmap = random_instance(rng.randint(2, 5), rng)
        raw, cost, dim, merge = instance_params(fmap)
        for plan in enumerate_valid_plans(tree, fmap.homes()):
            lay = plan_layout(tree, plan, fmap)
            one = PlanCoster(tree, fmap, CostConfig(lam=1.0, multipliers={"MatMul": 0.0, "MatAdd": 0.0}))
            io = sum(tree.nodes[i].cardinality * lay[i].width for i in lay)
            assert one.cost(plan) == pytest.approx(io, rel=1e-12)


# --------------------------------------------------------------- widths


def test_no_push_width_is_raw_plus_keys():
    tree = JoinTree.left_deep(3, [10] * 5, keys=True)
    fmap = simple_map(tree, [7, 8, 9], [1, 1, 1], [2, 2, 2])
    widths = node_widths(tree, (0, 0, 0, 0, 1), fmap)
    assert widths[:4] == [7 + 1, 8 + 1, 9 + 1, 7 + 8 + 1]  # the root joins on t1.k only


def test_three_partials_fold_to_one_block():
    tree = JoinTree.left_deep(4, [10] * 7, keys=True)
    fmap = simple_map(tree, [100, 100, 100, 100], [5] * 4, [30] * 4)
    plan = (0, 0, 0, 1, 0, 1, 0)
    lay = plan_layout(tree, plan, fmap)[6]
    assert lay.landed == (1, 2, 3)
    assert sum(b.dim for b in lay.blocks) == 30
    assert lay.width == 30 + len(lay.keys)
    flat = plan_layout(tree, plan, fmap, aggregate=False)[6]
    assert sum(b.dim for b in flat.blocks) == 90


def test_leaf_push_reduces_width_up_to_next_push_site():
    tree = JoinTree.left_deep(3, [10] * 5, keys=True)
    fmap = simple_map(tree, [500, 40, 60], [1, 1, 1], [30, 30, 30])
    w = node_widths(tree, (1, 0, 0, 0, 1), fmap)
    assert w[0] == 30 + 1
    assert w[3] == 30 + 40 + 1  # join of t1, t2 carries f1's output and t2's raw features
    assert w[4] == 30  # root folds f1 with f2, f3; the root keeps no keys
    assert node_width(tree, (0, 0, 0, 0, 1), fmap, 4) == 500 + 40 + 1


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), m=st.integers(2, 6), aggregate=st.booleans())
def test_push_never_widens_node_or_its_carriers(seed, m, aggregate):
    rng = random.Random(seed)
    tree, fmap = random_instance(m, rng)
    raw, cost, dim, _ = instance_params(fmap)
    if dim > min(raw):
        raw = [max(r, dim) for r in raw]
        fmap = simple_map(tree, raw, cost, [dim] * m)
    homes = fmap.homes()
    base = repair(tree, [rng.randint(0, 1) for _ in range(tree.size)], homes)
    before = node_widths(tree, base, fmap, aggregate)
    for i in range(1, tree.size + 1):
        if base[i - 1] or not availability(tree, base, homes)[i]:
            continue
        flipped = list(base)
        flipped[i - 1] = 1
        flipped = repair(tree, flipped, homes)
        after = node_widths(tree, flipped, fmap, aggregate)
        assert after[i - 1] <= before[i - 1]
        # ancestors that push in neither plan only carry what comes up from below;
        # one whose push repair drops loses its merge and may widen
        k = tree.parent.get(i)
        while k is not None and not base[k - 1] and not flipped[k - 1]:
            assert after[k - 1] <= before[k - 1]
            k = tree.parent.get(k)


# ------------------------------------------------------------ node delta


def test_delta_matches_two_costs_on_random_instances():
    rng = random.Random(2)
    for _ in range(30):
        tree, fmap = random_instance(rng.randint(2, 6), rng)
        homes = fmap.homes()
        cfg = CostConfig(lam=rng.choice([0.1, 1.0, 4.0]))
        plan = repair(tree, [rng.randint(0, 1) for _ in range(tree.size)], homes)
        avail = availability(tree, plan, homes)
        for i in range(1, tree.size + 1):
            if plan[i - 1] or not avail[i]:
                continue
            flipped = list(plan)
            flipped[i - 1] = 1
            want = plan_cost(tree, repair(tree, flipped, homes), fmap, cfg) - plan_cost(tree, plan, fmap, cfg)
            assert node_delta_cost(tree, plan, i, fmap, cfg) == pytest.approx(want, rel=1e-12, abs=1e-9)


def test_delta_errors_and_forced_root():
    tree, fmap = two_leaf_instance()
    with pytest.raises(ValueError, match="nothing available"):
        node_delta_cost(tree, (1, 1, 0), 3, fmap)
    with pytest.raises(ValueError, match="already pushes"):
        node_delta_cost(tree, (1, 1, 0), 1, fmap)
    # the root push is forced by repair whenever something is left for it
    assert node_delta_cost(tree, (1, 0, 0), 3, fmap) == 0.0


# -------------------------------------------------------------- features


def test_node_features_on_a_small_tree():
    tree = JoinTree.left_deep(3, [100, 10, 50, 400, 800], keys=True)
    fmap = simple_map(tree, [20, 20, 20], [4, 4, 4], [5, 5, 5])
    plan = (0, 0, 0, 0, 1)
    f = node_features(tree, plan, 1, fmap)
    assert f.cardinality_ratio == 400 / 100
    assert f.factorized_cost == 4
    assert f.tuple_dim_ratio == (5 + 1) / (20 + 1)
    assert f.depth_ratio == tree.depth[1] / tree.height == 1.0
    g = node_features(tree, plan, 4, fmap)
    assert g.cardinality_ratio == 800 / 400
    assert g.factorized_cost == 8
    assert g.depth_ratio == 0.5
    root = node_features(tree, plan, 5, fmap)
    assert root.cardinality_ratio == 1.0 and root.depth_ratio == 0.0
    for v in (f, g, root):
        assert min(v.as_tuple()) >= 0 and v.depth_ratio <= 1


# ----------------------------------------------------------- calibration


def test_calibration_recovers_exact_multipliers():
    flops = [1e3, 5e3, 2e4, 1e5, 3e5]
    samples = {"MatMul": [(f, 0.25 * f) for f in flops], "Relu": [(f, 2.0 * f) for f in flops]}
    cal = calibrate_op_costs(samples)
    assert cal.multipliers["MatMul"] == pytest.approx(0.25, rel=1e-12)
    assert cal.multipliers["Relu"] == pytest.approx(2.0, rel=1e-12)
    assert cal.residuals["MatMul"] < 1e-12 and cal.points["Relu"] == 5


def test_calibration_under_ten_percent_noise():
    rng = np.random.default_rng(0)
    flops = np.geomspace(1e3, 1e6, 40)
    ns = 0.7 * flops * rng.uniform(0.9, 1.1, size=40)
    cal = calibrate_op_costs({"MatAdd": list(zip(flops, ns))})
    assert abs(cal.multipliers["MatAdd"] - 0.7) / 0.7 <= 0.15


def test_calibration_needs_enough_points():
    with pytest.raises(ValueError, match="at least 5"):
        calibrate_op_costs({"MatMul": [(1.0, 1.0)] * 3})
    with pytest.raises(ValueError, match="positive"):
        calibrate_op_costs({"MatMul": [(1.0, 0.0)] * 5})


def test_calibrated_multipliers_reproduce_microbench_timings():
    samples = microbench(seed=0, repeats=7)
    cal = calibrate_op_costs(samples)
    total_err, point_err = {}, {}
    for kind, pts in samples.items():
        arr = np.asarray(pts)
        pred = arr[:, 0] * cal.multipliers[kind]
        total_err[kind] = abs(pred.sum() - arr[:, 1].sum()) / arr[:, 1].sum()
        point_err[kind] = float((np.abs(pred - arr[:, 1]) / arr[:, 1]).max())
    print("per-kind runtime error:", {k: round(v, 3) for k, v in total_err.items()})
    print("worst single size:", {k: round(v, 3) for k, v in point_err.items()})
    assert max(total_err.values()) <= 0.30
