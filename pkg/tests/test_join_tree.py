from __future__ import annotations

import itertools
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fjord.join_tree import (
    JoinTree, QuerySpec, availability, build_join_tree, count_valid_plans, enumerate_valid_plans,
    plan_space_size, repair, validate_plan,
)
from fjord.relational import INT64, Table

from helpers import random_shape

# brute force over all 2^(2m-1) vectors with the definitional checker below
LEFT_DEEP_VALID_COUNTS = {2: 4, 3: 14, 4: 48, 5: 164, 6: 560, 7: 1912}


def definitional_available(tree: JoinTree, plan, i: int) -> set[int]:
    """D_i straight from the definition: leaf units under i not taken by a pushing proper descendant."""
    under = [k for k in tree.subtree(i) if k != i]
    taken: set[int] = set()
    for k in under:
        if plan[k - 1]:
            taken |= definitional_available(tree, plan, k)
    return {j for j in tree.subtree(i) if j <= tree.m} - taken


def definitional_valid(tree: JoinTree, plan) -> bool:
    for i in range(1, tree.size + 1):
        if plan[i - 1] and not definitional_available(tree, plan, i):
            return False
    return not (definitional_available(tree, plan, tree.root) and not plan[tree.root - 1])


def brute_force(tree: JoinTree) -> list[tuple[int, ...]]:
    return [p for p in itertools.product((0, 1), repeat=tree.size) if definitional_valid(tree, p)]


def test_brute_force_counts_are_frozen():
    for m in (2, 3, 4, 5):
        assert len(brute_force(JoinTree.left_deep(m))) == LEFT_DEEP_VALID_COUNTS[m]


@pytest.mark.parametrize("m", sorted(LEFT_DEEP_VALID_COUNTS))
def test_enumeration_matches_brute_force_counts(m):
    tree = JoinTree.left_deep(m)
    plans = enumerate_valid_plans(tree)
    assert len(plans) == len(set(plans)) == LEFT_DEEP_VALID_COUNTS[m]
    assert count_valid_plans(tree) == LEFT_DEEP_VALID_COUNTS[m]


def test_closed_form_agrees_for_small_m_only():
    assert plan_space_size(2) == 4 and plan_space_size(3) == 14
    assert plan_space_size(4) == 34 != LEFT_DEEP_VALID_COUNTS[4]


def test_enumeration_equals_brute_force_on_random_shapes():
    rng = random.Random(3)
    for _ in range(15):
        tree = JoinTree.from_shape(random_shape(rng.randint(2, 5), rng))
        assert enumerate_valid_plans(tree) == brute_force(tree)


def test_enumeration_is_lexicographic():
    plans = enumerate_valid_plans(JoinTree.left_deep(4))
    assert plans == sorted(plans)


def test_validate_accepts_exactly_the_enumerated_plans():
    for m in range(2, 6):
        tree = JoinTree.left_deep(m)
        valid = set(enumerate_valid_plans(tree))
        for p in itertools.product((0, 1), repeat=tree.size):
            assert validate_plan(tree, p) == (p in valid)


def test_enumeration_guard():
    with pytest.raises(ValueError):
        enumerate_valid_plans(JoinTree.left_deep(17))


def test_two_tables_tree():
    t = JoinTree.left_deep(2)
    assert sorted(t.nodes) == [1, 2, 3] and t.root == 3


def test_four_tables_explicit_order():
    tables = {n: Table.from_arrays(n, {"id": (INT64, np.arange(10)), "k": (INT64, np.arange(10))})
              for n in ("a", "b", "c", "d")}
    q = QuerySpec.from_json({"tables": ["a", "b", "c", "d"],
                             "joins": [{"left": "a.k", "right": f"{t}.id"} for t in "bcd"]})
    tree = build_join_tree(tables, q, ["a", "c", "b", "d"])
    assert tree.size == 7
    assert [tree.nodes[i].table for i in range(1, 5)] == ["a", "c", "b", "d"]
    assert tree.children(5) == (1, 2) and tree.children(6) == (5, 3) and tree.children(7) == (6, 4)


def test_greedy_order_ascending_size():
    sizes = {"big": 1000, "small": 10, "mid": 100}
    tables = {n: Table.from_arrays(n, {"id": (INT64, np.arange(s)), "k": (INT64, np.arange(s) % 10)})
              for n, s in sizes.items()}
    q = QuerySpec.from_json({"tables": ["big", "small", "mid"],
                             "joins": [{"left": "big.k", "right": "small.id"}, {"left": "mid.k", "right": "small.id"}]})
    tree = build_join_tree(tables, q)
    assert [tree.nodes[i].table for i in range(1, 4)] == ["small", "mid", "big"]


def test_unknown_table_rejected():
    q = QuerySpec.from_json({"tables": ["a", "zzz"], "joins": []})
    with pytest.raises(KeyError):
        build_join_tree({"a": Table.from_arrays("a", {"id": (INT64, [1])})}, q)


def test_availability_all_zero_plan():
    t = JoinTree.left_deep(4)
    d = availability(t, (0,) * 7)
    for i in range(1, 8):
        assert d[i] == {j for j in t.subtree(i) if j <= 4}


def test_availability_full_push_down():
    t = JoinTree.left_deep(4)
    d = availability(t, (1, 1, 1, 1, 0, 0, 0))
    assert all(not d[i] for i in (5, 6, 7))


def test_availability_root_collects_three_and_scan_keeps_one():
    # push at scan 4 and at the root: the root receives the first three units
    t = JoinTree.left_deep(4)
    plan = (0, 0, 0, 1, 0, 0, 1)
    d = availability(t, plan)
    assert d[7] == {1, 2, 3} and d[4] == {4}
    assert validate_plan(t, plan)


def test_grouped_plan_with_join_push_is_valid():
    t = JoinTree.left_deep(4)
    assert validate_plan(t, (0, 0, 0, 0, 0, 1, 1))


def test_all_zero_violates_root():
    assert not validate_plan(JoinTree.left_deep(3), (0,) * 5)


def test_push_at_both_children_and_parent_is_invalid():
    assert not validate_plan(JoinTree.left_deep(2), (1, 1, 1))


def test_repair_examples():
    t = JoinTree.left_deep(2)
    assert repair(t, (1, 1, 1)) == (1, 1, 0)
    assert repair(t, (0, 0, 0)) == (0, 0, 1)


def test_repair_idempotent_fuzz():
    rng = random.Random(0)
    for _ in range(10_000):
        m = rng.randint(2, 7)
        t = JoinTree.left_deep(m)
        x = [rng.randint(0, 1) for _ in range(t.size)]
        once = repair(t, x)
        assert repair(t, once) == once
        assert validate_plan(t, once)


def test_plan_length_checked():
    with pytest.raises(ValueError):
        availability(JoinTree.left_deep(2), (0, 1))


def test_tree_structure_checks():
    t = JoinTree.from_shape((("a", "b"), ("c", "d")))
    assert t.children(7) == (5, 6) and t.depth[1] == 2 and t.height == 2
    assert t.lca([1, 2]) == 5 and t.lca([1, 3]) == 7


def test_keys_follow_first_table_of_each_side():
    t = JoinTree.left_deep(3, keys=True)
    assert t.key_columns(t.root) == ()
    assert t.key_columns(1) == ("t1.k",) and t.key_columns(3) == ("t3.k",)
    assert t.key_columns(4) == ("t1.k",)


@settings(max_examples=80, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10_000), st.data())
def test_each_unit_lands_exactly_once(m, seed, data):
    t = JoinTree.from_shape(random_shape(m, random.Random(seed)))
    x = data.draw(st.lists(st.integers(0, 1), min_size=t.size, max_size=t.size))
    plan = repair(t, x)
    d = availability(t, plan)
    for j in range(1, m + 1):
        path = [j] + t.ancestors(j)
        receivers = [i for i in path if plan[i - 1] and j in d[i]]
        assert len(receivers) == 1
        assert receivers[0] == next(i for i in path if plan[i - 1])
