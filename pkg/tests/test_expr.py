from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fjord import expr as ex
from fjord.factorize import RESIDUAL, analyze, lineage
from fjord.inference import ModelBundle
from fjord.join_tree import JoinTree

from helpers import random_graph


def node(nid, kind, inputs=(), **params):
    return {"id": nid, "op": kind, "inputs": list(inputs), "params": params}


def ffnn_over_four_tables():
    """Four-way concat, matMul, relu, matMul over t1..t4."""
    rng = np.random.default_rng(7)
    models = ModelBundle(matrices={"W1": rng.normal(size=(40, 30)), "W2": rng.normal(size=(30, 5))})
    spec = {"nodes": [
        *[node(f"in{k}", "InputRef", columns=[f"t{k}.x"]) for k in range(1, 5)],
        node("cat", "Concat", ["in1", "in2", "in3", "in4"]),
        node("mm1", "MatMul", ["cat"], weight="W1"),
        node("act", "Relu", ["mm1"]),
        node("mm2", "MatMul", ["act"], weight="W2"),
    ], "outputs": ["mm2"]}
    return spec, models, {f"t{k}.x": 10 for k in range(1, 5)}


def three_table_workflow():
    """Per-table groups, a matMul over two tables, and a mixed matMul above Join1."""
    rng = np.random.default_rng(3)
    m = lambda a, b: rng.normal(size=(a, b)).astype(np.float32)  # noqa: E731
    models = ModelBundle(matrices={"W1": m(4, 6), "W2": m(5, 6), "W3": m(9, 6), "W4": m(15, 3)})
    spec = {"nodes": [
        node("a", "InputRef", columns=["r1.a"]), node("b", "InputRef", columns=["r2.b"]),
        node("c", "InputRef", columns=["r3.c"]),
        node("mm1", "MatMul", ["a"], weight="W1"), node("g1", "Relu", ["mm1"]),
        node("mm2", "MatMul", ["b"], weight="W2"), node("g2", "Relu", ["mm2"]),
        node("ab", "Concat", ["a", "b"]), node("mm3", "MatMul", ["ab"], weight="W3"),
        node("mix", "Arith", ["g1", "g2"], op="*"),
        node("x4", "Concat", ["mix", "mm3", "c"]), node("mm4", "MatMul", ["x4"], weight="W4"),
        node("out", "Softmax", ["mm4"]),
    ], "outputs": ["out"]}
    tree = JoinTree.from_shape((("r1", "r2"), "r3"), keys=True)
    return ex.parse_graph(spec), models, {"r1.a": 4, "r2.b": 5, "r3.c": 3}, tree


# ------------------------------------------------------------------ parse


def test_single_input_graph():
    g = ex.parse_graph({"nodes": [node("x", "InputRef", columns=["t.a"])], "outputs": ["x"]})
    assert len(g.nodes) == 1 and g.outputs == ("x",)


def test_four_way_ffnn_parses_to_expected_shape():
    spec, models, dims = ffnn_over_four_tables()
    g = ex.parse_graph(spec)
    assert [n.op for n in g.nodes] == ["InputRef"] * 4 + ["Concat", "MatMul", "Relu", "MatMul"]
    assert g["cat"].inputs == ("in1", "in2", "in3", "in4")
    assert ex.infer_dims(g, dims, models) == {
        "in1": 10, "in2": 10, "in3": 10, "in4": 10, "cat": 40, "mm1": 30, "act": 30, "mm2": 5}


def test_nodes_may_be_listed_out_of_order():
    g = ex.parse_graph({"nodes": [node("r", "Relu", ["x"]), node("x", "InputRef", columns=["t.a"])],
                        "outputs": ["r"]})
    assert [n.id for n in g.nodes] == ["x", "r"]


def test_print_parse_round_trip_random_graphs():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        g, *_ = random_graph(int(rng.integers(2, 5)), rng, steps=int(rng.integers(1, 9)))
        text = ex.print_graph(g)
        again = ex.parse_graph(text)
        assert ex.print_graph(again) == text
        assert again == g


@pytest.mark.parametrize("spec, message", [
    ({"nodes": [node("a", "Relu", ["b"]), node("b", "Relu", ["a"])], "outputs": ["a"]}, "cycle"),
    ({"nodes": [node("a", "Frobnicate")], "outputs": ["a"]}, "unknown op"),
    ({"nodes": [node("a", "Relu", ["nope"])], "outputs": ["a"]}, "undefined"),
    ({"nodes": [node("a", "InputRef", columns=["t.a"]), node("a", "Relu", ["a"])], "outputs": ["a"]}, "duplicate"),
    ({"nodes": [node("a", "InputRef", columns=["t.a"]), node("r", "Relu", ["a", "a"])], "outputs": ["r"]}, "inputs"),
    ({"nodes": [node("a", "InputRef", columns=["t.a"])], "outputs": []}, "no outputs"),
    ({"nodes": [node("a", "InputRef", columns=["t.a"])], "outputs": ["z"]}, "not a node"),
    ({"nodes": [node("a", "InputRef")], "outputs": ["a"]}, "no columns"),
])
def test_parse_errors(spec, message):
    with pytest.raises(ex.ExprError, match=message):
        ex.parse_graph(spec)


def test_syntax_error_reports_location():
    with pytest.raises(json.JSONDecodeError) as err:
        ex.parse_graph('{"nodes": [ {"id": "a",, } ], "outputs": ["a"]}')
    assert err.value.lineno == 1 and err.value.colno > 1


def test_infer_dims_errors():
    models = ModelBundle(matrices={"W": np.ones((3, 2))})
    g = ex.parse_graph({"nodes": [node("a", "InputRef", columns=["t.a"]), node("m", "MatMul", ["a"], weight="W")],
                        "outputs": ["m"]})
    with pytest.raises(ex.ExprError, match="input width"):
        ex.infer_dims(g, {"t.a": 4}, models)
    with pytest.raises(ex.ExprError, match="unknown column"):
        ex.infer_dims(g, {"t.b": 3}, models)
    with pytest.raises(ex.ExprError, match="unknown matrix"):
        ex.infer_dims(g, {"t.a": 3}, ModelBundle())


# ---------------------------------------------------------------- lineage


def test_lineage_single_table_and_mixed_refs():
    tree = JoinTree.left_deep(3, keys=True)
    g = ex.parse_graph({"nodes": [
        node("a", "InputRef", columns=["t1.x"]), node("ab", "InputRef", columns=["t1.x", "t2.x"]),
        node("c", "InputRef", columns=["t3.x"]), node("cat", "Concat", ["a", "ab", "c"]),
    ], "outputs": ["cat"]})
    assert lineage(g, tree) == {"a": 1, "ab": 4, "c": 3}


def test_lineage_unknown_column():
    tree = JoinTree.left_deep(2)
    g = ex.parse_graph({"nodes": [node("a", "InputRef", columns=["zz.x"])], "outputs": ["a"]})
    with pytest.raises(KeyError):
        lineage(g, tree)
    g = ex.parse_graph({"nodes": [node("a", "InputRef", columns=["unqualified"])], "outputs": ["a"]})
    with pytest.raises(ex.ExprError):
        lineage(g, tree)


def test_three_table_workflow_group_homes():
    g, models, dims, tree = three_table_workflow()
    assert lineage(g, tree) == {"a": 1, "b": 2, "c": 3}
    fmap = analyze(g, tree, dims, models)
    by_nodes = {u.nodes: u.home for u in fmap.units}
    assert by_nodes[("mm1", "g1")] == 1  # per-table group on r1
    assert by_nodes[("mm2", "g2")] == 2  # per-table group on r2
    assert by_nodes[("mm3#1",)] == 1 and by_nodes[("mm3#2",)] == 2  # matMul over r1, r2 split per table
    assert by_nodes[("mm4#3",)] == 3  # r3 share of the top matMul sits on its scan
    # the top matMul share over the r1/r2 values sits at Join1, together with the mixing node
    join1 = tree.node_for_tables(["r1", "r2"])
    assert {u.home for u in fmap.units if "mix" in u.nodes or "mm4#4" in u.nodes} == {join1}
    assert fmap.residual_nodes == ("mm4", "out")


# ---------------------------------------------------------------- analyze


def test_one_input_per_table_into_matmul():
    spec, models, dims = ffnn_over_four_tables()
    tree = JoinTree.left_deep(4, keys=True)
    fmap = analyze(ex.parse_graph(spec), tree, dims, models)
    assert [u.home for u in fmap.units] == [1, 2, 3, 4]
    assert all(e.combine == "mm1" for u in fmap.units for e in u.exports)
    assert fmap.combines["mm1"].kind == "sum" and fmap.combines["mm1"].contributors == (1, 2, 3, 4)
    assert fmap.residual_nodes == ("mm1", "act", "mm2")


def test_opaque_udf_over_two_sources_leaves_everything_at_root():
    tree = JoinTree.left_deep(2, keys=True)
    g = ex.parse_graph({"nodes": [
        node("a", "InputRef", columns=["t1.x"]), node("b", "InputRef", columns=["t2.x"]),
        node("u", "OpaqueUDF", ["a", "b"], name="rowsum"),
    ], "outputs": ["u"]})
    fmap = analyze(g, tree, {"t1.x": 3, "t2.x": 2}, ModelBundle())
    assert fmap.units == ()
    assert fmap.residual_nodes == ("u",)
    assert {r.consumers for r in fmap.raw} == {(RESIDUAL,)}


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), m=st.integers(2, 4), steps=st.integers(1, 9))
def test_analyze_preserves_semantics(seed, m, steps):
    rng = np.random.default_rng(seed)
    g, models, dims, columns = random_graph(m, rng, steps)
    tree = JoinTree.left_deep(m, keys=True)
    fmap = analyze(g, tree, dims, models)
    want = ex.evaluate(g, columns, models)
    got = ex.evaluate(fmap.graph, columns, models)
    for o in g.outputs:
        assert np.abs(got[o] - want[o]).max() <= 1e-4 * (1 + np.abs(want[o]).max())


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), m=st.integers(2, 4), steps=st.integers(1, 9))
def test_units_only_read_their_home_subtree(seed, m, steps):
    rng = np.random.default_rng(seed)
    g, models, dims, _ = random_graph(m, rng, steps)
    tree = JoinTree.left_deep(m, keys=True)
    fmap = analyze(g, tree, dims, models)
    by_uid = fmap.by_uid()
    for u in fmap.units:
        assert u.home != tree.root
        below = set(tree.tables[u.home])
        assert {c.split(".")[0] for c in u.raw_inputs} <= below
        for v in u.unit_inputs:
            assert tree.is_ancestor_or_self(u.home, by_uid[v].home)
    # each expanded node is owned by at most one unit
    owned = [k for u in fmap.units for k in u.nodes]
    assert len(owned) == len(set(owned))
    assert not set(owned) & set(fmap.residual_nodes)


# ------------------------------------------------------------------- cost


def test_cost_of_empty_selection_is_zero():
    spec, models, dims = ffnn_over_four_tables()
    g = ex.parse_graph(spec)
    assert ex.expr_cost(g, ex.infer_dims(g, dims, models), models, nodes=[]) == 0.0


def test_lone_matmul_costs_two_n_k():
    models = ModelBundle(matrices={"W": np.ones((7, 3))})
    g = ex.parse_graph({"nodes": [node("a", "InputRef", columns=["t.a"]), node("m", "MatMul", ["a"], weight="W")],
                        "outputs": ["m"]})
    dims = ex.infer_dims(g, {"t.a": 7}, models)
    assert ex.expr_cost(g, dims, models) == 2 * 7 * 3
    assert ex.expr_cost(g, dims, models, {"MatMul": 0.5}) == 7 * 3


def test_per_op_flop_rules():
    spec, models, dims = ffnn_over_four_tables()
    g = ex.parse_graph(spec)
    d = ex.infer_dims(g, dims, models)
    flops = {n.id: ex.node_flops(n, d, models) for n in g.nodes}
    assert flops == {"in1": 0, "in2": 0, "in3": 0, "in4": 0, "cat": 40, "mm1": 2 * 40 * 30, "act": 30,
                     "mm2": 2 * 30 * 5}
