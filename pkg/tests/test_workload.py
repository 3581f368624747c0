from __future__ import annotations

import filecmp

import numpy as np
import pytest

from fjord.factorize import analyze
from fjord.workload import MODELS, WorkloadConfig, gen_workload, star_speedup_workload


def small(**kw):
    base = dict(n_tables=3, fact_rows=300, fanout=3, features=12)
    base.update(kw)
    return WorkloadConfig(**base)


@pytest.mark.parametrize("model", MODELS)
def test_same_seed_writes_identical_files(tmp_path, model):
    cfg = small(model=model, shape="snowflake", n_tables=4)
    gen_workload(cfg, seed=9).save(tmp_path / "a")
    gen_workload(cfg, seed=9).save(tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
    assert not mismatch and not errors and len(match) == len(names)
    gen_workload(cfg, seed=10).save(tmp_path / "c")
    assert (tmp_path / "a" / "fact.csv").read_bytes() != (tmp_path / "c" / "fact.csv").read_bytes()


def test_save_load_round_trip(tmp_path):
    w = gen_workload(small(model="pipeline"))
    w.save(tmp_path)
    v = type(w).load(tmp_path)
    assert v.config == w.config and v.parents == w.parents
    assert v.graph.dumps() == w.graph.dumps()
    for name, t in w.tables.items():
        for ca, cb in zip(t.columns, v.tables[name].columns):
            assert ca.name == cb.name
            if ca.dtype.kind == "string":
                assert list(ca.values) == list(cb.values)
            else:
                np.testing.assert_array_equal(ca.values, cb.values)


def test_uniform_fanout_repeats_each_dimension_row_exactly():
    w = gen_workload(small(fact_rows=600, fanout=(3, 6)))
    assert w.tables["d1"].row_count == 200 and w.tables["d2"].row_count == 100
    for d, f in (("d1", 3), ("d2", 6)):
        counts = np.bincount(w.tables["fact"].column(f"fk_{d}").values)
        assert (counts == f).all()
    tree = w.join_tree()
    assert tree.nodes[tree.root].cardinality == pytest.approx(600, rel=0.05)


def test_zipf_keys_stay_in_range_and_skew():
    w = gen_workload(small(fact_rows=2000, fanout=10, distribution="zipf"))
    fk = w.tables["fact"].column("fk_d1").values
    assert fk.min() >= 0 and fk.max() < w.tables["d1"].row_count
    counts = np.bincount(fk)
    assert counts[0] > 5 * np.median(counts)


def test_snowflake_parents_point_to_earlier_tables():
    w = gen_workload(small(shape="snowflake", n_tables=6, features=20), seed=4)
    order = ["fact"] + [f"d{k}" for k in range(1, 6)]
    assert w.parents["d1"] == "fact"
    for child, parent in w.parents.items():
        assert order.index(parent) < order.index(child)


def test_feature_split_sums_to_total():
    w = gen_workload(small(features=17))
    assert sum(t.column("feat").dtype.slots for t in w.tables.values()) == 17
    w = gen_workload(small(features=(2, 3, 4)))
    assert [w.tables[n].column("feat").dtype.slots for n in ("fact", "d1", "d2")] == [2, 3, 4]


def test_twenty_table_tree_has_thirty_nine_nodes():
    w = gen_workload(small(n_tables=20, fact_rows=2000, fanout=1, features=40))
    tree = w.join_tree()
    assert tree.m == 20 and tree.size == 39


def test_star_speedup_workload_shape():
    w = star_speedup_workload(fanout=20, features=40, hidden=8)
    assert w.tables["fact"].row_count == 2000
    assert w.tables["fact"].column("feat").dtype.slots == 1
    fmap = analyze(w.graph, w.join_tree(), w.column_dims, w.models)
    assert len(fmap.units) >= 3


@pytest.mark.parametrize("kw, msg", [
    (dict(n_tables=1), "between 2 and 20"),
    (dict(n_tables=21), "between 2 and 20"),
    (dict(shape="ring"), "unknown shape"),
    (dict(model="svm"), "unknown model"),
    (dict(fact_rows=0), "fact rows"),
    (dict(fact_rows=200_000), "fact rows"),
    (dict(fanout=0), "fan-out"),
    (dict(fanout=(2,)), "expected 2 entries"),
    (dict(features=2), "at least one feature per table"),
    (dict(features=(1, 2)), "expected 3 entries"),
    (dict(distribution="pareto"), "unknown distribution"),
    (dict(model="ffnn", layers=2, neurons=(8, 999)), "layer widths"),
])
def test_infeasible_configs_are_rejected(kw, msg):
    with pytest.raises(ValueError, match=msg):
        gen_workload(small(**kw))
