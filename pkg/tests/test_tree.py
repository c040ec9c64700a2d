import json

import numpy as np
import pytest

from subtree.dataset import DataError, Dataset
from subtree.inference import naive_intervals
from subtree.simlab import GeneratorSpec, generate
from subtree.tree import (TreeConfig, deserialize, estimate_effects, grow, load, report, save, serialize,
                          tree_signature)


@pytest.fixture(scope="module")
def gi_tree(gbsg2):
    return grow(gbsg2, TreeConfig(method="gi"))


def _sse(tree, ds):
    leaf = tree.apply(ds)
    total = 0.0
    for t in np.unique(leaf):
        for k in range(ds.n_treatments):
            v = ds.y[(leaf == t) & (ds.z == k)]
            if len(v):
                total += ((v - v.mean()) ** 2).sum()
    return total


def test_predictive_data_split_on_x1_near_zero():
    hits = 0
    for seed in range(30):
        ds = generate(GeneratorSpec("predictive", n=100, seed=seed))
        tree = grow(ds, TreeConfig(method="gs"))
        hits += (not tree.trivial and tree.root.split.variable == "X1"
                 and abs(tree.root.split.threshold) < 0.25)
    assert hits >= 25


def test_gated_noise_gives_trivial_trees(rng):
    trivial = 0
    reps = 300
    for _ in range(reps):
        n = 100
        ds = Dataset.from_arrays(rng.normal(size=n), rng.integers(0, 2, n),
                                 ordinal={"a": rng.normal(size=n)}, categorical={"b": rng.integers(0, 3, n)})
        trivial += grow(ds, TreeConfig(method="gi", gate=True, prune=False)).trivial
    # two predictors tested at the 5% level each: about 0.90
    assert trivial >= 0.85 * reps


def test_gbsg2_gi_split(gi_tree, gbsg2):
    rule = gi_tree.root.split
    assert rule.variable == "progrec"
    assert 15 <= rule.threshold <= 30
    sizes = sorted(leaf.n for leaf in gi_tree.leaves())
    assert sum(sizes) == 686
    assert gi_tree.predict_node({"progrec": 5.0}).id == 2


def test_routing_partition_and_node_invariants(rng):
    ds = generate(GeneratorSpec("m1", n=300, seed=4))
    tree = grow(ds, TreeConfig(method="gi", prune=False, max_depth=3))
    leaf = tree.apply(ds)
    assert sorted(np.unique(leaf)) == sorted(l.id for l in tree.leaves())
    assert sum(l.n for l in tree.leaves()) == ds.n_rows
    for nd in tree.nodes():
        assert nd.n == nd.counts.sum()
        assert (nd.split is None) == (nd.left is None) == (nd.right is None)
        if not nd.is_leaf:
            assert nd.left.n + nd.right.n == nd.n
            assert (nd.left.id, nd.right.id) == (2 * nd.id, 2 * nd.id + 1)
    for l in tree.leaves():
        assert (leaf == l.id).sum() == l.n


def test_determinism():
    ds = generate(GeneratorSpec("m2", n=200, seed=9))
    a = grow(ds, TreeConfig(method="gs", seed=3))
    b = grow(ds, TreeConfig(method="gs", seed=3))
    assert tree_signature(a) == tree_signature(b)
    assert serialize(a) == serialize(b)


def test_raising_min_node_size_never_deepens():
    ds = generate(GeneratorSpec("predictive", n=400, seed=2))
    depths = [grow(ds, TreeConfig(method="gi", prune=False, min_node_size=m)).depth for m in (5, 20, 60, 150)]
    assert depths == sorted(depths, reverse=True)


def test_fitted_sse_not_above_root():
    ds = generate(GeneratorSpec("predictive", n=200, seed=6))
    tree = grow(ds, TreeConfig(method="gi", prune=False))
    root = grow(ds, TreeConfig(method="gi", max_depth=0))
    assert root.trivial
    assert _sse(tree, ds) <= _sse(root, ds)


def test_predict_node_missing_and_unseen():
    ds = Dataset.from_arrays([0.0] * 12 + [5.0] * 8, [0, 1] * 10,
                             ordinal={"x": np.arange(20.0)},
                             categorical={"c": ["a"] * 12 + ["b"] * 8})
    tree = grow(ds, TreeConfig(method="gi", prune=False, max_depth=1, min_node_size=2))
    rule = tree.root.split
    left_bigger = tree.root.left.n >= tree.root.right.n
    missing_leaf = tree.predict_node({rule.variable: None})
    assert missing_leaf.id == (2 if left_bigger else 3)
    if rule.kind == "categorical":
        assert tree.predict_node({"c": "zzz"}).id == missing_leaf.id


def test_effects_table_small_leaf():
    ds = Dataset.from_arrays([0, 1, 1, 1], [0, 0, 1, 1], ordinal={"x": [1.0, 2, 3, 4]})
    tree = grow(ds, TreeConfig(method="gi", max_depth=0))
    row = estimate_effects(tree)[0]
    assert row["means"] == [0.5, 1.0]
    assert row["difference"] == 0.5
    assert row["effect_size"] == 0.5


def test_constant_response_zero_width():
    ds = Dataset.from_arrays([2.0] * 10, [0, 1] * 5, ordinal={"x": np.arange(10.0)})
    tree = grow(ds, TreeConfig(method="gi", max_depth=0))
    assert estimate_effects(tree)[0]["difference"] == 0
    iv = naive_intervals(tree).get(1, "difference")
    assert iv.lower == iv.upper == 0


def test_missing_treatment_level_flagged():
    ds = Dataset.from_arrays([0.0, 1, 2, 3, 9, 9, 9, 9], [0, 1, 0, 1, 0, 0, 0, 0], ordinal={"x": np.arange(8.0)})
    tree = grow(ds, TreeConfig(method="gi", max_depth=1, prune=False, min_node_size=4, min_treatment_size=0))
    rows = {r["node"]: r for r in estimate_effects(tree)}
    assert rows[2]["defined"] and rows[2]["difference"] == 1.0
    assert not rows[3]["defined"] and np.isnan(rows[3]["difference"])


def test_round_trip_gbsg2(gi_tree, gbsg2, tmp_path):
    path = tmp_path / "model.json"
    save(gi_tree, path)
    back = load(path)
    np.testing.assert_array_equal(back.apply(gbsg2), gi_tree.apply(gbsg2))
    assert serialize(back) == serialize(gi_tree)
    t = np.linspace(0, 3000, 50)
    np.testing.assert_array_equal(back.hazard(t), gi_tree.hazard(t))


def test_round_trip_trivial_and_categorical_rules():
    triv = grow(generate(GeneratorSpec("m3", n=100, seed=1)), TreeConfig(max_depth=0))
    assert deserialize(serialize(triv)).trivial
    n = 120
    rng = np.random.default_rng(0)
    x = rng.normal(size=n)
    x[:15] = np.nan
    c = rng.integers(0, 4, n)
    z = rng.integers(0, 2, n)
    y = 2 * z * np.isin(c, [1, 3]) + np.nan_to_num(x) + rng.normal(size=n) * 0.1
    ds = Dataset.from_arrays(y, z, ordinal={"x": x}, categorical={"c": c})
    tree = grow(ds, TreeConfig(method="gi", prune=False, max_depth=3))
    kinds = {nd.split.kind for nd in tree.intermediate_nodes()}
    assert kinds == {"ordinal", "categorical"}
    back = deserialize(serialize(tree))
    assert tree_signature(back) == tree_signature(tree)
    np.testing.assert_array_equal(back.apply(ds), tree.apply(ds))


def test_model_file_errors():
    with pytest.raises(DataError):
        deserialize('{"format": "subtree-model", "version": 99}')
    with pytest.raises(DataError):
        deserialize('{"format": "subtree-model", "vers')
    with pytest.raises(DataError):
        deserialize(json.dumps({"format": "other"}))


def test_report_text(gi_tree):
    text = report(gi_tree)
    assert "progrec <= 21.5" in text
    assert "relative risk" in text
    triv = grow(generate(GeneratorSpec("m3", n=100, seed=1)), TreeConfig(max_depth=0))
    assert "no subgroups found" in report(triv).lower()


def test_role_checks():
    ds = Dataset.from_arrays([0.5, 1, 2, 3], [0, 1, 0, 1], ordinal={"x": [1.0, 2, 3, 4]})
    with pytest.raises(DataError, match="binary"):
        grow(ds, TreeConfig(method="gc"))
    with pytest.raises(ValueError):
        TreeConfig(method="cart")
