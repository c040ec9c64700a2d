from types import SimpleNamespace

import numpy as np
import pytest

from subtree import simlab
from subtree.simlab import (X12_PROBS, ExperimentConfig, GeneratorSpec, accuracy, generate, parse_config,
                            response_probability, run_experiment, true_subgroup)
from subtree.splitcore import SplitRule


def test_marker_marginals_large_n():
    n = 100_000
    ds = generate(GeneratorSpec("m1", n=n, seed=1))
    marg = ds.meta["marginals"]
    for name in ("X1", "X2", "X3", "X50"):
        col = ds.column(name)
        codes = np.array([int(v) for v in col.labels()])
        freq = np.bincount(codes, minlength=3) / n
        p = marg[name]
        se = np.sqrt(p * (1 - p) / n)
        assert (np.abs(freq - p) <= 3 * se + 1e-12).all(), name
    np.testing.assert_array_equal(marg["X1"], X12_PROBS)
    assert abs(ds.z.mean() - 0.5) < 3 * 0.5 / np.sqrt(n)


def test_cell_effects():
    one = np.ones(4, dtype=int)
    x1 = np.array([0, 1, 0, 2])
    x2 = np.array([0, 0, 2, 1])
    eff = response_probability("m1", x1, x2, 0, 0, one) - response_probability("m1", x1, x2, 0, 0, 0 * one)
    assert eff == pytest.approx([0.0, 0.20, 0.15, 0.40])
    eff3 = response_probability("m3", x1, x2, 0, 0, one) - response_probability("m3", x1, x2, 0, 0, 0 * one)
    assert eff3 == pytest.approx([0.2] * 4)
    p2 = response_probability("m2", np.array([1, 0]), np.array([1, 1]), np.array([0, 0]), np.array([0, 0]),
                              np.array([1, 1]))
    assert p2 == pytest.approx([0.5, 0.3])


def test_factorial_design_and_true_subgroup():
    ds = generate(GeneratorSpec("factorial", base="m1", r=2, seed=0))
    assert ds.n_rows == 162
    assert [c.name for c in ds.predictors] == ["X1", "X2", "X3", "X4"]
    assert true_subgroup("m1").probability == pytest.approx(0.36)
    assert true_subgroup("m2").probability == pytest.approx(0.36)
    assert true_subgroup("m3").probability == 1.0
    with pytest.raises(ValueError):
        GeneratorSpec("factorial", base="m9")


def _node(id, var=None, left_levels=None, left=None, right=None):
    split = None
    if var is not None:
        split = SplitRule(var, "categorical", None, frozenset(left_levels), frozenset({"0", "1", "2"}), True)
    return SimpleNamespace(id=id, split=split, left=left, right=right, is_leaf=var is None)


def _marginals():
    return {"X1": X12_PROBS, "X2": X12_PROBS, "X3": np.array([0.25, 0.5, 0.25])}


def _tree(deep=False):
    seven = _node(7, "X3", {"0"}, _node(14), _node(15)) if deep else _node(7)
    three = _node(3, "X2", {"0"}, _node(6), seven)
    return SimpleNamespace(root=_node(1, "X1", {"0"}, _node(2), three))


@pytest.mark.parametrize("deep,chosen,expect", [
    (False, [7], 1.0),
    (True, [14], 0.25),
    (True, [14, 15], 1.0),
    (False, [6, 7], 0.0),
    (False, [6], 0.0),
    (False, [], 0.0),
])
def test_accuracy_examples(monkeypatch, deep, chosen, expect):
    monkeypatch.setattr(simlab, "selected_leaves", lambda tree: chosen)
    assert accuracy(_tree(deep), "m1", _marginals()) == pytest.approx(expect)


def test_accuracy_m3_is_selected_share(monkeypatch):
    monkeypatch.setattr(simlab, "selected_leaves", lambda tree: [2])
    assert accuracy(_tree(), "m3", _marginals()) == pytest.approx(X12_PROBS[0])


@pytest.mark.parametrize("text", [
    "experiment = bias\nmethods = gs,gi\nn = 60\niterations = 8\npairs = cont-cat3\nseed = 5\n",
    "experiment = accuracy\nmodel = m3\nmethod = gi\nn = 80\niterations = 4\nseed = 2\n",
    "experiment = coverage\nmodel = m1\nmethods = gi\niterations = 2\nJ = 12\nseed = 3\nprune = off\n",
])
def test_reports_are_reproducible(text):
    a, b = run_experiment(parse_config(text)), run_experiment(parse_config(text))
    assert a.to_csv() == b.to_csv()
    assert a.to_text() == b.to_text()
    assert a.rows


def test_parse_config():
    cfg = parse_config("# comment\nexperiment = bias\nmethods = GS, gi  # trailing\nscale = 0.5\n"
                       "iterations = 10\nse-rule = none\ngate = yes\n")
    assert cfg.methods == ("gs", "gi")
    assert cfg.effective_iterations == 5
    assert cfg.se_rule is None and cfg.gate
    with pytest.raises(ValueError, match="unknown key"):
        parse_config("colour = red\n")
    with pytest.raises(ValueError):
        parse_config("gate = perhaps\n")
    with pytest.raises(ValueError):
        ExperimentConfig(experiment="bias", pairs="cont-weird")
