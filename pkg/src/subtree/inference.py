"""Confidence intervals for leaf-level treatment effects and variable importance."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from ._parallel import pmap
from .dataset import DataError
from .splitcore import Problem, score_variables
from .stats import chi2_quantile


@dataclass(frozen=True)
class BootstrapConfig:
    """``J`` resamples, master ``seed`` and the interval half-width multiplier."""

    J: int = 100
    seed: int = 0
    multiplier: float = 2.0
    min_effective: int = 10

    def __post_init__(self):
        if self.J < 2:
            raise ValueError("J must be >= 2")


@dataclass
class Interval:
    node: int
    quantity: str
    estimate: float
    se: float
    lower: float
    upper: float
    n_effective: int = 0
    scale: str = "identity"


@dataclass
class IntervalReport:
    intervals: list
    J: int
    failed: int = 0
    dropped_weights: int = 0
    kind: str = "bootstrap"

    def get(self, node, quantity):
        for iv in self.intervals:
            if iv.node == node and iv.quantity == quantity:
                return iv
        raise KeyError((node, quantity))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["node", "quantity", "estimate", "se", "lower", "upper", "n_effective", "scale"])
        for iv in self.intervals:
            w.writerow([iv.node, iv.quantity, _fmt(iv.estimate), _fmt(iv.se), _fmt(iv.lower),
                        _fmt(iv.upper), iv.n_effective, iv.scale])
        return buf.getvalue()

    def to_text(self):
        head = f"{self.kind} intervals"
        if self.kind == "bootstrap":
            head += f" (J = {self.J}, failed refits = {self.failed}, dropped intersections = {self.dropped_weights})"
        lines = [head, f"{'node':>6}  {'quantity':<22}{'estimate':>12}{'lower':>12}{'upper':>12}"]
        for iv in self.intervals:
            lines.append(f"{iv.node:>6}  {iv.quantity:<22}{iv.estimate:>12.4g}{iv.lower:>12.4g}{iv.upper:>12.4g}")
        return "\n".join(lines) + "\n"


def _fmt(x):
    return "NA" if x is None or not np.isfinite(x) else repr(float(x))


# ---------------------------------------------------------------------------
# naive intervals


def naive_intervals(tree, level=0.95):
    """Per-leaf naive intervals for uncensored trees.

    Means get ``mean +/- 2 sd / sqrt(k)``; the difference between levels 1
    and 0 gets the pooled two-sample t interval. Quantities needing a
    standard deviation from fewer than two observations are NaN.
    """
    if tree.censored:
        raise ValueError("naive intervals are defined for uncensored trees only")
    levels = tree.treatment_levels
    out = []
    for leaf in tree.leaves():
        k = leaf.counts
        for z, lv in enumerate(levels):
            m, s = leaf.means[z], leaf.sds[z]
            half = 2.0 * s / np.sqrt(k[z]) if k[z] >= 2 else np.nan
            se = s / np.sqrt(k[z]) if k[z] >= 2 else np.nan
            out.append(Interval(leaf.id, f"mean[{lv}]", float(m), float(se), float(m - half), float(m + half), int(k[z])))
        if len(levels) == 2:
            d, half, se = _two_sample_t(leaf, level)
            out.append(Interval(leaf.id, "difference", d, se, d - half, d + half, int(k.sum())))
    return IntervalReport(out, J=0, kind="naive")


def _two_sample_t(leaf, level):
    k0, k1 = leaf.counts[:2]
    d = leaf.effect
    if k0 < 1 or k1 < 1 or k0 + k1 < 3:
        return d, np.nan, np.nan
    s0 = leaf.sds[0] if k0 > 1 else 0.0
    s1 = leaf.sds[1] if k1 > 1 else 0.0
    df = k0 + k1 - 2
    sp = np.sqrt(((k0 - 1) * s0**2 + (k1 - 1) * s1**2) / df)
    se = sp * np.sqrt(1.0 / k0 + 1.0 / k1)
    return d, float(sps.t.ppf(0.5 + level / 2, df) * se), float(se)


# ---------------------------------------------------------------------------
# bootstrap


def refit(dataset, config):
    from .tree import grow

    return grow(dataset, config)


def _quantities(tree):
    levels = tree.treatment_levels
    if tree.censored:
        return [f"log_rr[{lv}]" for lv in levels[1:]]
    names = [f"mean[{lv}]" for lv in levels]
    if len(levels) == 2:
        names.append("difference")
    return names


def _leaf_values(tree):
    """``{leaf_id: per-treatment values}``; means (uncensored) or log relative risks."""
    out = {}
    for leaf in tree.leaves():
        if tree.censored:
            out[leaf.id] = np.asarray(leaf.log_relative_risk, dtype=float)
        else:
            out[leaf.id] = np.where(leaf.counts > 0, leaf.means, np.nan)
    return out


def _replicate(task):
    """One resample: bar-theta for every (original leaf, quantity), plus dropped count."""
    dataset, config, orig_leaf, leaf_ids, seed = task
    rng = np.random.default_rng(seed)
    n = dataset.n_rows
    rows = rng.integers(0, n, n)
    try:
        star = refit(dataset.take(rows), config)
    except (DataError, ValueError, FloatingPointError):
        return None
    values = _leaf_values(star)
    star_ids = sorted(values)
    si = np.searchsorted(star_ids, star.apply(dataset))
    V = np.stack([values[t] for t in star_ids])  # (B, n_q)
    z = np.asarray(dataset.z, dtype=np.int64)
    A, B = len(leaf_ids), len(star_ids)
    L = dataset.n_treatments
    if star.censored:
        # all-row intersection counts for coefficients
        W = np.bincount(orig_leaf * B + si, minlength=A * B).reshape(A, B, 1)
        W = np.broadcast_to(W, (A, B, V.shape[1]))
    else:
        # treatment-specific intersection counts for means
        W = np.bincount((orig_leaf * B + si) * L + z, minlength=A * B * L).reshape(A, B, L)
    valid = np.isfinite(V)[None, :, :]
    dropped = int(((W > 0) & ~valid).sum())
    Wv = np.where(valid, W, 0)
    den = Wv.sum(axis=1)
    num = (Wv * np.nan_to_num(V)[None]).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        res = np.where(den > 0, num / np.maximum(den, 1), np.nan)
    if not star.censored and L == 2:
        res = np.column_stack([res, res[:, 1] - res[:, 0]])
    return res, dropped


def bootstrap_intervals(dataset, tree, config=None, threads=1):
    """Bootstrap standard errors of the leaf estimates of ``tree``.

    Every replicate refits a tree with ``tree.config`` on a resample,
    routes the original rows through it and averages its leaf estimates
    over the intersections with each original leaf. Intervals are
    ``estimate +/- 2 SD``; censored trees report log relative risks with
    ``scale="log"`` (exponentiate the bounds for relative risks).
    """
    config = config or BootstrapConfig()
    leaf_ids = sorted(lf.id for lf in tree.leaves())
    orig_leaf = np.searchsorted(leaf_ids, tree.apply(dataset))
    seeds = np.random.SeedSequence(config.seed).spawn(config.J)
    tasks = [(dataset, tree.config, orig_leaf, leaf_ids, s) for s in seeds]
    results = pmap(_replicate, tasks, threads)
    ok = [r for r in results if r is not None]
    failed = len(results) - len(ok)
    names = _quantities(tree)
    if not ok:
        raise DataError("every bootstrap refit failed")
    stack = np.stack([r[0] for r in ok])
    dropped = int(sum(r[1] for r in ok))
    est = _leaf_values(tree)
    out = []
    for a, t in enumerate(leaf_ids):
        leaf = tree.node(t)
        base = list(est[t])
        if not tree.censored and len(base) == 2:
            base.append(leaf.effect)
        for q, name in enumerate(names):
            col = stack[:, a, q]
            good = col[np.isfinite(col)]
            if len(good) < config.min_effective:
                raise DataError(f"node {t}, {name}: only {len(good)} usable bootstrap replicates "
                                f"(need {config.min_effective})")
            sd = float(good.std(ddof=1))
            e = float(base[q])
            half = config.multiplier * sd
            out.append(Interval(t, name, e, sd, e - half, e + half, len(good),
                                "log" if tree.censored else "identity"))
    return IntervalReport(out, config.J, failed, dropped)


# ---------------------------------------------------------------------------
# importance


@dataclass
class ImportanceReport:
    names: list
    scores: np.ndarray
    threshold: float
    scale: float
    dof: float
    node_sizes: list = field(default_factory=list)

    @property
    def important(self):
        return self.scores > self.threshold

    def ranking(self):
        """Variable names by decreasing score."""
        order = np.argsort(-self.scores, kind="stable")
        return [self.names[i] for i in order]

    def flagged(self):
        return [nm for nm in self.ranking() if self.scores[self.names.index(nm)] > self.threshold]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variable", "score", "threshold", "important"])
        for nm in self.ranking():
            i = self.names.index(nm)
            w.writerow([nm, repr(float(self.scores[i])), repr(float(self.threshold)), int(self.important[i])])
        return buf.getvalue()

    def to_text(self):
        lines = [f"importance threshold {self.threshold:.4g} "
                 f"(scaled chi-squared: c = {self.scale:.4g}, df = {self.dof:.4g}, "
                 f"{len(self.node_sizes)} node(s))"]
        for nm in self.ranking():
            i = self.names.index(nm)
            mark = "*" if self.important[i] else " "
            lines.append(f"{mark} {nm:<20}{self.scores[i]:>14.4g}")
        return "\n".join(lines) + "\n"


def satterthwaite_threshold(node_sizes, level=0.95):
    """``(threshold, c, dof)`` for a sum of ``n_t``-scaled independent chi-squared(1) terms."""
    n = np.asarray(node_sizes, dtype=float)
    s1, s2 = n.sum(), (n * n).sum()
    c = s2 / s1
    dof = s1 * s1 / s2
    return float(c * chi2_quantile(level, dof)), float(c), float(dof)


def importance_scores(tree, dataset=None, level=0.95):
    """``Imp(X) = sum_t n_t q_t(X)`` over the intermediate nodes of ``tree``.

    A trivial tree uses the root's scores; they are recomputed from
    ``dataset`` if growth stopped before selection ran at the root.
    """
    nodes = tree.intermediate_nodes() or [tree.root]
    names = [p["name"] for p in tree.predictors]
    if any(nd.scores is None for nd in nodes):
        if dataset is None:
            raise ValueError("tree lacks recorded scores; pass the training dataset")
        exposure = tree.hazard(dataset.y) if tree.censored else None
        problem = Problem.for_dataset(dataset, tree.method, exposure, tree.config.lof_statistic,
                                      tree.config.yates)
        for nd in nodes:
            if nd.scores is None:
                rows = nd.rows if nd.rows is not None else np.arange(dataset.n_rows)
                nd.scores = score_variables(problem, rows, tree.method)[0]
    scores = np.zeros(len(names))
    sizes = []
    for nd in nodes:
        scores += nd.n * np.nan_to_num(nd.scores)
        sizes.append(nd.n)
    thr, c, dof = satterthwaite_threshold(sizes, level)
    return ImportanceReport(names, scores, thr, c, dof, sizes)
