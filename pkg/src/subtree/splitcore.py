"""Split-variable selection and split-point search at a single node.

Selection is done first and separately from the split search, which is what
keeps the methods free of bias toward variables with many possible splits:

* **Gs** sums per-treatment chi-squared tests of residual sign against the
  grouped predictor (each test brought to 1 df by Wilson-Hilferty).
* **Gi** tests the treatment + grouped-predictor additive model for lack of
  fit.
* **Gc** is a classification tree on ``V = (Y + Z) mod 2``.

Censored responses reuse Gs and Gi with Poisson residuals and log-linear
lack-of-fit tests (see :mod:`subtree.survival`).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .dataset import Role
from .stats import lof_q_from_grid, poisson_lof_q_from_grid, wilson_hilferty

METHODS = ("gc", "gs", "gi")
MAX_EXHAUSTIVE_LEVELS = 10
MISSING_LABEL = "NA"


def gc_class_variable(y, z):
    """``V = (Y + Z) mod 2``; V is 0 exactly for the (1, 1) and (0, 0) pairs."""
    y = np.asarray(y)
    z = np.asarray(z)
    for name, v in (("Y", y), ("Z", z)):
        if not np.isin(v, (0, 1)).all():
            raise ValueError(f"{name} must be binary 0/1 for the Gc method")
    return ((y.astype(np.int64) + z.astype(np.int64)) % 2).astype(np.int64)


# ---------------------------------------------------------------------------
# split rules


@dataclass(frozen=True)
class SplitRule:
    """Binary split of one predictor; a case goes left iff the rule holds.

    Ordinal: left iff ``x <= threshold``, or ``x`` missing and
    ``missing_goes_left``. Categorical: left iff the label is in
    ``left_levels``; labels not seen in training (and missing values, where
    ``"NA"`` was not seen) follow ``missing_goes_left``.
    """

    variable: str
    kind: str
    threshold: float | None = None
    left_levels: frozenset = frozenset()
    seen_levels: frozenset = frozenset()
    missing_goes_left: bool = False

    def goes_left(self, value):
        if self.kind == "ordinal":
            if value is None or (isinstance(value, float) and np.isnan(value)):
                return self.missing_goes_left
            return float(value) <= self.threshold
        label = MISSING_LABEL if value is None else str(value)
        if label in self.left_levels:
            return True
        if label in self.seen_levels:
            return False
        return self.missing_goes_left

    def route(self, column):
        """Boolean go-left mask for every row of ``column``."""
        if self.kind == "ordinal":
            if column.role is not Role.ORDINAL:
                raise ValueError(f"{self.variable!r}: ordinal rule applied to non-ordinal column")
            return np.where(column.missing, self.missing_goes_left, column.values <= self.threshold)
        labels = list(column.levels) + [MISSING_LABEL]
        lookup = np.array([self.goes_left(None if lab == MISSING_LABEL else lab) for lab in labels])
        codes = np.where(column.values < 0, len(column.levels), column.values)
        return lookup[codes]

    def describe(self, negate=False):
        if self.kind == "ordinal":
            op = ">" if negate else "<="
            if np.isinf(self.threshold):
                text = f"{self.variable} = NA" if negate else f"{self.variable} not NA"
                return text
            text = f"{self.variable} {op} {self.threshold:.6g}"
            if self.missing_goes_left != negate:
                text += " or NA"
            return text
        levels = self.left_levels if not negate else (self.seen_levels - self.left_levels)
        shown = ", ".join(sorted(levels, key=_level_key))
        return f"{self.variable} = {{{shown}}}"

    def to_dict(self):
        d = {"variable": self.variable, "kind": self.kind, "missing_goes_left": self.missing_goes_left}
        if self.kind == "ordinal":
            d["threshold"] = self.threshold
        else:
            d["left_levels"] = sorted(self.left_levels, key=_level_key)
            d["seen_levels"] = sorted(self.seen_levels, key=_level_key)
        return d

    @classmethod
    def from_dict(cls, d):
        if d["kind"] == "ordinal":
            return cls(d["variable"], "ordinal", float(d["threshold"]), missing_goes_left=bool(d["missing_goes_left"]))
        return cls(d["variable"], "categorical", None, frozenset(d["left_levels"]),
                   frozenset(d["seen_levels"]), bool(d["missing_goes_left"]))


def _level_key(label):
    try:
        return (0, float(label), label)
    except ValueError:
        return (1, 0.0, label)


@dataclass(frozen=True)
class VariableScore:
    variable: str
    q: float
    index: int
    r: tuple | None = None


@dataclass
class SplitSearch:
    rule: SplitRule | None
    loss: float
    n_candidates: int
    left: np.ndarray | None = None


# ---------------------------------------------------------------------------
# per-tree problem description


@dataclass
class Problem:
    """Arrays a tree is grown from.

    ``kind`` is ``"ls"`` (least squares on ``y``), ``"poisson"`` (events
    ``delta`` with cumulative-hazard exposure ``exposure``) or ``"class"``
    (binary class ``v``).
    """

    dataset: object
    kind: str
    z: np.ndarray
    n_trt: int
    y: np.ndarray | None = None
    delta: np.ndarray | None = None
    exposure: np.ndarray | None = None
    v: np.ndarray | None = None
    lof_statistic: str = "deviance"
    # continuity correction in the selection chi-squared tests
    yates: bool = False
    # smallest event rate used when scoring held-out censored rows
    reference_floor: float = 1e-12
    _columns: list = field(default_factory=list)

    def __post_init__(self):
        self.design = self.dataset.design
        self._columns = self.dataset.predictors

    @classmethod
    def for_dataset(cls, dataset, method, exposure=None, lof_statistic="deviance", yates=False):
        z = np.ascontiguousarray(dataset.z, dtype=np.int64)
        if method == "gc":
            return cls(dataset, "class", z, dataset.n_treatments, v=gc_class_variable(dataset.y, z), yates=yates)
        if dataset.censored:
            if exposure is None:
                raise ValueError("censored response needs cumulative-hazard exposures")
            return cls(dataset, "poisson", z, dataset.n_treatments, delta=np.asarray(dataset.delta, float),
                       exposure=np.asarray(exposure, float), lof_statistic=lof_statistic, yates=yates)
        return cls(dataset, "ls", z, dataset.n_treatments, y=np.asarray(dataset.y, float), yates=yates)

    @property
    def columns(self):
        return self._columns

    def residuals(self, rows):
        """Residuals of the treatment-only model fitted in the node."""
        z = self.z[rows]
        cnt = np.bincount(z, minlength=self.n_trt)
        if self.kind == "ls":
            y = self.y[rows]
            mean = np.bincount(z, weights=y, minlength=self.n_trt) / np.maximum(cnt, 1)
            return y - mean[z]
        if self.kind == "poisson":
            d = self.delta[rows]
            e = self.exposure[rows]
            dz = np.bincount(z, weights=d, minlength=self.n_trt)
            ez = np.bincount(z, weights=e, minlength=self.n_trt)
            rate = np.where(ez > 0, dz / np.where(ez > 0, ez, 1.0), 0.0)
            return d - e * rate[z]
        raise ValueError("no residuals for classification problems")

    def positive(self, rows):
        if self.kind == "class":
            return self.v[rows].astype(np.int64)
        r = self.residuals(rows)
        scale = max(1.0, float(np.max(np.abs(r)))) if len(r) else 1.0
        return (r > 1e-12 * scale).astype(np.int64)

    def split_stats(self, rows):
        """Per-row (n, L, 3) sufficient statistics and the loss mode."""
        n = len(rows)
        st = np.zeros((n, self.n_trt, 3))
        idx = np.arange(n)
        z = self.z[rows]
        st[idx, z, 0] = 1.0
        if self.kind == "ls":
            y = self.y[rows]
            yc = y - y.mean()
            st[idx, z, 1] = yc
            st[idx, z, 2] = yc * yc
            return st, kernels.SSE
        if self.kind == "poisson":
            st[idx, z, 1] = self.delta[rows]
            st[idx, z, 2] = self.exposure[rows]
            return st, kernels.POISSON
        st[idx, z, 1] = self.v[rows]
        return st, kernels.GINI


# ---------------------------------------------------------------------------
# variable selection


def _present(problem, rows):
    return np.bincount(problem.z[rows], minlength=problem.n_trt) > 0


def _degenerate(codes):
    if codes.shape[0] == 0:
        return np.ones(codes.shape[1], dtype=bool)
    return ~(codes != codes[0][None, :]).any(axis=0)


def score_variables(problem, rows, method):
    """q(X) for every predictor at the node ``rows``.

    Returns ``(q, r, degenerate)``; ``r`` holds the per-treatment 1-df values
    for Gs (``None`` otherwise). Degenerate predictors (one non-empty group)
    get ``q = 0``.
    """
    rows = np.asarray(rows)
    codes, _ = problem.design.node_codes(rows)
    m = codes.shape[1]
    degen = _degenerate(codes)
    if m == 0:
        return np.zeros(0), None, degen
    G = problem.design.n_groups
    z = problem.z[rows]
    r = None
    if method == "gs":
        if problem.kind == "class":
            raise ValueError("Gs needs a regression or censored response")
        sign = problem.positive(rows)
        tabs = kernels.crosstab(codes, z, sign, problem.n_trt, 2, G)
        w, nu = kernels.chi2_tables(tabs.reshape(m * problem.n_trt, 2, G), problem.yates)
        w = w.reshape(m, problem.n_trt)
        nu = nu.reshape(m, problem.n_trt)
        r = np.where(nu > 0, wilson_hilferty(w, np.maximum(nu, 1), 1), 0.0)
        present = _present(problem, rows)
        r[:, ~present] = 0.0
        k = int(present.sum())
        q = wilson_hilferty(r.sum(axis=1), k, 1) if k > 1 else r.sum(axis=1)
    elif method == "gi":
        if problem.kind == "ls":
            y = problem.y[rows]
            yc = y - y.mean()
            w = np.column_stack([np.ones_like(yc), yc, yc * yc])
            q = lof_q_from_grid(kernels.grid_sums(codes, z, w, problem.n_trt, G), len(rows))
        elif problem.kind == "poisson":
            w = np.column_stack([problem.delta[rows], problem.exposure[rows]])
            q = poisson_lof_q_from_grid(kernels.grid_sums(codes, z, w, problem.n_trt, G),
                                        problem.lof_statistic)
        else:
            raise ValueError("Gi needs a regression or censored response")
    elif method == "gc":
        v = problem.v[rows] if problem.kind == "class" else problem.positive(rows)
        tabs = kernels.crosstab(codes, np.zeros_like(z), v, 1, 2, G)
        w, nu = kernels.chi2_tables(tabs.reshape(m, 2, G), problem.yates)
        q = np.where(nu > 0, wilson_hilferty(w, np.maximum(nu, 1), 1), 0.0)
    else:
        raise ValueError(f"unknown method {method!r}")
    q = np.where(degen, 0.0, np.asarray(q, dtype=float))
    return q, r, degen


def rank_scores(problem, q, r, degen):
    """Non-degenerate predictors sorted by decreasing q; ties keep column order."""
    names = problem.design.names
    order = np.argsort(-q, kind="stable")
    out = []
    for j in order:
        if degen[j]:
            continue
        out.append(VariableScore(names[j], float(q[j]), int(j), None if r is None else tuple(r[j])))
    return out


def select_variable(problem, rows, method):
    q, r, degen = score_variables(problem, rows, method)
    return rank_scores(problem, q, r, degen)


def gs_select_variable(dataset, rows=None, exposure=None):
    problem = Problem.for_dataset(dataset, "gs", exposure)
    rows = np.arange(dataset.n_rows) if rows is None else np.asarray(rows)
    return select_variable(problem, rows, "gs")


def gi_select_variable(dataset, rows=None, exposure=None):
    problem = Problem.for_dataset(dataset, "gi", exposure)
    rows = np.arange(dataset.n_rows) if rows is None else np.asarray(rows)
    return select_variable(problem, rows, "gi")


def gc_select_variable(dataset, rows=None):
    problem = Problem.for_dataset(dataset, "gc")
    rows = np.arange(dataset.n_rows) if rows is None else np.asarray(rows)
    return select_variable(problem, rows, "gc")


# ---------------------------------------------------------------------------
# split point search


def find_split_point(problem, rows, var_index, min_node_size, min_treatment_size=2):
    """Best admissible split of the node ``rows`` on predictor ``var_index``."""
    rows = np.asarray(rows)
    col = problem.columns[var_index]
    present = _present(problem, rows)
    stats, mode = problem.split_stats(rows)
    forbid_pure = problem.kind == "class"
    if col.role is Role.ORDINAL:
        return _ordinal_split(col, rows, stats, mode, present, min_node_size, min_treatment_size, forbid_pure)
    return _categorical_split(problem, col, rows, stats, mode, present, min_node_size,
                              min_treatment_size, forbid_pure)


def _ordinal_split(col, rows, stats, mode, present, min_node, min_trt, forbid_pure):
    x = col.values[rows]
    miss = col.missing[rows]
    obs = np.flatnonzero(~miss)
    if len(obs) == 0:
        return SplitSearch(None, np.inf, 0)
    order = obs[np.argsort(x[obs], kind="stable")]
    xs = x[order]
    boundary = xs[1:] != xs[:-1] if len(xs) > 1 else np.zeros(0, dtype=bool)
    boundary = np.append(boundary, False)
    miss_stats = stats[miss].sum(axis=0)
    loss, pos, variant, ncand = kernels.scan_ordinal(stats[order], boundary, miss_stats, mode,
                                                     min_node, min_trt, present, forbid_pure)
    if pos < 0:
        return SplitSearch(None, np.inf, ncand)
    has_miss = bool(miss.any())
    if pos == len(xs) - 1:
        threshold = np.inf
    else:
        threshold = 0.5 * (xs[pos] + xs[pos + 1])
    left = np.where(miss, False, x <= threshold)
    if variant == 1:
        mgl = True
    elif has_miss:
        mgl = False
    else:
        mgl = bool(left.sum() >= len(rows) - left.sum())
    left = np.where(miss, mgl, left)
    rule = SplitRule(col.name, "ordinal", float(threshold), missing_goes_left=mgl)
    return SplitSearch(rule, float(loss), int(ncand), left)


def _categorical_split(problem, col, rows, stats, mode, present, min_node, min_trt, forbid_pure):
    k = len(col.levels)
    codes = np.where(col.values[rows] < 0, k, col.values[rows])
    levels = np.unique(codes)
    g = len(levels)
    if g < 2:
        return SplitSearch(None, np.inf, 0)
    pos = np.searchsorted(levels, codes)
    level_stats = np.zeros((g,) + stats.shape[1:])
    np.add.at(level_stats, pos, stats)
    if g < MAX_EXHAUSTIVE_LEVELS:
        loss, mask, ncand = kernels.search_subsets(level_stats, mode, min_node, min_trt, present, forbid_pure)
        if mask < 0:
            return SplitSearch(None, np.inf, ncand)
        left_pos = [j for j in range(g) if (mask >> j) & 1]
    else:
        # order levels by their share of class-1 cases, then scan the g - 1 cuts
        cls = problem.v[rows] if problem.kind == "class" else problem.positive(rows)
        n_lev = np.bincount(pos, minlength=g)
        c1 = np.bincount(pos, weights=cls, minlength=g)
        order = np.argsort(c1 / n_lev, kind="stable")
        gstats = np.zeros_like(level_stats)
        gstats[:, :, 0] = level_stats[:, :, 0]
        z = problem.z[rows]
        np.add.at(gstats[:, :, 1], (pos, z), cls)
        boundary = np.ones(g, dtype=bool)
        boundary[-1] = False
        loss, p, _, ncand = kernels.scan_ordinal(gstats[order], boundary, np.zeros(level_stats.shape[1:]),
                                                 kernels.GINI, min_node, min_trt, present, forbid_pure)
        if p < 0:
            return SplitSearch(None, np.inf, ncand)
        left_pos = list(order[: p + 1])
    labels = list(col.levels) + [MISSING_LABEL]
    seen = frozenset(labels[c] for c in levels)
    left_labels = frozenset(labels[levels[j]] for j in left_pos)
    left_codes = np.isin(codes, levels[left_pos])
    if MISSING_LABEL in seen:
        mgl = MISSING_LABEL in left_labels
    else:
        mgl = bool(left_codes.sum() >= len(rows) - left_codes.sum())
    rule = SplitRule(col.name, "categorical", None, left_labels, seen, mgl)
    return SplitSearch(rule, float(loss), int(ncand), left_codes)
