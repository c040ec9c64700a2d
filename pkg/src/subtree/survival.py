"""Censored responses: cumulative hazards, Kaplan-Meier curves and the
iterated Poisson-regression tree for proportional hazards.

Each observation's event indicator is treated as a Poisson count with mean
``Lambda0(y_i) * exp(eta_i)``. Given the baseline cumulative hazard, the
tree is grown with ``Lambda0(y_i)`` as the exposure. The per-leaf,
per-treatment event rates then update ``eta`` and the baseline (a Breslow
estimator weighted by ``exp(eta)``), and the tree is regrown. The first
baseline is the unweighted Nelson-Aalen estimate.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .dataset import DataError


@dataclass
class HazardTable:
    """Step function: value ``values[j]`` on ``[times[j], times[j+1])`` and 0 before ``times[0]``."""

    times: np.ndarray
    values: np.ndarray

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="right") - 1
        vals = np.concatenate([[0.0], self.values])
        out = vals[idx + 1]
        return out if out.ndim else float(out)

    @property
    def empty(self):
        return len(self.times) == 0


def _check_times(times, events):
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=float)
    if times.shape != events.shape:
        raise ValueError("times and events differ in length")
    if (times <= 0).any() or not np.isfinite(times).all():
        raise ValueError("times must be positive and finite")
    if not np.isin(events, (0.0, 1.0)).all():
        raise ValueError("events must be 0/1")
    return times, events


def nelson_aalen(times, events, weights=None):
    """Cumulative hazard ``sum_{t_j <= t} d_j / sum_{y_i >= t_j} w_i``.

    A row is at risk at its own observed time, and tied event times are
    pooled. With ``weights`` equal to ``exp(eta)`` this is Breslow's
    baseline estimator.
    """
    times, events = _check_times(times, events)
    w = np.ones_like(times) if weights is None else np.asarray(weights, dtype=float)
    if (w < 0).any():
        raise ValueError("weights must be non-negative")
    if not events.any():
        return HazardTable(np.zeros(0), np.zeros(0))
    order = np.argsort(times, kind="stable")
    ts, ds, ws = times[order], events[order], w[order]
    uniq, start = np.unique(ts, return_index=True)
    # weight still at risk at each distinct time
    at_risk = np.cumsum(ws[::-1])[::-1][start]
    d = np.add.reduceat(ds, start)
    has = d > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        jumps = d[has] / at_risk[has]
    if not np.isfinite(jumps).all():
        raise DataError("risk set with zero total weight at an event time")
    return HazardTable(uniq[has], np.cumsum(jumps))


def kaplan_meier(times, events, groups=None):
    """Product-limit curves, one per group label, as lists of ``(time, S)`` points.

    Each curve starts at ``(0, 1)``, adds a point at every event time and
    ends at the group's largest observed time.
    """
    times, events = _check_times(times, events)
    if groups is None:
        groups = np.zeros(len(times), dtype=np.int64)
    groups = np.asarray(groups)
    curves = {}
    for g in _ordered_unique(groups):
        sel = groups == g
        t, e = times[sel], events[sel]
        if len(t) == 0:
            raise ValueError(f"empty group {g!r}")
        uniq, inv = np.unique(t, return_inverse=True)
        d = np.bincount(inv, weights=e, minlength=len(uniq))
        n_at = len(t) - np.concatenate([[0], np.cumsum(np.bincount(inv, minlength=len(uniq)))[:-1]])
        s = np.cumprod(1.0 - d / n_at)
        pts = [(0.0, 1.0)]
        for tj, dj, sj in zip(uniq, d, s):
            if dj > 0:
                pts.append((float(tj), float(sj)))
        if uniq[-1] > pts[-1][0]:
            pts.append((float(uniq[-1]), pts[-1][1]))
        curves[g] = pts
    return curves


def _ordered_unique(values):
    seen = {}
    for v in values.tolist():
        seen.setdefault(v, None)
    return list(seen)


def curves_to_csv(curves, path=None):
    """Write ``{group: [(time, value), ...]}`` as ``time,value,group`` rows."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["time", "value", "group"])
    for g, pts in curves.items():
        for t, v in pts:
            w.writerow([repr(float(t)), repr(float(v)), g])
    text = buf.getvalue()
    if path is not None:
        from .tree import atomic_write

        atomic_write(path, text)
    return text


@dataclass
class PoissonFit:
    """Treatment-only Poisson regression with offset ``log Lambda0``."""

    rates: np.ndarray
    coefficients: np.ndarray
    fitted: np.ndarray
    deviance: float
    pearson_residuals: np.ndarray
    used: np.ndarray

    @property
    def relative_risks(self):
        return np.exp(self.coefficients)


def poisson_treatment_fit(delta, offset, z):
    """Closed-form maximum likelihood for ``log mu_i = offset_i + a + b_{z_i}``.

    The rate of level ``k`` is ``sum delta / sum exp(offset)`` over its rows,
    and ``exp(b_k)`` is its ratio to the reference (first) level's rate. Rows
    with an infinite negative offset (zero cumulative hazard) are left out.
    A level without events gets ``-inf``.
    """
    delta = np.asarray(delta, dtype=float)
    offset = np.asarray(offset, dtype=float)
    _, z = np.unique(np.asarray(z), return_inverse=True)
    used = np.isfinite(offset)
    L = int(z.max()) + 1
    e = np.where(used, np.exp(np.where(used, offset, 0.0)), 0.0)
    d = np.where(used, delta, 0.0)
    ev = np.bincount(z, weights=d, minlength=L)
    ex = np.bincount(z, weights=e, minlength=L)
    if ex[0] <= 0 or ev[0] <= 0:
        raise DataError("reference treatment level has no events or no exposure")
    with np.errstate(divide="ignore", invalid="ignore"):
        rates = np.where(ex > 0, ev / ex, np.nan)
        coef = np.log(rates[1:] / rates[0])
        mu = e * np.nan_to_num(rates)[z]
        from .tree import poisson_deviance

        dev = float(poisson_deviance(d[used], mu[used]).sum())
        pr = np.where(mu > 0, (d - mu) / np.sqrt(mu), 0.0)
    return PoissonFit(rates, coef, mu, dev, pr, used)


# ---------------------------------------------------------------------------
# tree fitting


def _eta(root, leaf_ids, z, reference_rate, floor):
    """``eta_i = log(rate of row i's leaf and treatment / reference rate)``."""
    eta = np.zeros(len(z))
    for leaf in root.leaves():
        sel = leaf_ids == leaf.id
        ev, ex = leaf.events, leaf.exposure
        with np.errstate(divide="ignore", invalid="ignore"):
            rate = np.where(ex > 0, ev / ex, reference_rate)
        rate = np.maximum(rate, floor)
        eta[sel] = np.log(rate[z[sel]] / reference_rate)
    return eta


def _leaf_ids(root, n):
    out = np.empty(n, dtype=np.int64)
    for leaf in root.leaves():
        out[leaf.rows] = leaf.id
    return out


def fit_ph_tree(dataset, config):
    """Proportional-hazards tree by iterated Poisson trees (``config.iterations`` passes)."""
    from .splitcore import Problem
    from .tree import build_tree, check_roles, wrap_model

    check_roles(dataset, config.method)
    if config.method == "gc":
        raise DataError("censored responses need the Gs or Gi method")
    if not dataset.censored:
        raise DataError("dataset has no event-indicator column")
    times, delta = dataset.y, dataset.delta
    if (times <= 0).any():
        raise DataError(f"{dataset.source}: survival times in {dataset.response.name!r} must be positive")
    if not delta.any():
        raise DataError(f"{dataset.source}: no events in {dataset.event.name!r}; hazards cannot be estimated")
    z = np.asarray(dataset.z, dtype=np.int64)
    if not delta[z == 0].any():
        raise DataError(f"{dataset.source}: reference treatment level has no events")

    weights = None
    history = []
    root = hazard = ref = None
    for _ in range(max(1, config.iterations)):
        hazard = nelson_aalen(times, delta, weights)
        exposure = hazard(times)
        problem = Problem.for_dataset(dataset, config.method, exposure, config.lof_statistic, config.yates)
        root = build_tree(problem, config)
        ref = float(delta[z == 0].sum() / exposure[z == 0].sum())
        leaf_ids = _leaf_ids(root, dataset.n_rows)
        eta = _eta(root, leaf_ids, z, ref, floor=1e-8 * ref)
        weights = np.exp(eta)
        lrr = root.log_relative_risk
        history.append(float(lrr[0]) if len(lrr) else float("nan"))
    return wrap_model(dataset, root, config, hazard=hazard, reference_rate=ref, history=history)


def censored_exposure(tree, times):
    """Baseline cumulative hazard at ``times`` from a fitted censored tree."""
    if tree.hazard is None:
        raise ValueError("tree has no baseline hazard table")
    return tree.hazard(times)
