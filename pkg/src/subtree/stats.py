"""Statistical kernels shared by the split-selection methods."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from . import kernels



class NumericalError(ArithmeticError):
    """A fit or test could not be computed reliably."""


# p-values below this are clamped before conversion to a 1-df quantile
P_FLOOR = 1e-300


def chi_squared_statistic(table, yates=True):
    """Pearson chi-squared test of independence for a two-way table.

    All-zero rows and columns are dropped first. Yates' continuity correction
    is applied when what remains is 2 x 2 (unless ``yates`` is False). Tables with fewer than two
    non-empty rows or columns give ``(0.0, 0)``.
    """
    t = np.asarray(table, dtype=float)
    if t.ndim != 2:
        raise ValueError("table must be two-dimensional")
    if (t < 0).any():
        raise ValueError("counts must be non-negative")
    stat, df = kernels.chi2_tables(t[None], yates)
    return float(stat[0]), int(df[0])


def wilson_hilferty(x, nu, mu=1):
    """Map a chi-squared value on ``nu`` df to the matching quantile on ``mu`` df.

    Works elementwise on arrays; the result is clamped at zero. For ``mu=1``
    this is ``max(0, [7/9 + sqrt(nu) * ((x/nu)**(1/3) - 1 + 2/(9 nu))]**3)``.
    """
    x = np.asarray(x, dtype=float)
    nu = np.asarray(nu, dtype=float)
    mu = np.asarray(mu, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        inner = 1.0 - 2.0 / (9.0 * mu) + np.sqrt(nu / mu) * (np.cbrt(x / nu) - 1.0 + 2.0 / (9.0 * nu))
    out = np.where(inner > 0, mu * inner**3, 0.0)
    # exact when the degrees of freedom agree at one
    out = np.where((nu == 1) & (mu == 1), np.maximum(x, 0.0), out)
    return out if out.ndim else float(out)


def chi2_quantile(p, df):
    """Lower-tail quantile of the chi-squared distribution."""
    p = np.asarray(p, dtype=float)
    if ((p < 0) | (p >= 1)).any():
        raise ValueError("p must lie in [0, 1)")
    out = np.where(p == 0, 0.0, special.chdtri(df, 1.0 - p))
    return out if out.ndim else float(out)


def chi2_sf(x, df):
    return special.chdtrc(df, np.maximum(x, 0.0))


def f_pvalue(f, df1, df2):
    """Upper-tail probability of the F distribution."""
    f = np.asarray(f, dtype=float)
    out = np.where(f <= 0, 1.0, special.fdtrc(df1, df2, np.maximum(f, 0.0)))
    return out if out.ndim else float(out)


def pvalue_to_q(p):
    """1-df chi-squared value with upper-tail probability ``p``."""
    p = np.clip(np.asarray(p, dtype=float), P_FLOOR, 1.0)
    out = np.where(p >= 1.0, 0.0, special.chdtri(1, p))
    return out if out.ndim else float(out)


@dataclass
class TreatmentModelFit:
    """Least-squares fit of ``E y = b0 + sum_z b_z I(Z = z)``: one mean per level."""

    levels: np.ndarray
    means: np.ndarray
    counts: np.ndarray
    fitted: np.ndarray
    residuals: np.ndarray
    sse: float

    @property
    def intercept(self):
        return float(self.means[0])

    @property
    def coefficients(self):
        """Offsets of each level's mean from the first (reference) level."""
        return self.means - self.means[0]


def fit_treatment_means(y, z):
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        raise ValueError("empty input")
    levels, inv = np.unique(np.asarray(z), return_inverse=True)
    counts = np.bincount(inv, minlength=len(levels))
    means = np.bincount(inv, weights=y, minlength=len(levels)) / counts
    fitted = means[inv]
    resid = y - fitted
    return TreatmentModelFit(levels, means, counts, fitted, resid, float(resid @ resid))


def lof_q_from_grid(grid, n):
    """Lack-of-fit q values from ``(variable, treatment, group, [count, sum, sumsq])`` grids.

    Each variable's additive model (treatment + group effects) is compared
    with the saturated treatment x group cell-means model by an F test; the
    p-value is mapped to a 1-df chi-squared quantile. Variables without
    residual or numerator degrees of freedom get 0.
    """
    sse_add, sse_full, cells, rank = kernels.additive_ls(grid)
    df1 = cells - rank
    df2 = n - cells
    diff = sse_add - sse_full
    scale = np.maximum(sse_add, 1e-300)
    signal = (df1 > 0) & (df2 > 0) & (diff > 1e-10 * scale)
    q = np.zeros(len(sse_add))
    if not signal.any():
        return q
    exact = signal & (sse_full <= 1e-14 * scale)
    q[exact] = pvalue_to_q(0.0)
    rest = signal & ~exact
    if rest.any():
        f = (diff[rest] / df1[rest]) / (sse_full[rest] / df2[rest])
        q[rest] = pvalue_to_q(f_pvalue(f, df1[rest], df2[rest]))
    return q


def poisson_lof_q_from_grid(grid, statistic="deviance"):
    """Lack-of-fit q values from ``(variable, treatment, group, [events, exposure])`` grids,
    using the deviance (or Pearson) statistic of the additive log-linear model."""
    dev, pearson, cells, rank = kernels.additive_poisson(grid)
    stat = dev if statistic == "deviance" else pearson
    df = cells - rank
    q = np.zeros(len(stat))
    ok = (df > 0) & (stat > 1e-10)
    one = ok & (df == 1)
    q[one] = stat[one]
    many = ok & (df > 1)
    if many.any():
        q[many] = pvalue_to_q(chi2_sf(stat[many], df[many]))
    return q


def _single_grid(z, h_codes, w):
    z = np.ascontiguousarray(z, dtype=np.int64)
    codes = np.ascontiguousarray(np.asarray(h_codes, dtype=np.int64)[:, None])
    n_trt = int(z.max()) + 1
    n_grp = int(codes.max()) + 1
    return kernels.grid_sums(codes, z, w, n_trt, n_grp)


def lack_of_fit_q(y, z, h):
    """Lack-of-fit q for one grouping ``h`` (a FactorGrouping or integer codes)."""
    codes = getattr(h, "codes", h)
    y = np.asarray(y, dtype=float)
    if len(np.unique(codes)) < 2:
        return 0.0
    _, zc = np.unique(np.asarray(z), return_inverse=True)
    yc = y - y.mean()
    grid = _single_grid(zc, codes, np.column_stack([np.ones_like(yc), yc, yc * yc]))
    return float(lof_q_from_grid(grid, len(y))[0])


def poisson_lack_of_fit_q(delta, exposure, z, h, statistic="deviance"):
    codes = getattr(h, "codes", h)
    if len(np.unique(codes)) < 2:
        return 0.0
    _, zc = np.unique(np.asarray(z), return_inverse=True)
    w = np.column_stack([np.asarray(delta, float), np.asarray(exposure, float)])
    return float(poisson_lof_q_from_grid(_single_grid(zc, codes, w), statistic)[0])
