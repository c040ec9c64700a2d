"""Hot numeric kernels.

Every kernel exists twice: a numba loop (``*_nb``) and a vectorised numpy
version (``*_np``). The public names dispatch to one of them according to
:data:`BACKEND`, which defaults to ``"numba"`` unless the JIT is disabled
through ``SUBTREE_DISABLE_JIT``. The two paths are checked against each
other in the test suite and timed against each other in ``benchmarks/``.

Split-search loss modes
-----------------------
Per-child sufficient statistics have shape ``(L, 3)``: one row per treatment
level, channels ``(count, a, b)``.

``SSE``      a = sum y, b = sum y**2; loss is the within-treatment SSE.
``POISSON``  a = events, b = cumulative-hazard exposure; loss is the Poisson
             deviance up to a term that is constant over splits of a node.
``GINI``     a = class-1 count; loss is ``n * gini``.
"""
from contextlib import contextmanager

import numpy as np

from ._jit import HAVE_NUMBA, njit

SSE, POISSON, GINI = 0, 1, 2

BACKEND = "numba" if HAVE_NUMBA else "numpy"


@contextmanager
def use_backend(name):
    """Temporarily route the public kernels to ``name``."""
    global BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is disabled or unavailable")
    old, BACKEND = BACKEND, name
    try:
        yield
    finally:
        BACKEND = old


# ---------------------------------------------------------------------------
# contingency tables


@njit
def crosstab_nb(codes, z, cls, n_trt, n_cls, n_grp):
    n, m = codes.shape
    out = np.zeros((m, n_trt, n_cls, n_grp), dtype=np.int64)
    for i in range(n):
        zi = z[i]
        ci = cls[i]
        for j in range(m):
            out[j, zi, ci, codes[i, j]] += 1
    return out


def crosstab_np(codes, z, cls, n_trt, n_cls, n_grp):
    n, m = codes.shape
    base = (z * n_cls + cls) * n_grp
    idx = (np.arange(m)[None, :] * (n_trt * n_cls * n_grp) + base[:, None] + codes).ravel()
    out = np.bincount(idx, minlength=m * n_trt * n_cls * n_grp)
    return out.reshape(m, n_trt, n_cls, n_grp).astype(np.int64)


@njit
def chi2_tables_nb(tables, correct):
    k, nr, nc = tables.shape
    stat = np.zeros(k)
    df = np.zeros(k, dtype=np.int64)
    rs = np.empty(nr)
    cs = np.empty(nc)
    for t in range(k):
        tot = 0.0
        for a in range(nr):
            rs[a] = 0.0
        for b in range(nc):
            cs[b] = 0.0
        for a in range(nr):
            for b in range(nc):
                v = tables[t, a, b]
                rs[a] += v
                cs[b] += v
                tot += v
        r = 0
        for a in range(nr):
            if rs[a] > 0:
                r += 1
        c = 0
        for b in range(nc):
            if cs[b] > 0:
                c += 1
        if r < 2 or c < 2:
            continue
        yates = correct and r == 2 and c == 2
        s = 0.0
        for a in range(nr):
            if rs[a] == 0:
                continue
            for b in range(nc):
                if cs[b] == 0:
                    continue
                e = rs[a] * cs[b] / tot
                d = abs(tables[t, a, b] - e)
                if yates:
                    d = max(d - 0.5, 0.0)
                s += d * d / e
        stat[t] = s
        df[t] = (r - 1) * (c - 1)
    return stat, df


def chi2_tables_np(tables, correct=True):
    tables = np.asarray(tables, dtype=float)
    rs = tables.sum(axis=2)
    cs = tables.sum(axis=1)
    tot = rs.sum(axis=1)
    r = (rs > 0).sum(axis=1)
    c = (cs > 0).sum(axis=1)
    ok = (r >= 2) & (c >= 2)
    safe_tot = np.where(tot > 0, tot, 1.0)
    e = rs[:, :, None] * cs[:, None, :] / safe_tot[:, None, None]
    d = np.abs(tables - e)
    yates = ok & (r == 2) & (c == 2) & bool(correct)
    d = np.where(yates[:, None, None], np.maximum(d - 0.5, 0.0), d)
    with np.errstate(divide="ignore", invalid="ignore"):
        cell = np.where(e > 0, d * d / e, 0.0)
    stat = np.where(ok, cell.sum(axis=(1, 2)), 0.0)
    df = np.where(ok, (r - 1) * (c - 1), 0).astype(np.int64)
    return stat, df


# ---------------------------------------------------------------------------
# treatment x group grids and additive (no-interaction) fits


@njit
def grid_sums_nb(codes, z, w, n_trt, n_grp):
    n, m = codes.shape
    k = w.shape[1]
    out = np.zeros((m, n_trt, n_grp, k))
    for i in range(n):
        zi = z[i]
        for j in range(m):
            g = codes[i, j]
            for c in range(k):
                out[j, zi, g, c] += w[i, c]
    return out


def grid_sums_np(codes, z, w, n_trt, n_grp):
    n, m = codes.shape
    k = w.shape[1]
    idx = (np.arange(m)[None, :] * (n_trt * n_grp) + (z * n_grp)[:, None] + codes).ravel()
    size = m * n_trt * n_grp
    out = np.empty((size, k))
    for c in range(k):
        out[:, c] = np.bincount(idx, weights=np.repeat(w[:, c], m), minlength=size)
    return out.reshape(m, n_trt, n_grp, k)


@njit
def _find(parent, a):
    while parent[a] != a:
        parent[a] = parent[parent[a]]
        a = parent[a]
    return a


@njit
def _bipartite_rank(occupied):
    # rank of the additive (row effect + column effect) design restricted to
    # the occupied cells = rows + columns - connected components
    nr, nc = occupied.shape
    parent = np.arange(nr + nc)
    used = np.zeros(nr + nc, dtype=np.bool_)
    for a in range(nr):
        for b in range(nc):
            if occupied[a, b]:
                used[a] = True
                used[nr + b] = True
                ra = _find(parent, a)
                rb = _find(parent, nr + b)
                if ra != rb:
                    parent[ra] = rb
    nodes = 0
    comps = 0
    for v in range(nr + nc):
        if used[v]:
            nodes += 1
            if _find(parent, v) == v:
                comps += 1
    return nodes - comps


@njit
def additive_ls_nb(grid):
    """Weighted least squares of cell means on row + column effects.

    ``grid[m, z, h] = (count, sum, sumsq)``. Returns, per variable, the SSE of
    the additive model, the SSE of the saturated cell-means model, the number
    of occupied cells and the rank of the additive design.
    """
    m, nr, nc, _ = grid.shape
    sse_add = np.zeros(m)
    sse_full = np.zeros(m)
    cells = np.zeros(m, dtype=np.int64)
    rank = np.zeros(m, dtype=np.int64)
    for j in range(m):
        cnt = grid[j, :, :, 0]
        sm = grid[j, :, :, 1]
        sq = grid[j, :, :, 2]
        occ = cnt > 0
        within = 0.0
        ncell = 0
        for a in range(nr):
            for b in range(nc):
                if occ[a, b]:
                    within += sq[a, b] - sm[a, b] ** 2 / cnt[a, b]
                    ncell += 1
        sse_full[j] = max(within, 0.0)
        cells[j] = ncell
        rank[j] = _bipartite_rank(occ)
        # eliminate row effects; solve the reduced column-effect system
        nrow = cnt.sum(axis=1)
        srow = sm.sum(axis=1)
        cmat = np.zeros((nc, nc))
        rhs = np.zeros(nc)
        for b in range(nc):
            cmat[b, b] += cnt[:, b].sum()
            rhs[b] += sm[:, b].sum()
        for a in range(nr):
            if nrow[a] <= 0:
                continue
            for b in range(nc):
                rhs[b] -= cnt[a, b] * srow[a] / nrow[a]
                for bb in range(nc):
                    cmat[b, bb] -= cnt[a, b] * cnt[a, bb] / nrow[a]
        colfx = np.linalg.lstsq(cmat, rhs, 1e-10)[0]
        between = 0.0
        for a in range(nr):
            if nrow[a] <= 0:
                continue
            rowfx = srow[a]
            for b in range(nc):
                rowfx -= cnt[a, b] * colfx[b]
            rowfx /= nrow[a]
            for b in range(nc):
                if occ[a, b]:
                    mean = sm[a, b] / cnt[a, b]
                    between += cnt[a, b] * (mean - rowfx - colfx[b]) ** 2
        sse_add[j] = sse_full[j] + between
    return sse_add, sse_full, cells, rank


def additive_ls_np(grid):
    m, nr, nc, _ = grid.shape
    sse_add = np.zeros(m)
    sse_full = np.zeros(m)
    cells = np.zeros(m, dtype=np.int64)
    rank = np.zeros(m, dtype=np.int64)
    zi, hi = np.meshgrid(np.arange(nr), np.arange(nc), indexing="ij")
    for j in range(m):
        cnt, sm, sq = grid[j, :, :, 0], grid[j, :, :, 1], grid[j, :, :, 2]
        occ = cnt > 0
        n = cnt[occ]
        mean = sm[occ] / n
        sse_full[j] = max(float(np.sum(sq[occ] - sm[occ] * mean)), 0.0)
        cells[j] = occ.sum()
        design = np.hstack([np.eye(nr)[zi[occ]], np.eye(nc)[hi[occ]]])
        sw = np.sqrt(n)
        coef, _, rk, _ = np.linalg.lstsq(design * sw[:, None], mean * sw, rcond=None)
        rank[j] = rk
        sse_add[j] = sse_full[j] + float(np.sum(n * (mean - design @ coef) ** 2))
    return sse_add, sse_full, cells, rank


@njit
def additive_poisson_nb(grid, max_iter, tol):
    """Poisson log-linear fit of events on row + column effects with exposure.

    ``grid[m, z, h] = (events, exposure)``. Fitted by iterative proportional
    fitting of the two margins. Returns deviance and Pearson statistics of
    the additive fit against the saturated cell model, the number of occupied
    (positive-exposure) cells and the rank of the additive design.
    """
    m, nr, nc, _ = grid.shape
    dev = np.zeros(m)
    pearson = np.zeros(m)
    cells = np.zeros(m, dtype=np.int64)
    rank = np.zeros(m, dtype=np.int64)
    for j in range(m):
        d = grid[j, :, :, 0]
        e = grid[j, :, :, 1]
        occ = e > 0
        cells[j] = occ.sum()
        rank[j] = _bipartite_rank(occ)
        drow = d.sum(axis=1)
        dcol = d.sum(axis=0)
        ra = np.ones(nr)
        cb = np.ones(nc)
        for _ in range(max_iter):
            for a in range(nr):
                den = 0.0
                for b in range(nc):
                    den += e[a, b] * cb[b]
                ra[a] = drow[a] / den if den > 0 else 0.0
            change = 0.0
            for b in range(nc):
                den = 0.0
                for a in range(nr):
                    den += e[a, b] * ra[a]
                new = dcol[b] / den if den > 0 else 0.0
                change = max(change, abs(new - cb[b]) / max(new, 1e-300))
                cb[b] = new
            if change < tol:
                break
        g2 = 0.0
        x2 = 0.0
        for a in range(nr):
            for b in range(nc):
                if not occ[a, b]:
                    continue
                mu = e[a, b] * ra[a] * cb[b]
                if d[a, b] > 0:
                    g2 += 2.0 * (d[a, b] * np.log(d[a, b] / mu) - (d[a, b] - mu))
                else:
                    g2 += 2.0 * mu
                if mu > 0:
                    x2 += (d[a, b] - mu) ** 2 / mu
        dev[j] = max(g2, 0.0)
        pearson[j] = x2
    return dev, pearson, cells, rank


def additive_poisson_np(grid, max_iter=100, tol=1e-12):
    m, nr, nc, _ = grid.shape
    dev = np.zeros(m)
    pearson = np.zeros(m)
    cells = np.zeros(m, dtype=np.int64)
    rank = np.zeros(m, dtype=np.int64)
    zi, hi = np.meshgrid(np.arange(nr), np.arange(nc), indexing="ij")
    for j in range(m):
        d, e = grid[j, :, :, 0], grid[j, :, :, 1]
        occ = e > 0
        cells[j] = occ.sum()
        # drop effects whose margin has no events; their cells fit mu = 0
        rows_live = d.sum(axis=1) > 0
        cols_live = d.sum(axis=0) > 0
        live = occ & rows_live[:, None] & cols_live[None, :]
        design_all = np.hstack([np.eye(nr)[zi[occ]], np.eye(nc)[hi[occ]]])
        rank[j] = np.linalg.matrix_rank(design_all) if occ.any() else 0
        mu = np.zeros_like(e)
        if live.any():
            x = np.hstack([np.eye(nr)[zi[live]], np.eye(nc)[hi[live]]])
            y, off = d[live], np.log(e[live])
            beta = np.linalg.lstsq(x, np.log(np.maximum(y, 0.5)) - off, rcond=None)[0]
            for _ in range(max_iter):
                eta = x @ beta + off
                w = np.exp(eta)
                work = eta - off + (y - w) / w
                sw = np.sqrt(w)
                new = np.linalg.lstsq(x * sw[:, None], work * sw, rcond=None)[0]
                if np.max(np.abs(x @ (new - beta))) < tol:
                    beta = new
                    break
                beta = new
            mu[live] = np.exp(x @ beta + off)
        dd, mm = d[occ], mu[occ]
        with np.errstate(divide="ignore", invalid="ignore"):
            term = np.where(dd > 0, dd * np.log(dd / np.where(mm > 0, mm, 1.0)), 0.0)
            x2 = np.where(mm > 0, (dd - mm) ** 2 / np.where(mm > 0, mm, 1.0), 0.0)
        dev[j] = max(2.0 * float(np.sum(term - (dd - mm))), 0.0)
        pearson[j] = float(np.sum(x2))
    return dev, pearson, cells, rank


# ---------------------------------------------------------------------------
# split search


@njit
def _loss_nb(st, mode):
    L = st.shape[0]
    tot = 0.0
    if mode == 0:
        for z in range(L):
            if st[z, 0] > 0:
                tot += st[z, 2] - st[z, 1] * st[z, 1] / st[z, 0]
        return max(tot, 0.0)
    if mode == 1:
        for z in range(L):
            if st[z, 1] > 0 and st[z, 2] > 0:
                tot -= 2.0 * st[z, 1] * np.log(st[z, 1] / st[z, 2])
        return tot
    n = 0.0
    c1 = 0.0
    for z in range(L):
        n += st[z, 0]
        c1 += st[z, 1]
    if n <= 0:
        return 0.0
    p = c1 / n
    return n * 2.0 * p * (1.0 - p)


@njit
def _admissible_nb(st, present, min_node, min_trt, forbid_pure):
    L = st.shape[0]
    n = 0.0
    c1 = 0.0
    for z in range(L):
        n += st[z, 0]
        c1 += st[z, 1]
        if present[z] and st[z, 0] < min_trt:
            return False
    if n < min_node:
        return False
    if forbid_pure and (c1 <= 0 or c1 >= n):
        return False
    return True


@njit
def scan_ordinal_nb(stats, boundary, miss, mode, min_node, min_trt, present, forbid_pure):
    """Best threshold over rows sorted by the split variable.

    ``stats`` has shape (n, L, 3) in sorted order; ``boundary[i]`` is true when
    rows i and i+1 differ in value. ``miss`` aggregates rows with the variable
    missing. Variant 0 sends missing rows right, variant 1 left; variant 0 also
    tries the {non-missing} vs {missing} partition. Returns
    ``(loss, position, variant, n_candidates)``; position -1 means no
    admissible split.
    """
    n, L, K = stats.shape
    has_miss = miss[:, 0].sum() > 0
    total = miss.copy()
    for i in range(n):
        for z in range(L):
            for k in range(K):
                total[z, k] += stats[i, z, k]
    best = np.inf
    best_pos = -1
    best_var = 0
    ncand = 0
    nvar = 2 if has_miss else 1
    left = np.empty((L, K))
    right = np.empty((L, K))
    for var in range(nvar):
        cum = np.zeros((L, K))
        for i in range(n):
            for z in range(L):
                for k in range(K):
                    cum[z, k] += stats[i, z, k]
            if i < n - 1:
                if not boundary[i]:
                    continue
            elif not (var == 0 and has_miss):
                continue
            ncand += 1
            for z in range(L):
                for k in range(K):
                    left[z, k] = cum[z, k] + (miss[z, k] if var == 1 else 0.0)
                    right[z, k] = total[z, k] - left[z, k]
            if not _admissible_nb(left, present, min_node, min_trt, forbid_pure):
                continue
            if not _admissible_nb(right, present, min_node, min_trt, forbid_pure):
                continue
            loss = _loss_nb(left, mode) + _loss_nb(right, mode)
            if loss < best:
                best = loss
                best_pos = i
                best_var = var
    return best, best_pos, best_var, ncand


def _loss_np(st, mode):
    cnt, a, b = st[..., 0], st[..., 1], st[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        if mode == SSE:
            per = np.where(cnt > 0, b - a * a / np.where(cnt > 0, cnt, 1.0), 0.0)
            return np.maximum(per.sum(axis=-1), 0.0)
        if mode == POISSON:
            ok = (a > 0) & (b > 0)
            per = np.where(ok, a * np.log(np.where(ok, a / np.where(ok, b, 1.0), 1.0)), 0.0)
            return -2.0 * per.sum(axis=-1)
        n = cnt.sum(axis=-1)
        p = np.where(n > 0, a.sum(axis=-1) / np.where(n > 0, n, 1.0), 0.0)
        return n * 2.0 * p * (1.0 - p)


def _admissible_np(st, present, min_node, min_trt, forbid_pure):
    cnt = st[..., 0]
    n = cnt.sum(axis=-1)
    ok = n >= min_node
    ok &= np.all((cnt >= min_trt) | ~present, axis=-1)
    if forbid_pure:
        c1 = st[..., 1].sum(axis=-1)
        ok &= (c1 > 0) & (c1 < n)
    return ok


def scan_ordinal_np(stats, boundary, miss, mode, min_node, min_trt, present, forbid_pure):
    n = stats.shape[0]
    has_miss = miss[:, 0].sum() > 0
    cum = np.cumsum(stats, axis=0)
    total = cum[-1] + miss
    pos = np.flatnonzero(boundary[: n - 1])
    pos0 = np.append(pos, n - 1) if has_miss else pos
    lefts = [cum[pos0]]
    tags = [(0, pos0)]
    if has_miss:
        lefts.append(cum[pos] + miss)
        tags.append((1, pos))
    left = np.concatenate(lefts, axis=0)
    ncand = left.shape[0]
    if ncand == 0:
        return np.inf, -1, 0, 0
    right = total[None] - left
    ok = _admissible_np(left, present, min_node, min_trt, forbid_pure)
    ok &= _admissible_np(right, present, min_node, min_trt, forbid_pure)
    if not ok.any():
        return np.inf, -1, 0, ncand
    loss = np.where(ok, _loss_np(left, mode) + _loss_np(right, mode), np.inf)
    k = int(np.argmin(loss))
    var, p = (0, pos0[k]) if k < len(pos0) else (1, pos[k - len(pos0)])
    return float(loss[k]), int(p), var, ncand


@njit
def search_subsets_nb(level_stats, mode, min_node, min_trt, present, forbid_pure):
    """Exhaustive search over the 2**(g-1) - 1 two-way partitions of g levels.

    Bit j of the returned mask puts level j on the left; the last level is
    always on the right. Returns ``(loss, mask, n_candidates)``.
    """
    g, L, K = level_stats.shape
    total = np.zeros((L, K))
    for j in range(g):
        for z in range(L):
            for k in range(K):
                total[z, k] += level_stats[j, z, k]
    best = np.inf
    best_mask = -1
    nmask = (1 << (g - 1)) - 1
    left = np.empty((L, K))
    right = np.empty((L, K))
    for mask in range(1, nmask + 1):
        for z in range(L):
            for k in range(K):
                left[z, k] = 0.0
        for j in range(g - 1):
            if (mask >> j) & 1:
                for z in range(L):
                    for k in range(K):
                        left[z, k] += level_stats[j, z, k]
        for z in range(L):
            for k in range(K):
                right[z, k] = total[z, k] - left[z, k]
        if not _admissible_nb(left, present, min_node, min_trt, forbid_pure):
            continue
        if not _admissible_nb(right, present, min_node, min_trt, forbid_pure):
            continue
        loss = _loss_nb(left, mode) + _loss_nb(right, mode)
        if loss < best:
            best = loss
            best_mask = mask
    return best, best_mask, nmask


def search_subsets_np(level_stats, mode, min_node, min_trt, present, forbid_pure):
    g = level_stats.shape[0]
    nmask = (1 << (g - 1)) - 1
    if nmask == 0:
        return np.inf, -1, 0
    masks = np.arange(1, nmask + 1)
    bits = ((masks[:, None] >> np.arange(g)[None, :]) & 1).astype(float)
    left = np.tensordot(bits, level_stats, axes=(1, 0))
    right = level_stats.sum(axis=0)[None] - left
    ok = _admissible_np(left, present, min_node, min_trt, forbid_pure)
    ok &= _admissible_np(right, present, min_node, min_trt, forbid_pure)
    if not ok.any():
        return np.inf, -1, nmask
    loss = np.where(ok, _loss_np(left, mode) + _loss_np(right, mode), np.inf)
    k = int(np.argmin(loss))
    return float(loss[k]), int(masks[k]), nmask


# ---------------------------------------------------------------------------
# dispatch

_IMPL = {
    "numba": {
        "crosstab": crosstab_nb,
        "chi2_tables": chi2_tables_nb,
        "grid_sums": grid_sums_nb,
        "additive_ls": additive_ls_nb,
        "additive_poisson": additive_poisson_nb,
        "scan_ordinal": scan_ordinal_nb,
        "search_subsets": search_subsets_nb,
    },
    "numpy": {
        "crosstab": crosstab_np,
        "chi2_tables": chi2_tables_np,
        "grid_sums": grid_sums_np,
        "additive_ls": additive_ls_np,
        "additive_poisson": additive_poisson_np,
        "scan_ordinal": scan_ordinal_np,
        "search_subsets": search_subsets_np,
    },
}


def crosstab(codes, z, cls, n_trt, n_cls, n_grp):
    """Counts ``[variable, treatment, class, group]`` for a block of coded variables."""
    return _IMPL[BACKEND]["crosstab"](codes, z, cls, n_trt, n_cls, n_grp)


def chi2_tables(tables, yates=True):
    """Pearson statistics and df for a stack of two-way tables.

    Empty rows and columns are dropped; with ``yates`` the continuity
    correction is applied to tables that are 2 x 2 after dropping.
    """
    return _IMPL[BACKEND]["chi2_tables"](np.ascontiguousarray(tables, dtype=float), bool(yates))


def grid_sums(codes, z, w, n_trt, n_grp):
    """Sums of the columns of ``w`` over ``[variable, treatment, group]`` cells."""
    return _IMPL[BACKEND]["grid_sums"](codes, z, np.ascontiguousarray(w, dtype=float), n_trt, n_grp)


def additive_ls(grid):
    return _IMPL[BACKEND]["additive_ls"](np.ascontiguousarray(grid, dtype=float))


def additive_poisson(grid):
    grid = np.ascontiguousarray(grid, dtype=float)
    if BACKEND == "numba":
        return additive_poisson_nb(grid, 2000, 1e-12)
    return additive_poisson_np(grid)


def scan_ordinal(stats, boundary, miss, mode, min_node, min_trt, present, forbid_pure=False):
    return _IMPL[BACKEND]["scan_ordinal"](
        np.ascontiguousarray(stats, dtype=float),
        np.ascontiguousarray(boundary, dtype=np.bool_),
        np.ascontiguousarray(miss, dtype=float),
        mode,
        float(min_node),
        float(min_trt),
        np.ascontiguousarray(present, dtype=np.bool_),
        bool(forbid_pure),
    )


def search_subsets(level_stats, mode, min_node, min_trt, present, forbid_pure=False):
    return _IMPL[BACKEND]["search_subsets"](
        np.ascontiguousarray(level_stats, dtype=float),
        mode,
        float(min_node),
        float(min_trt),
        np.ascontiguousarray(present, dtype=np.bool_),
        bool(forbid_pure),
    )
