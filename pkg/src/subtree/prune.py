"""Cost-complexity pruning with V-fold cross-validation.

The loss of a leaf is its resubstitution loss under the node model: the
treatment-means SSE for least squares, the Poisson deviance for censored
responses, and the misclassification count for Gc. The weakest-link sequence
of the grown tree is computed, a tree is grown on each training fold, and the
held-out loss is evaluated on the fold trees pruned at the geometric
midpoints of the sequence. The smallest tree whose cross-validated loss is
within ``se_rule`` standard errors of the minimum is kept.
"""
from __future__ import annotations

import dataclasses

import numpy as np

_EPS = 1e-9


def _index(root):
    """id -> node for a tree."""
    out = {}
    stack = [root]
    while stack:
        nd = stack.pop()
        out[nd.id] = nd
        if not nd.is_leaf:
            stack.extend((nd.left, nd.right))
    return out


def cost_complexity_path(root):
    """Weakest-link sequence ``[(alpha_k, kept_internal_ids_k), ...]``.

    ``alpha_0 = 0`` with the full tree; each later entry collapses every node
    whose link strength equals the current minimum. The last entry is the
    root alone (empty kept set).
    """
    nodes = _index(root)
    kept = {i for i, nd in nodes.items() if not nd.is_leaf}
    path = [(0.0, frozenset(kept))]
    while kept:
        # subtree loss and leaf count under the current pruning
        risk, leaves = {}, {}

        def visit(i):
            nd = nodes[i]
            if i not in kept:
                risk[i], leaves[i] = nd.loss, 1
                return
            visit(2 * i)
            visit(2 * i + 1)
            risk[i] = risk[2 * i] + risk[2 * i + 1]
            leaves[i] = leaves[2 * i] + leaves[2 * i + 1]

        visit(1)
        g = {i: (nodes[i].loss - risk[i]) / (leaves[i] - 1) for i in kept}
        alpha = max(min(g.values()), 0.0)
        weakest = {i for i, v in g.items() if v <= alpha + _EPS * max(1.0, abs(alpha))}
        # collapsing a node removes its whole subtree
        drop = set()
        for i in weakest:
            drop.update(j for j in kept if _is_descendant_or_self(j, i))
        kept -= drop
        path.append((alpha, frozenset(kept)))
    return path


def _is_descendant_or_self(j, i):
    while j > i:
        j >>= 1
    return j == i


def pruned_copy(root, kept):
    """Copy of the tree in which internal nodes not in ``kept`` become leaves."""

    def copy(nd):
        if nd.is_leaf or nd.id not in kept:
            return dataclasses.replace(nd, split=None, left=None, right=None)
        return dataclasses.replace(nd, left=copy(nd.left), right=copy(nd.right))

    return copy(root)


def _kept_at(path, alpha):
    chosen = path[0][1]
    for a, kept in path:
        if a <= alpha + _EPS * max(1.0, abs(alpha)):
            chosen = kept
        else:
            break
    return chosen


def _full_leaf_ids(problem, root, rows):
    cols = {c.name: c for c in problem.dataset.predictors}
    out = np.empty(len(rows), dtype=np.int64)

    def route(nd, idx):
        if nd.is_leaf:
            out[idx] = nd.id
            return
        go = nd.split.route(cols[nd.split.variable])[rows[idx]]
        route(nd.left, idx[go])
        route(nd.right, idx[~go])

    route(root, np.arange(len(rows)))
    return out


def _leaf_under(leaf, kept):
    """Deepest ancestor of ``leaf`` (inclusive) that is a leaf once only ``kept`` nodes split."""
    depth_leaf = leaf.bit_length() - 1
    a = 1
    while a in kept:
        d = a.bit_length() - 1
        a = leaf >> (depth_leaf - d - 1)
    return a


def heldout_losses(problem, node, rows):
    """Per-row loss of the held-out ``rows`` under ``node``'s model."""
    z = problem.z[rows]
    if problem.kind == "ls":
        means = node.means
        pooled = np.nansum(means * node.counts) / max(node.counts.sum(), 1)
        m = np.where(node.counts > 0, np.nan_to_num(means), pooled)
        return (problem.y[rows] - m[z]) ** 2
    if problem.kind == "class":
        return (problem.v[rows] != node.majority).astype(float)
    ev, ex = node.events, node.exposure
    pooled = ev.sum() / ex.sum() if ex.sum() > 0 else 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        rate = np.where((ex > 0) & (ev > 0), ev / ex, pooled)
    if pooled <= 0:
        rate = np.full_like(rate, problem.reference_floor)
    rate = np.maximum(rate, problem.reference_floor)
    d = problem.delta[rows]
    mu = problem.exposure[rows] * rate[z]
    from .tree import poisson_deviance

    return poisson_deviance(d, mu)


def cv_prune(problem, root, config, min_node):
    """Prune ``root`` by V-fold cross-validation; returns the pruned copy."""
    from .tree import grow_structure

    path = cost_complexity_path(root)
    if len(path) <= 1:
        return root
    alphas = [a for a, _ in path]
    # evaluation points between consecutive alphas
    betas = [np.sqrt(max(alphas[k], 0.0) * alphas[k + 1]) for k in range(len(alphas) - 1)]
    betas.append(np.inf)

    n = problem.dataset.n_rows
    V = min(config.cv_folds, n)
    rng = np.random.default_rng(config.seed)
    fold = np.empty(n, dtype=np.int64)
    fold[rng.permutation(n)] = np.arange(n) % V
    if problem.kind == "poisson":
        total = problem.exposure.sum()
        problem.reference_floor = 1e-3 * problem.delta.sum() / total if total > 0 else 1e-12
    losses = np.zeros((len(betas), n))
    for v in range(V):
        train = np.flatnonzero(fold != v)
        test = np.flatnonzero(fold == v)
        if len(test) == 0:
            continue
        ftree = grow_structure(problem, train, config, min_node)
        fnodes = _index(ftree)
        fpath = cost_complexity_path(ftree)
        full_leaf = _full_leaf_ids(problem, ftree, test)
        uniq, inv = np.unique(full_leaf, return_inverse=True)
        for k, beta in enumerate(betas):
            kept = _kept_at(fpath, beta) if np.isfinite(beta) else frozenset()
            for u_i, leaf in enumerate(uniq):
                sel = inv == u_i
                nd = fnodes[_leaf_under(int(leaf), kept)]
                losses[k, test[sel]] = heldout_losses(problem, nd, test[sel])
    cv = losses.sum(axis=1)
    best = int(np.argmin(cv))
    se = np.sqrt(n) * losses[best].std(ddof=1) if n > 1 else 0.0
    limit = cv[best] + config.se_rule * se
    choice = max(k for k in range(len(cv)) if cv[k] <= limit + _EPS * max(1.0, abs(limit)))
    return pruned_copy(root, path[choice][1])
