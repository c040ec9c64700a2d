"""Recursive growth, routing, per-node estimates, serialization and reports."""
from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .dataset import DataError, Role
from .splitcore import METHODS, Problem, SplitRule, find_split_point, rank_scores, score_variables
from .stats import chi2_quantile

FORMAT = "subtree-model"
VERSION = 1


@dataclass
class TreeConfig:
    """Growth, stopping and pruning settings.

    ``min_node_size`` of None means ``max(10, ceil(n / 100))``. ``gate``
    stops a node whose best q(X) does not exceed the 1-df chi-squared
    ``gate_level`` quantile. ``prune`` turns on cost-complexity pruning by
    ``cv_folds``-fold cross-validation with the ``se_rule`` standard-error
    rule. ``iterations`` and ``lof_statistic`` apply to censored responses.
    ``yates`` turns on the continuity correction in the selection tests;
    it is off because it deflates the 2 x 2 tables of ordinal predictors
    and so biases selection toward categorical ones.
    """

    method: str = "gi"
    min_node_size: int | None = None
    min_treatment_size: int = 2
    max_depth: int = 4
    gate: bool = False
    gate_level: float = 0.95
    prune: bool = True
    cv_folds: int = 10
    se_rule: float = 0.5
    seed: int = 0
    iterations: int = 5
    lof_statistic: str = "deviance"
    yates: bool = False

    def __post_init__(self):
        self.method = self.method.lower()
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.min_node_size is not None and self.min_node_size < 1:
            raise ValueError("min_node_size must be >= 1")
        if self.cv_folds < 2:
            raise ValueError("cv_folds must be >= 2")
        if self.lof_statistic not in ("deviance", "pearson"):
            raise ValueError("lof_statistic must be 'deviance' or 'pearson'")

    def resolved_min_node(self, n):
        if self.min_node_size is not None:
            return int(self.min_node_size)
        return int(max(10, math.ceil(n / 100)))

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(eq=False)
class Node:
    """A node with its per-treatment estimates.

    Uncensored: ``counts``, ``means``, ``sds`` per treatment level. Censored:
    additionally ``events`` and ``exposure`` (summed cumulative baseline
    hazard), whose ratio is the treatment's event rate relative to baseline.
    ``scores`` holds q(X) for every predictor when variable selection ran
    here; ``loss`` is the node's resubstitution loss as a leaf.
    """

    id: int
    depth: int
    n: int
    counts: np.ndarray
    means: np.ndarray | None = None
    sds: np.ndarray | None = None
    events: np.ndarray | None = None
    exposure: np.ndarray | None = None
    loss: float = 0.0
    split: SplitRule | None = None
    left: Node | None = None
    right: Node | None = None
    scores: np.ndarray | None = None
    rows: np.ndarray | None = field(default=None, repr=False)
    majority: int | None = None

    @property
    def is_leaf(self):
        return self.split is None

    def walk(self):
        """Nodes in level order."""
        queue = [self]
        while queue:
            nxt = []
            for node in queue:
                yield node
                if not node.is_leaf:
                    nxt.extend((node.left, node.right))
            queue = nxt

    def leaves(self):
        return [nd for nd in self.walk() if nd.is_leaf]

    @property
    def rates(self):
        if self.events is None:
            return None
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.exposure > 0, self.events / self.exposure, np.nan)

    @property
    def log_relative_risk(self):
        """log(rate_z / rate_reference) for each non-reference level (censored)."""
        r = self.rates
        if r is None:
            return None
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(r[1:] / r[0])

    @property
    def effect(self):
        """Treatment effect: mean difference (uncensored) or log relative risk (censored), level 1 vs 0."""
        if self.events is not None:
            return float(self.log_relative_risk[0])
        if self.counts[0] == 0 or self.counts[1] == 0:
            return float("nan")
        return float(self.means[1] - self.means[0])


@dataclass(eq=False)
class TreeModel:
    root: Node
    method: str
    response_kind: str
    config: TreeConfig
    response: str
    treatment: str
    treatment_levels: tuple
    predictors: list
    n_train: int
    event: str | None = None
    hazard: object = None
    reference_rate: float | None = None
    history: list = field(default_factory=list)
    binary_response: bool = False

    @property
    def censored(self):
        return self.response_kind == "censored"

    def nodes(self):
        return list(self.root.walk())

    def leaves(self):
        return self.root.leaves()

    def node(self, node_id):
        for nd in self.root.walk():
            if nd.id == node_id:
                return nd
        raise KeyError(node_id)

    @property
    def trivial(self):
        return self.root.is_leaf

    @property
    def depth(self):
        return max(nd.depth for nd in self.root.walk())

    def apply(self, data):
        """Leaf id of each row. ``data`` is a Dataset or a mapping name -> Column."""
        cols = _column_map(data)
        n = len(next(iter(cols.values())).values) if cols else 0
        out = np.empty(n, dtype=np.int64)
        self._route(self.root, np.arange(n), cols, out)
        return out

    def _route(self, node, idx, cols, out):
        if node.is_leaf:
            out[idx] = node.id
            return
        name = node.split.variable
        if name not in cols:
            raise DataError(f"split variable {name!r} missing from data")
        go = node.split.route(cols[name])[idx]
        self._route(node.left, idx[go], cols, out)
        self._route(node.right, idx[~go], cols, out)

    def predict_node(self, row):
        """Leaf reached by one case given as ``{name: value}`` (None = missing)."""
        node = self.root
        while not node.is_leaf:
            value = row.get(node.split.variable)
            node = node.left if node.split.goes_left(value) else node.right
        return node

    def intermediate_nodes(self):
        return [nd for nd in self.root.walk() if not nd.is_leaf]


def _column_map(data):
    if isinstance(data, dict):
        return data
    return {c.name: c for c in data.columns}


# ---------------------------------------------------------------------------
# growth


def check_roles(dataset, method):
    if method == "gc":
        if dataset.censored:
            raise DataError("Gc needs an uncensored binary response")
        if dataset.n_treatments != 2:
            raise DataError(f"Gc needs a binary treatment; {dataset.treatment.name!r} has {dataset.n_treatments} levels")
        if not np.isin(dataset.y, (0.0, 1.0)).all():
            raise DataError(f"Gc needs a 0/1 response; column {dataset.response.name!r} is not binary")
    if not dataset.predictors:
        raise DataError("no predictor columns")


def node_estimates(problem, rows, node_id, depth):
    z = problem.z[rows]
    L = problem.n_trt
    counts = np.bincount(z, minlength=L)
    node = Node(node_id, depth, len(rows), counts, rows=rows)
    if problem.kind == "class":
        y = problem.dataset.y[rows]
    elif problem.kind == "ls":
        y = problem.y[rows]
    else:
        y = None
    if y is not None:
        with np.errstate(divide="ignore", invalid="ignore"):
            sums = np.bincount(z, weights=y, minlength=L)
            means = np.where(counts > 0, sums / counts, np.nan)
            dev2 = np.bincount(z, weights=(y - np.where(counts > 0, means, 0.0)[z]) ** 2, minlength=L)
            node.sds = np.where(counts > 1, np.sqrt(dev2 / np.maximum(counts - 1, 1)), np.nan)
        node.means = means
    if problem.kind == "ls":
        node.loss = float(dev2.sum())
    elif problem.kind == "class":
        v = problem.v[rows]
        ones = int(v.sum())
        node.majority = int(ones * 2 > len(v))
        node.loss = float(min(ones, len(v) - ones))
    else:
        d = problem.delta[rows]
        e = problem.exposure[rows]
        node.events = np.bincount(z, weights=d, minlength=L)
        node.exposure = np.bincount(z, weights=e, minlength=L)
        rate = np.where(node.exposure > 0, node.events / np.where(node.exposure > 0, node.exposure, 1.0), 0.0)
        node.loss = float(poisson_deviance(d, e * rate[z]).sum())
    return node


def poisson_deviance(d, mu):
    """Per-observation Poisson deviance contributions."""
    d = np.asarray(d, dtype=float)
    mu = np.asarray(mu, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(d > 0, d * np.log(d / mu), 0.0)
    return 2.0 * (term - (d - mu))


def grow_structure(problem, rows, config, min_node, node_id=1, depth=0):
    """Grow an unpruned tree on ``rows`` depth-first; ids are 2t / 2t+1."""
    node = node_estimates(problem, rows, node_id, depth)
    if depth >= config.max_depth or len(rows) < 2 * min_node:
        return node
    if problem.kind == "class":
        if node.loss == 0:
            return node
    elif (node.counts > 0).sum() < 2:
        return node
    q, r, degen = score_variables(problem, rows, config.method)
    node.scores = q
    ranking = rank_scores(problem, q, r, degen)
    if not ranking:
        return node
    best = ranking[0]
    if config.gate and not best.q > chi2_quantile(config.gate_level, 1):
        return node
    found = find_split_point(problem, rows, best.index, min_node, config.min_treatment_size)
    if found.rule is None:
        return node
    node.split = found.rule
    node.left = grow_structure(problem, rows[found.left], config, min_node, 2 * node_id, depth + 1)
    node.right = grow_structure(problem, rows[~found.left], config, min_node, 2 * node_id + 1, depth + 1)
    return node


def grow(dataset, config=None, exposure=None, **overrides):
    """Fit a tree to an uncensored dataset (or one Poisson tree given exposures).

    Censored datasets should normally go through :func:`subtree.survival.fit_ph_tree`,
    which iterates the baseline hazard; ``grow`` dispatches there when no
    exposures are provided.
    """
    config = config or TreeConfig()
    if overrides:
        config = TreeConfig(**{**asdict(config), **overrides})
    check_roles(dataset, config.method)
    if dataset.censored and exposure is None:
        from .survival import fit_ph_tree

        return fit_ph_tree(dataset, config)
    problem = Problem.for_dataset(dataset, config.method, exposure, config.lof_statistic, config.yates)
    root = build_tree(problem, config)
    model = wrap_model(dataset, root, config)
    return model


def build_tree(problem, config):
    from .prune import cv_prune

    rows = np.arange(problem.dataset.n_rows)
    min_node = config.resolved_min_node(len(rows))
    root = grow_structure(problem, rows, config, min_node)
    if config.prune and not root.is_leaf:
        root = cv_prune(problem, root, config, min_node)
    return root


def wrap_model(dataset, root, config, hazard=None, reference_rate=None, history=None):
    preds = [{"name": c.name, "role": c.role.value, "levels": list(c.levels) if c.levels else None}
             for c in dataset.predictors]
    return TreeModel(
        root=root,
        method=config.method,
        response_kind="censored" if dataset.censored else "uncensored",
        config=config,
        response=dataset.response.name,
        treatment=dataset.treatment.name,
        treatment_levels=tuple(dataset.treatment.levels),
        predictors=preds,
        n_train=dataset.n_rows,
        event=dataset.event.name if dataset.event is not None else None,
        hazard=hazard,
        reference_rate=reference_rate,
        history=list(history or []),
        binary_response=bool(np.isin(dataset.y, (0.0, 1.0)).all()) and not dataset.censored,
    )


# ---------------------------------------------------------------------------
# effects


def estimate_effects(tree):
    """Per-leaf effect table (list of dicts).

    Uncensored: treatment means, naive SDs, counts, the mean difference
    (level 1 minus level 0) and, for a binary response, the effect size
    ``|p1 - p0|``. Censored: events, exposures and relative risks versus the
    reference level. ``defined`` is False when a leaf lacks a treatment level.
    """
    out = []
    for leaf in tree.leaves():
        row = {"node": leaf.id, "n": leaf.n, "counts": leaf.counts.tolist(),
               "defined": bool((leaf.counts > 0).all())}
        if tree.censored:
            row["events"] = leaf.events.tolist()
            row["exposure"] = leaf.exposure.tolist()
            rr = np.exp(leaf.log_relative_risk)
            row["relative_risk"] = rr.tolist()
            row["defined"] = row["defined"] and bool(np.isfinite(leaf.log_relative_risk).all())
        else:
            row["means"] = leaf.means.tolist()
            row["sds"] = leaf.sds.tolist()
            if len(leaf.counts) >= 2:
                row["difference"] = leaf.effect
            if tree.binary_response and len(leaf.counts) == 2:
                row["effect_size"] = abs(leaf.effect) if row["defined"] else float("nan")
        out.append(row)
    return out


# ---------------------------------------------------------------------------
# serialization


def _enc(x):
    if x is None:
        return None
    if isinstance(x, np.ndarray):
        return [_enc(v) for v in x.tolist()]
    if isinstance(x, (list, tuple)):
        return [_enc(v) for v in x]
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return None
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    if isinstance(x, (np.integer,)):
        return int(x)
    return x


def _dec(x, dtype=float):
    if x is None:
        return None
    return np.array([np.nan if v is None else float(v) for v in x], dtype=dtype)


def to_dict(tree):
    nodes = []
    for nd in tree.root.walk():
        nodes.append({
            "id": nd.id,
            "depth": nd.depth,
            "n": nd.n,
            "counts": _enc(nd.counts),
            "means": _enc(nd.means),
            "sds": _enc(nd.sds),
            "events": _enc(nd.events),
            "exposure": _enc(nd.exposure),
            "loss": _enc(nd.loss),
            "majority": nd.majority,
            "scores": _enc(nd.scores),
            "split": None if nd.split is None else _enc_rule(nd.split),
        })
    hazard = None
    if tree.hazard is not None:
        hazard = {"times": _enc(tree.hazard.times), "values": _enc(tree.hazard.values)}
    return {
        "format": FORMAT,
        "version": VERSION,
        "method": tree.method,
        "response_kind": tree.response_kind,
        "config": asdict(tree.config),
        "columns": {
            "response": tree.response,
            "treatment": tree.treatment,
            "event": tree.event,
            "treatment_levels": list(tree.treatment_levels),
            "predictors": tree.predictors,
        },
        "n_train": tree.n_train,
        "binary_response": tree.binary_response,
        "reference_rate": _enc(tree.reference_rate),
        "history": _enc(tree.history),
        "hazard": hazard,
        "nodes": nodes,
    }


def _enc_rule(rule):
    d = rule.to_dict()
    if "threshold" in d:
        d["threshold"] = _enc(d["threshold"])
    return d


def from_dict(doc):
    if doc.get("format") != FORMAT:
        raise DataError("not a subtree model file")
    if doc.get("version") != VERSION:
        raise DataError(f"model file version {doc.get('version')!r} not supported (expected {VERSION})")
    try:
        by_id = {}
        for d in doc["nodes"]:
            nd = Node(
                id=int(d["id"]), depth=int(d["depth"]), n=int(d["n"]),
                counts=np.array(d["counts"], dtype=np.int64),
                means=_dec(d["means"]), sds=_dec(d["sds"]),
                events=_dec(d["events"]), exposure=_dec(d["exposure"]),
                loss=float(d["loss"]), majority=d.get("majority"),
                scores=_dec(d["scores"]),
                split=None if d["split"] is None else SplitRule.from_dict(d["split"]),
            )
            by_id[nd.id] = nd
        for nd in by_id.values():
            if nd.split is not None:
                nd.left = by_id[2 * nd.id]
                nd.right = by_id[2 * nd.id + 1]
        root = by_id[1]
        cols = doc["columns"]
        hazard = None
        if doc.get("hazard"):
            from .survival import HazardTable

            hazard = HazardTable(_dec(doc["hazard"]["times"]), _dec(doc["hazard"]["values"]))
        rr = doc.get("reference_rate")
        return TreeModel(
            root=root,
            method=doc["method"],
            response_kind=doc["response_kind"],
            config=TreeConfig.from_dict(doc["config"]),
            response=cols["response"],
            treatment=cols["treatment"],
            treatment_levels=tuple(cols["treatment_levels"]),
            predictors=cols["predictors"],
            n_train=int(doc["n_train"]),
            event=cols.get("event"),
            hazard=hazard,
            reference_rate=None if rr is None else float(rr),
            history=[float(v) if v is not None else float("nan") for v in doc.get("history", [])],
            binary_response=bool(doc.get("binary_response", False)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed model file: {exc}") from None


def serialize(tree):
    return json.dumps(to_dict(tree), indent=1, allow_nan=False)


def deserialize(text):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"model file is not valid JSON ({exc.msg})") from None
    return from_dict(doc)


def atomic_write(path, text):
    """Write ``text`` to ``path`` via a temporary file and rename."""
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(tree, path):
    atomic_write(path, serialize(tree))


def load(path):
    with open(path, encoding="utf-8") as fh:
        return deserialize(fh.read())


# ---------------------------------------------------------------------------
# text report


def report(tree):
    levels = tree.treatment_levels
    kind = "censored" if tree.censored else "uncensored"
    lines = [f"{tree.method.capitalize()} tree ({kind} response {tree.response!r}, "
             f"treatment {tree.treatment!r}), {tree.n_train} observations"]
    if tree.trivial:
        lines.append("No subgroups found: the tree is trivial (root node only).")
    else:
        lines.append("At each intermediate node, a case goes to the left child node "
                     "if and only if the stated condition is satisfied.")
    lines.append("")

    def leaf_text(nd):
        parts = [f"n = {nd.n}"]
        if tree.censored:
            for lv, d, cnt in zip(levels, nd.events, nd.counts):
                parts.append(f"{lv}: {int(d)}/{cnt} events")
            rr = np.exp(nd.log_relative_risk)
            parts.append("relative risk " + ", ".join(f"{lv} vs {levels[0]} = {v:.3g}"
                                                     for lv, v in zip(levels[1:], rr)))
        else:
            for lv, m, cnt in zip(levels, nd.means, nd.counts):
                parts.append(f"{lv}: mean {m:.4g} (n={cnt})")
        return ", ".join(parts)

    def visit(nd, indent):
        pad = "  " * indent
        if nd.is_leaf:
            lines.append(f"{pad}Node {nd.id}: terminal, {leaf_text(nd)}")
            return
        lines.append(f"{pad}Node {nd.id}: {nd.split.describe()}")
        visit(nd.left, indent + 1)
        lines.append(f"{pad}Node {nd.id}: {nd.split.describe(negate=True)}")
        visit(nd.right, indent + 1)

    visit(tree.root, 0)
    return "\n".join(lines) + "\n"


def tree_signature(tree):
    """Hashable summary of structure and rules (for equality checks)."""
    return tuple((nd.id, nd.n, None if nd.split is None else json.dumps(_enc_rule(nd.split), sort_keys=True))
                 for nd in tree.root.walk())


def node_role_names(predictors):
    return {p["name"]: Role(p["role"]) for p in predictors}
