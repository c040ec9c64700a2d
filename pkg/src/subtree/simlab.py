"""Data generators and Monte-Carlo drivers for the selection-bias, subgroup
accuracy and interval-coverage experiments."""
from __future__ import annotations

import csv
import io
import itertools
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ._parallel import pmap
from .dataset import DataError, Dataset
from .inference import BootstrapConfig, bootstrap_intervals, naive_intervals
from .splitcore import Problem, rank_scores, score_variables
from .tree import TreeConfig, estimate_effects, grow

BIAS_DISTRIBUTIONS = ("cont", "ord4", "cat3", "cat7")
BIAS_PAIRS = (("cont", "ord4"), ("cont", "cat3"), ("cont", "cat7"), ("ord4", "cat3"))
MODELS = ("bias", "m1", "m2", "m3", "predictive", "prognostic", "factorial")
X12_PROBS = np.array([0.4, 0.465, 0.135])
N_MARKERS = 100


# ---------------------------------------------------------------------------
# generators


@dataclass(frozen=True)
class GeneratorSpec:
    """What to simulate.

    ``dist1``/``dist2`` apply to ``model="bias"``; ``base`` and ``r`` to
    ``model="factorial"``; ``n_predictors`` and ``sigma`` to the two
    normal-error demonstration models.
    """

    model: str
    n: int = 100
    seed: int = 0
    dist1: str = "cont"
    dist2: str = "cat7"
    base: str = "m1"
    r: int = 2
    n_predictors: int = 5
    sigma: float = 0.5

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}; expected one of {MODELS}")
        if self.model == "bias":
            for d in (self.dist1, self.dist2):
                if d not in BIAS_DISTRIBUTIONS:
                    raise ValueError(f"unknown distribution {d!r}; expected one of {BIAS_DISTRIBUTIONS}")
        if self.model == "factorial" and (self.base not in ("m1", "m2", "m3") or self.r < 1):
            raise ValueError("factorial needs base in {m1, m2, m3} and r >= 1")
        if self.n < 2:
            raise ValueError("n must be >= 2")


def response_probability(model, x1, x2, x3, x4, z):
    """``P(Y = 1 | X, Z)`` for the binary-marker models."""
    i1, i2 = (np.asarray(x1) != 0), (np.asarray(x2) != 0)
    z = np.asarray(z)
    if model == "m1":
        return 0.4 + 0.05 * (z == 1) * (4 * i1 + 3 * i2 + (i1 & i2))
    if model == "m2":
        i3, i4 = (np.asarray(x3) != 0), (np.asarray(x4) != 0)
        return 0.3 + 0.2 * ((2 * (z == 1) - 1) * (i1 & i2) + i3 + i4)
    if model == "m3":
        return 0.5 + 0.1 * (2 * ((z == 1).astype(int) + i1 + i2) - 3)
    raise ValueError(f"no response probability for model {model!r}")


def _bias_column(dist, n, rng):
    if dist == "cont":
        return "ordinal", rng.standard_normal(n)
    if dist == "ord4":
        return "ordinal", rng.integers(1, 5, n).astype(float)
    k = 3 if dist == "cat3" else 7
    return "categorical", rng.integers(0, k, n)


def generate(spec, rng=None):
    """Simulate one dataset. ``meta`` carries the level probabilities of
    categorical predictors (``marginals``) and the model name."""
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    n = spec.n
    meta = {"model": spec.model}
    if spec.model == "bias":
        y = rng.integers(0, 2, n)
        z = rng.integers(0, 2, n)
        ordinal, categorical = {}, {}
        for name, dist in (("X1", spec.dist1), ("X2", spec.dist2)):
            kind, x = _bias_column(dist, n, rng)
            (ordinal if kind == "ordinal" else categorical)[name] = x
        ds = Dataset.from_arrays(y, z, ordinal=ordinal, categorical=categorical,
                                 treatment_levels=("0", "1"), meta=meta)
        # keep X1 before X2 in column order whatever their types
        order = ds.columns[:2] + [ds.column("X1"), ds.column("X2")]
        return Dataset(order, "<simulated>", meta)
    if spec.model in ("m1", "m2", "m3"):
        z = rng.integers(0, 2, n)
        pi = rng.beta(2.0, 3.0, N_MARKERS - 2)
        x = np.empty((N_MARKERS, n), dtype=np.int64)
        x[0] = rng.choice(3, n, p=X12_PROBS)
        x[1] = rng.choice(3, n, p=X12_PROBS)
        x[2:] = rng.binomial(2, pi[:, None], (N_MARKERS - 2, n))
        p = response_probability(spec.model, x[0], x[1], x[2], x[3], z)
        y = (rng.random(n) < p).astype(float)
        marg = {"X1": X12_PROBS, "X2": X12_PROBS}
        for j, pj in enumerate(pi, start=3):
            marg[f"X{j}"] = np.array([(1 - pj) ** 2, 2 * pj * (1 - pj), pj**2])
        meta["marginals"] = marg
        meta["pi"] = pi
        return _marker_dataset(x, y, z, meta)
    if spec.model == "factorial":
        cells = np.array(list(itertools.product(range(3), repeat=4)), dtype=np.int64)
        x = np.repeat(cells, spec.r, axis=0).T
        m = x.shape[1]
        z = rng.integers(0, 2, m)
        p = response_probability(spec.base, x[0], x[1], x[2], x[3], z)
        y = (rng.random(m) < p).astype(float)
        meta.update(base=spec.base, r=spec.r,
                    marginals={f"X{j}": np.full(3, 1 / 3) for j in range(1, 5)})
        return _marker_dataset(x, y, z, meta)
    # normal-error demonstration models with uniform(-1, 1) predictors
    z = rng.integers(0, 2, n)
    x = rng.uniform(-1.0, 1.0, (spec.n_predictors, n))
    eps = spec.sigma * rng.standard_normal(n)
    pos = x[0] > 0
    if spec.model == "predictive":
        y = 1.9 + 0.2 * (z == 1) - 1.8 * pos + 3.6 * (pos & (z == 1)) + eps
    else:
        y = 2.0 * (z == 1) + 1.0 * pos + eps
    ordinal = {f"X{j + 1}": x[j] for j in range(spec.n_predictors)}
    return Dataset.from_arrays(y, z, ordinal=ordinal, treatment_levels=("0", "1"), meta=meta)


def _marker_dataset(x, y, z, meta):
    cat = {f"X{j + 1}": x[j] for j in range(x.shape[0])}
    ds = Dataset.from_arrays(y, z, categorical=cat, treatment_levels=("0", "1"), meta=meta)
    return ds


# ---------------------------------------------------------------------------
# subgroups and accuracy


@dataclass(frozen=True)
class SubgroupSpec:
    """Conjunction of ``variable in allowed-levels`` conditions and its probability."""

    conditions: dict
    probability: float


def _cond_prob(conditions, marginals):
    p = 1.0
    for var, allowed in conditions.items():
        probs = marginals[var]
        p *= float(sum(probs[int(v)] for v in allowed))
    return p


def true_subgroup(model):
    """The subgroup with the largest effect: ``{X1 != 0, X2 != 0}`` for M1/M2, everything for M3."""
    if model in ("m1", "m2"):
        cond = {"X1": frozenset({1, 2}), "X2": frozenset({1, 2})}
        return SubgroupSpec(cond, _cond_prob(cond, {"X1": X12_PROBS, "X2": X12_PROBS}))
    if model == "m3":
        return SubgroupSpec({}, 1.0)
    raise ValueError(f"no true subgroup for model {model!r}")


def leaf_regions(tree, domains):
    """``[(leaf, {variable: allowed level codes})]`` for every leaf.

    ``domains`` maps each split variable to its level codes; a level is
    routed as its label ``str(code)``, so levels unseen in training follow
    the rule's missing-value direction exactly as in prediction.
    """
    out = []

    def visit(nd, region):
        if nd.is_leaf:
            out.append((nd, region))
            return
        var = nd.split.variable
        if var not in domains:
            raise ValueError(f"split variable {var!r} has no finite domain")
        allowed = region.get(var, frozenset(domains[var]))
        left = frozenset(v for v in allowed if nd.split.goes_left(str(v)))
        visit(nd.left, {**region, var: left})
        visit(nd.right, {**region, var: allowed - left})

    visit(tree.root, {})
    return out


def selected_leaves(tree):
    """Leaves with the largest estimated effect size (ties all kept)."""
    effects = {row["node"]: row.get("effect_size", float("nan")) for row in estimate_effects(tree)}
    good = {k: v for k, v in effects.items() if np.isfinite(v)}
    if not good:
        return []
    top = max(good.values())
    return [k for k, v in good.items() if np.isclose(v, top, rtol=1e-12, atol=1e-15)]


def accuracy(tree, model, marginals):
    """``P(S_hat) / P(S*)`` if the selected region lies inside the true subgroup, else 0.

    Probabilities are exact products of per-variable level probabilities;
    leaves are disjoint, so the union's probability is their sum.
    """
    truth = true_subgroup(model)
    domains = {v: range(len(p)) for v, p in marginals.items()}
    regions = dict((nd.id, reg) for nd, reg in leaf_regions(tree, domains))
    chosen = selected_leaves(tree)
    if not chosen:
        return 0.0
    p_hat = 0.0
    for t in chosen:
        region = regions[t]
        p = _cond_prob(region, marginals)
        if p == 0:
            continue
        for var, allowed in truth.conditions.items():
            if not region.get(var, frozenset(domains[var])) <= allowed:
                return 0.0
        p_hat += p
    return p_hat / truth.probability


# ---------------------------------------------------------------------------
# experiments


@dataclass
class ExperimentConfig:
    """Flat settings shared by the three experiments."""

    experiment: str = "accuracy"
    model: str = "m2"
    methods: tuple = ("gi",)
    n: int = 100
    iterations: int = 200
    seed: int = 1
    J: int = 100
    r: int = 2
    pairs: tuple = BIAS_PAIRS
    threads: int = 1
    scale: float = 1.0
    se_rule: float | None = None
    prune: bool = True
    gate: bool = False
    max_depth: int = 4
    min_node_size: int | None = None
    max_attempts: int = 0

    def __post_init__(self):
        if self.experiment not in ("bias", "accuracy", "coverage"):
            raise ValueError(f"unknown experiment {self.experiment!r}")
        if isinstance(self.methods, str):
            self.methods = tuple(m.strip().lower() for m in self.methods.split(",") if m.strip())
        if isinstance(self.pairs, str):
            self.pairs = tuple(tuple(p.split("-")) for p in self.pairs.split(","))
        for pair in self.pairs:
            if len(pair) != 2 or not set(pair) <= set(BIAS_DISTRIBUTIONS):
                raise ValueError(f"bad distribution pair {pair!r}")
        if self.iterations < 1 or self.scale <= 0:
            raise ValueError("iterations and scale must be positive")

    @property
    def effective_iterations(self):
        return max(1, int(round(self.iterations * self.scale)))

    def tree_config(self, method):
        kw = dict(method=method, prune=self.prune, gate=self.gate, max_depth=self.max_depth,
                  min_node_size=self.min_node_size)
        if self.se_rule is not None:
            kw["se_rule"] = self.se_rule
        return TreeConfig(**kw)


def parse_config(text):
    """Read ``key = value`` lines (``#`` comments) into an :class:`ExperimentConfig`."""
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            key, _, val = line.partition(" ")
        key, val = key.strip().replace("-", "_"), val.strip()
        if key == "method":
            key = "methods"
        if key not in types:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, val)
    return ExperimentConfig(**values)


def _coerce(key, val):
    if key in ("experiment", "model", "methods", "pairs"):
        return val.lower()
    if key in ("prune", "gate"):
        if val.lower() not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
            raise ValueError(f"{key}: expected a boolean, got {val!r}")
        return val.lower() in ("true", "1", "yes", "on")
    if key in ("scale", "se_rule"):
        return None if val.lower() in ("none", "") else float(val)
    if key == "min_node_size":
        return None if val.lower() in ("none", "") else int(val)
    return int(val)


@dataclass
class ExperimentReport:
    """Tallies of one experiment. ``rows`` feed the CSV; ``elapsed`` is kept
    out of the CSV and text so identical runs give identical files."""

    experiment: str
    config: dict
    rows: list
    elapsed: float = 0.0
    notes: list = field(default_factory=list)

    def to_csv(self):
        if not self.rows:
            return ""
        keys = list(self.rows[0])
        buf = io.StringIO()
        w = csv.DictWriter(buf, keys, lineterminator="\n")
        w.writeheader()
        for row in self.rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()

    def to_text(self):
        cfg = self.config
        lines = [f"{self.experiment} experiment: seed {cfg['seed']}, "
                 f"{cfg['effective_iterations']} iterations per cell"]
        if not self.rows:
            return "\n".join(lines + ["(no results)"]) + "\n"
        keys = list(self.rows[0])
        width = {k: max(len(k), *(len(_show(r[k])) for r in self.rows)) for k in keys}
        lines.append("  ".join(k.rjust(width[k]) for k in keys))
        for r in self.rows:
            lines.append("  ".join(_show(r[k]).rjust(width[k]) for k in keys))
        lines.extend(self.notes)
        return "\n".join(lines) + "\n"


def _show(v):
    if isinstance(v, float):
        return "NA" if not np.isfinite(v) else f"{v:.4f}"
    return str(v)


def _config_dict(cfg):
    d = asdict(cfg)
    d["effective_iterations"] = cfg.effective_iterations
    d["pairs"] = ["-".join(p) for p in cfg.pairs]
    d["methods"] = list(cfg.methods)
    return d


def _seeds(seed, count, stream=0):
    return np.random.SeedSequence([seed, stream]).spawn(count)


# -- bias -------------------------------------------------------------------


def root_selection(dataset, method, yates=False):
    """Name of the variable with the largest q at the root (ties: first column)."""
    problem = Problem.for_dataset(dataset, method, yates=yates)
    rows = np.arange(dataset.n_rows)
    ranking = rank_scores(problem, *score_variables(problem, rows, method))
    return ranking[0].variable if ranking else None


def _bias_task(task):
    pair, methods, n, seed = task
    ds = generate(GeneratorSpec("bias", n=n, dist1=pair[0], dist2=pair[1]), np.random.default_rng(seed))
    return [root_selection(ds, m) == "X1" for m in methods]


def run_bias_experiment(cfg):
    start = time.perf_counter()
    iters = cfg.effective_iterations
    rows = []
    for k, pair in enumerate(cfg.pairs):
        tasks = [(pair, cfg.methods, cfg.n, s) for s in _seeds(cfg.seed, iters, k)]
        hits = np.array(pmap(_bias_task, tasks, cfg.threads), dtype=float)
        for j, m in enumerate(cfg.methods):
            f = float(hits[:, j].mean())
            rows.append({"method": m, "x1": pair[0], "x2": pair[1], "iterations": iters,
                         "freq_x1": f, "se": float(np.sqrt(f * (1 - f) / iters))})
    return ExperimentReport("bias", _config_dict(cfg), rows, time.perf_counter() - start)


# -- accuracy ---------------------------------------------------------------


def _accuracy_task(task):
    model, tcfg, n, seed = task
    ds = generate(GeneratorSpec(model, n=n), np.random.default_rng(seed))
    try:
        tree = grow(ds, tcfg)
    except (DataError, ValueError):
        return None
    first = (not tree.trivial) and tree.root.split.variable in ("X1", "X2")
    second = any(nd.split.variable in ("X1", "X2") for nd in tree.intermediate_nodes() if nd.depth == 1)
    return accuracy(tree, model, ds.meta["marginals"]), float(not tree.trivial), float(first), float(second)


def run_accuracy_experiment(cfg):
    start = time.perf_counter()
    iters = cfg.effective_iterations
    rows = []
    for k, method in enumerate(cfg.methods):
        tasks = [(cfg.model, cfg.tree_config(method), cfg.n, s) for s in _seeds(cfg.seed, iters, k)]
        res = pmap(_accuracy_task, tasks, cfg.threads)
        ok = np.array([r for r in res if r is not None], dtype=float).reshape(-1, 4)
        m = len(ok)
        acc = ok[:, 0]
        rows.append({
            "model": cfg.model, "method": method, "n": cfg.n, "iterations": iters, "failures": iters - m,
            "accuracy": float(acc.mean()) if m else float("nan"),
            "accuracy_se": float(acc.std(ddof=1) / np.sqrt(m)) if m > 1 else float("nan"),
            "p_nontrivial": float(ok[:, 1].mean()) if m else float("nan"),
            "first_level_x12": float(ok[:, 2].mean()) if m else float("nan"),
            "second_level_x12": float(ok[:, 3].mean()) if m else float("nan"),
        })
    return ExperimentReport("accuracy", _config_dict(cfg), rows, time.perf_counter() - start)


# -- coverage ---------------------------------------------------------------


def true_leaf_means(tree, base):
    """``mu(t, z)`` for each leaf: the equal-weight average of ``P(Y=1|x, z)``
    over the factorial cells routed to ``t``."""
    cells = np.array(list(itertools.product(range(3), repeat=4)), dtype=np.int64).T
    lattice = Dataset.from_arrays(np.zeros(cells.shape[1]), np.arange(cells.shape[1]) % 2,
                                  categorical={f"X{j + 1}": cells[j] for j in range(4)},
                                  treatment_levels=("0", "1"))
    leaf = tree.apply(lattice)
    p0 = response_probability(base, *cells, np.zeros(cells.shape[1], dtype=int))
    p1 = response_probability(base, *cells, np.ones(cells.shape[1], dtype=int))
    return {t: (float(p0[leaf == t].mean()), float(p1[leaf == t].mean())) for t in np.unique(leaf)}


def _covers(iv, truth):
    if not (np.isfinite(iv.lower) and np.isfinite(iv.upper)):
        return np.nan
    return float(iv.lower <= truth <= iv.upper)


def _coverage_task(task):
    base, r, tcfg, J, seed = task
    rng = np.random.default_rng(seed)
    ds = generate(GeneratorSpec("factorial", base=base, r=r), rng)
    tree = grow(ds, tcfg)
    if tree.trivial:
        return None
    truth = true_leaf_means(tree, base)
    naive = naive_intervals(tree)
    boot_seed = int(rng.integers(0, 2**63 - 1))
    try:
        boot = bootstrap_intervals(ds, tree, BootstrapConfig(J=J, seed=boot_seed))
    except DataError:
        return "failed"
    out = {k: [] for k in ("bias0", "bias1", "biasd", "n0", "n1", "nd", "b0", "b1", "bd")}
    for leaf in tree.leaves():
        if not (leaf.counts > 0).all():
            continue
        mu0, mu1 = truth[leaf.id]
        out["bias0"].append(leaf.means[0] - mu0)
        out["bias1"].append(leaf.means[1] - mu1)
        out["biasd"].append(leaf.effect - (mu1 - mu0))
        for key, rep in (("n", naive), ("b", boot)):
            out[key + "0"].append(_covers(rep.get(leaf.id, "mean[0]"), mu0))
            out[key + "1"].append(_covers(rep.get(leaf.id, "mean[1]"), mu1))
            out[key + "d"].append(_covers(rep.get(leaf.id, "difference"), mu1 - mu0))
    # average over the leaves of this trial
    return {k: float(np.nanmean(v)) if np.isfinite(v).any() else float("nan") for k, v in out.items()}


def run_coverage_experiment(cfg):
    """Naive versus bootstrap interval coverage on the replicated factorial design.

    Trials are drawn until ``iterations`` nontrivial trees have been seen (or
    ``max_attempts`` is reached); trivial trees are skipped, as are trials
    whose bootstrap could not estimate every quantity.
    """
    start = time.perf_counter()
    want = cfg.effective_iterations
    cap = cfg.max_attempts or 50 * want
    rows = []
    for k, method in enumerate(cfg.methods):
        tcfg = cfg.tree_config(method)
        seeds = _seeds(cfg.seed, cap, k)
        kept, attempts, failed = [], 0, 0
        batch = max(want, 1)
        while len(kept) < want and attempts < cap:
            chunk = seeds[attempts: min(cap, attempts + batch)]
            tasks = [(cfg.model, cfg.r, tcfg, cfg.J, s) for s in chunk]
            for res in pmap(_coverage_task, tasks, cfg.threads):
                attempts += 1
                if res is None:
                    continue
                if res == "failed":
                    failed += 1
                    continue
                kept.append(res)
                if len(kept) == want:
                    break
            batch = max(1, 2 * (want - len(kept)))
        arr = {key: np.array([t[key] for t in kept]) for key in (kept[0] if kept else {})}

        def mean(key):
            v = arr.get(key, np.array([]))
            v = v[np.isfinite(v)]
            return float(v.mean()) if len(v) else float("nan")

        rows.append({
            "model": cfg.model, "method": method, "r": cfg.r, "J": cfg.J, "trials": len(kept),
            "attempts": attempts, "bootstrap_failures": failed,
            "bias_mu0": mean("bias0"), "bias_mu1": mean("bias1"), "bias_d": mean("biasd"),
            "naive_mu0": mean("n0"), "naive_mu1": mean("n1"), "naive_d": mean("nd"),
            "boot_mu0": mean("b0"), "boot_mu1": mean("b1"), "boot_d": mean("bd"),
        })
    return ExperimentReport("coverage", _config_dict(cfg), rows, time.perf_counter() - start)


def run_experiment(cfg):
    return {"bias": run_bias_experiment, "accuracy": run_accuracy_experiment,
            "coverage": run_coverage_experiment}[cfg.experiment](cfg)
