"""Command-line interface: ``subtree <command> ...``.

Commands: ``fit``, ``predict``, ``bootstrap-ci``, ``importance``,
``km-curves`` and ``simulate``. Exit status is 0 on success, 2 for usage or
input errors and 3 for numerical failures.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from collections import Counter

import numpy as np

from . import simlab, tree as treemod
from ._parallel import resolve_threads
from .dataset import Dataset, DataError, Role, load_csv, read_columns, read_roles
from .inference import BootstrapConfig, bootstrap_intervals, importance_scores, naive_intervals
from .stats import NumericalError
from .survival import curves_to_csv, kaplan_meier
from .tree import TreeConfig, atomic_write, estimate_effects, grow, report

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_INPUT)


def _bool_flag(p, name, default, help_text):
    p.add_argument(f"--{name}", dest=name.replace("-", "_"), action=argparse.BooleanOptionalAction,
                   default=default, help=help_text)


def build_parser():
    p = _Parser(prog="subtree", description="Regression trees for subgroups with differential treatment effects.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def data_args(sp, roles_required):
        sp.add_argument("--data", required=True, help="CSV data file with a header row")
        sp.add_argument("--roles", required=roles_required,
                        help="roles file: one '<column> <code>' line per column (codes r t d n c x)")

    def threads_arg(sp):
        sp.add_argument("--threads", type=int, default=None,
                        help="worker processes (default: all cores; SUBTREE_THREADS overrides)")

    f = sub.add_parser("fit", help="grow a tree and write the model file")
    data_args(f, True)
    f.add_argument("--method", choices=("gc", "gs", "gi"), default="gi")
    f.add_argument("--censored", action="store_true", help="require an event-indicator column")
    f.add_argument("--treatment-reference", help="treatment level to use as the reference")
    f.add_argument("--min-node-size", type=int, default=None)
    f.add_argument("--min-treatment-size", type=int, default=2)
    f.add_argument("--max-depth", type=int, default=4)
    _bool_flag(f, "gate", False, "stop unless the best q(X) exceeds the chi-squared(1) quantile")
    f.add_argument("--gate-level", type=float, default=0.95)
    _bool_flag(f, "prune", True, "cost-complexity pruning by cross-validation")
    f.add_argument("--cv-folds", type=int, default=10)
    f.add_argument("--se-rule", type=float, default=0.5)
    f.add_argument("--iterations", type=int, default=5, help="Poisson-tree passes for censored data")
    f.add_argument("--lof-statistic", choices=("deviance", "pearson"), default="deviance")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--model", required=True, help="output model file (JSON)")
    f.add_argument("--report", help="write the text report here instead of stdout")
    f.add_argument("--effects", help="per-leaf effect table (CSV)")

    pr = sub.add_parser("predict", help="assign rows of a data file to leaves")
    pr.add_argument("--model", required=True)
    data_args(pr, False)
    pr.add_argument("--out", required=True, help="CSV with one leaf id per row")

    b = sub.add_parser("bootstrap-ci", help="bootstrap intervals for the leaf estimates")
    b.add_argument("--model", required=True)
    data_args(b, False)
    b.add_argument("-J", "--replicates", dest="J", type=int, default=100)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--naive", help="also write naive intervals here (uncensored only)")
    b.add_argument("--out", required=True, help="interval table (CSV)")
    b.add_argument("--report", help="human-readable table (default: stdout)")
    threads_arg(b)

    im = sub.add_parser("importance", help="importance scores with the scaled chi-squared threshold")
    im.add_argument("--model", required=True)
    data_args(im, False)
    im.add_argument("--out", required=True)
    im.add_argument("--report")

    k = sub.add_parser("km-curves", help="Kaplan-Meier curves as CSV point lists")
    k.add_argument("--model", required=True)
    data_args(k, False)
    k.add_argument("--by", choices=("node", "treatment"), default="node")
    k.add_argument("--out", required=True)

    s = sub.add_parser("simulate", help="run a bias, accuracy or coverage experiment")
    s.add_argument("--config", help="key = value experiment file; flags given here override it")
    s.add_argument("--experiment", choices=("bias", "accuracy", "coverage"))
    s.add_argument("--model", dest="sim_model", choices=("m1", "m2", "m3"))
    s.add_argument("--method", help="comma-separated methods, e.g. gs,gc,gi")
    s.add_argument("--iters", type=int)
    s.add_argument("--scale", type=float, help="multiplier on the iteration count")
    s.add_argument("-n", type=int)
    s.add_argument("-J", type=int)
    s.add_argument("-r", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--se-rule", type=float)
    _bool_flag(s, "prune", None, "cost-complexity pruning of simulated trees")
    _bool_flag(s, "gate", None, "significance gate on simulated trees")
    s.add_argument("--out", required=True, help="report CSV")
    s.add_argument("--report", help="formatted report (default: stdout)")
    threads_arg(s)
    return p


# ---------------------------------------------------------------------------
# helpers


def _echo(command, cfg):
    print(f"# subtree {command} " + json.dumps(cfg, sort_keys=True, default=str), file=sys.stderr)


def _emit(text, path):
    if path:
        atomic_write(path, text)
    else:
        sys.stdout.write(text)


def _check_output(path):
    d = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(d):
        raise DataError(f"output directory {d} does not exist")


def _load_model(path):
    try:
        return treemod.load(path)
    except FileNotFoundError:
        raise DataError(f"{path}: no such model file") from None
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def _model_roles(model):
    roles = {model.response: Role.RESPONSE, model.treatment: Role.TREATMENT}
    if model.event:
        roles[model.event] = Role.EVENT
    for pdef in model.predictors:
        roles[pdef["name"]] = Role(pdef["role"])
    return roles


def _training_data(model, args):
    ref = model.treatment_levels[0]
    if args.roles:
        ds = load_csv(args.data, args.roles, treatment_reference=ref)
    else:
        # roles from the model; other columns in the file are ignored
        cols = read_columns(args.data, _model_roles(model), treatment_reference=ref, require_all=False)
        ds = Dataset(cols, args.data)
    if tuple(ds.treatment.levels) != tuple(model.treatment_levels):
        raise DataError(f"{args.data}: treatment levels {ds.treatment.levels} differ from the model's "
                        f"{model.treatment_levels}")
    return ds


# ---------------------------------------------------------------------------
# commands


def cmd_fit(args):
    cfg = TreeConfig(method=args.method, min_node_size=args.min_node_size,
                     min_treatment_size=args.min_treatment_size, max_depth=args.max_depth, gate=args.gate,
                     gate_level=args.gate_level, prune=args.prune, cv_folds=args.cv_folds, se_rule=args.se_rule,
                     seed=args.seed, iterations=args.iterations, lof_statistic=args.lof_statistic)
    _echo("fit", {**vars(args), "resolved": dataclasses.asdict(cfg)})
    _check_output(args.model)
    ds = load_csv(args.data, args.roles, treatment_reference=args.treatment_reference)
    if args.censored and not ds.censored:
        raise DataError(f"{args.roles}: --censored given but no event-indicator column (code d)")
    model = grow(ds, cfg)
    treemod.save(model, args.model)
    text = report(model)
    counts = Counter(model.apply(ds).tolist())
    text += "\nLeaf sizes: " + ", ".join(f"node {k}: {counts[k]}" for k in sorted(counts)) + "\n"
    _emit(text, args.report)
    if args.effects:
        atomic_write(args.effects, _effects_csv(model))
    return EXIT_OK


def _effects_csv(model):
    rows = estimate_effects(model)
    keys = sorted({k for r in rows for k in r}, key=lambda k: (k != "node", k))
    lines = [",".join(keys)]
    for r in rows:
        lines.append(",".join(_cell(r.get(k)) for k in keys))
    return "\n".join(lines) + "\n"


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, list):
        return '"' + ";".join(_cell(x) for x in v) + '"'
    if isinstance(v, float):
        return "NA" if not np.isfinite(v) else repr(v)
    return str(v)


def cmd_predict(args):
    _echo("predict", vars(args))
    _check_output(args.out)
    model = _load_model(args.model)
    roles = read_roles(args.roles) if args.roles else _model_roles(model)
    cols = {c.name: c for c in read_columns(args.data, roles, args.roles, require_all=False)}
    needed = {nd.split.variable for nd in model.intermediate_nodes()}
    absent = sorted(needed - cols.keys())
    if absent:
        raise DataError(f"{args.data}: split variable {absent[0]!r} not found")
    for name in needed:
        want = Role(next(p["role"] for p in model.predictors if p["name"] == name))
        if cols[name].role is not want:
            raise DataError(f"{args.data}: column {name!r} has role {cols[name].role.name.lower()}, "
                            f"model expects {want.name.lower()}")
    if not cols:
        raise DataError(f"{args.data}: no usable columns")
    n = len(next(iter(cols.values())).values)
    leaf = model.apply(cols) if needed else np.ones(n, dtype=np.int64)
    atomic_write(args.out, "row,node\n" + "".join(f"{i + 1},{t}\n" for i, t in enumerate(leaf.tolist())))
    counts = Counter(leaf.tolist())
    print("Leaf sizes: " + ", ".join(f"node {k}: {counts[k]}" for k in sorted(counts)))
    return EXIT_OK


def cmd_bootstrap(args):
    threads = resolve_threads(args.threads)
    _echo("bootstrap-ci", {**vars(args), "threads": threads})
    _check_output(args.out)
    model = _load_model(args.model)
    ds = _training_data(model, args)
    rep = bootstrap_intervals(ds, model, BootstrapConfig(J=args.J, seed=args.seed), threads=threads)
    atomic_write(args.out, rep.to_csv())
    text = rep.to_text()
    if model.censored:
        text += "relative risks (exponentiated):\n"
        for iv in rep.intervals:
            text += (f"  node {iv.node} {iv.quantity}: {np.exp(iv.estimate):.3g} "
                     f"({np.exp(iv.lower):.3g}, {np.exp(iv.upper):.3g})\n")
    if args.naive:
        if model.censored:
            raise DataError("--naive applies to uncensored models only")
        atomic_write(args.naive, naive_intervals(model).to_csv())
    _emit(text, args.report)
    return EXIT_OK


def cmd_importance(args):
    _echo("importance", vars(args))
    _check_output(args.out)
    model = _load_model(args.model)
    ds = _training_data(model, args)
    rep = importance_scores(model, ds)
    atomic_write(args.out, rep.to_csv())
    _emit(rep.to_text(), args.report)
    return EXIT_OK


def cmd_km(args):
    _echo("km-curves", vars(args))
    _check_output(args.out)
    model = _load_model(args.model)
    if not model.censored:
        raise DataError(f"{args.model}: km-curves needs a censored-response model")
    ds = _training_data(model, args)
    levels = np.array(model.treatment_levels, dtype=object)[ds.z]
    if args.by == "node":
        leaf = model.apply(ds)
        groups = np.array([f"node{t}:{lv}" for t, lv in zip(leaf.tolist(), levels)], dtype=object)
    else:
        groups = levels
    curves = kaplan_meier(ds.y, ds.delta, groups)
    atomic_write(args.out, curves_to_csv(curves))
    print(f"{len(curves)} curves written to {args.out}")
    return EXIT_OK


def cmd_simulate(args):
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                cfg = simlab.parse_config(fh.read())
        except FileNotFoundError:
            raise DataError(f"{args.config}: no such config file") from None
        except ValueError as exc:
            raise DataError(f"{args.config}: {exc}") from None
        base = dataclasses.asdict(cfg)
    else:
        base = {}
    over = {"experiment": args.experiment, "model": args.sim_model, "methods": args.method,
            "iterations": args.iters, "scale": args.scale, "n": args.n, "J": args.J, "r": args.r,
            "seed": args.seed, "se_rule": args.se_rule, "prune": args.prune, "gate": args.gate}
    base.update({k: v for k, v in over.items() if v is not None})
    if "experiment" not in base:
        raise DataError("simulate: --experiment (or 'experiment' in --config) is required")
    base["threads"] = resolve_threads(args.threads)
    cfg = simlab.ExperimentConfig(**base)
    _echo("simulate", simlab._config_dict(cfg))
    _check_output(args.out)
    rep = simlab.run_experiment(cfg)
    atomic_write(args.out, rep.to_csv())
    _emit(rep.to_text(), args.report)
    print(f"# elapsed {rep.elapsed:.1f} s", file=sys.stderr)
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "predict": cmd_predict, "bootstrap-ci": cmd_bootstrap,
            "importance": cmd_importance, "km-curves": cmd_km, "simulate": cmd_simulate}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"subtree {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ValueError, OSError) as exc:
        print(f"subtree {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
