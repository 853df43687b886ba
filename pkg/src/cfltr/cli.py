"""Command-line front end: ``cfltr <subcommand>``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from typing import Dict, Optional

import numpy as np
import yaml

from . import __version__
from .click_sim import (SimulationConfig, load_click_log, save_click_log, simulate_clicks,
                        train_production_ranker)
from .deep import MlpModel, SgdConfig, TrainingDivergedError, query_loss, query_loss_gradient, train_deep
from .harness import (EXPERIMENT_KINDS, ExperimentPlan, RunReport, cross_validate_c, read_csv,
                      run_experiment, write_report)
from .linear_ccp import CcpDivergenceError, TrainConfig, train_propdcg, train_proprank
from .ltr_core import DataError, LinearModel, QueryInstance, load_svmlight, save_svmlight
from .metrics import DCG, evaluate_ranker, ips_risk, snips_risk
from .synthetic import SyntheticSpec, generate_synthetic

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CONFIG_SECTIONS = {
    "synthetic": SyntheticSpec,
    "simulation": SimulationConfig,
    "train": TrainConfig,
    "sgd": SgdConfig,
    "plan": ExperimentPlan,
}

logger = logging.getLogger("cfltr")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def load_config(path: Optional[str]) -> Dict[str, dict]:
    """Read a YAML or JSON config with optional sections named after ``CONFIG_SECTIONS``."""
    if path is None:
        return {}
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
    except yaml.YAMLError as exc:
        raise UsageError(f"{path}: cannot parse config ({exc})") from None
    if not isinstance(raw, dict):
        raise UsageError(f"{path}: config must be a mapping of sections")
    unknown = set(raw) - set(CONFIG_SECTIONS)
    if unknown:
        raise UsageError(f"{path}: unknown config sections {sorted(unknown)}")
    for name, section in raw.items():
        if section is None:
            raw[name] = {}
            continue
        if not isinstance(section, dict):
            raise UsageError(f"{path}: section {name!r} must be a mapping")
        fields = {f.name for f in dataclasses.fields(CONFIG_SECTIONS[name])}
        bad = set(section) - fields
        if bad:
            raise UsageError(f"{path}: unknown keys {sorted(bad)} in section {name!r}")
    return raw


def _build(section: str, config: Dict[str, dict], **overrides):
    values = dict(config.get(section, {}))
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return CONFIG_SECTIONS[section](**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {section} settings: {exc}") from None


def _out(args, name: str) -> str:
    os.makedirs(args.out_dir, exist_ok=True)
    return os.path.join(args.out_dir, name)


def load_model(path):
    """Linear or MLP model, told apart by the header line."""
    with open(path) as fh:
        first = fh.readline().split()
    if first and first[0] == "mlp":
        return MlpModel.load(path)
    try:
        return LinearModel.load(path)
    except ValueError as exc:
        raise DataError(f"{path}: not a model file ({exc})") from None


def cmd_gen_data(args, config):
    spec = _build("synthetic", config, seed=args.seed)
    paths = []
    for name, split in zip(("train", "val", "test"), generate_synthetic(spec)):
        path = _out(args, f"{name}.svm")
        save_svmlight(split, path)
        paths.append(path)
    print("\n".join(paths))


def cmd_simulate(args, config):
    data = load_svmlight(args.data)
    sim = _build("simulation", config, seed=args.seed, passes=args.passes, eta=args.eta,
                 eps_minus=args.eps_minus, assumed_eta=args.assumed_eta)
    if args.production:
        production = load_model(args.production)
    else:
        production = train_production_ranker(data, args.fraction, sim.seed)
        # keep the production ranker so validation clicks can reuse it
        production.save(_out(args, "production.txt"))
    log = simulate_clicks(data, production, sim)
    path = args.output or _out(args, "clicks.jsonl")
    save_click_log(log, sim, path)
    print(f"{len(log)} clicks -> {path}")


def cmd_train(args, config):
    data = load_svmlight(args.data)
    log, _ = load_click_log(args.clicks, data)
    if len(log) == 0:
        raise DataError(f"{args.clicks}: no clicks")
    path = args.output or _out(args, "model.txt")
    if args.method == "deep_propdcg":
        sgd = _build("sgd", config, seed=args.seed)
        model, trace = train_deep(log, sgd)
        trace.to_csv(_out(args, "trace.csv"))
        model.save(path)
        print(f"deep model -> {path}")
        return
    train = _build("train", config, seed=args.seed, C=args.C)
    if args.val_data or args.val_clicks:
        if not (args.val_data and args.val_clicks):
            raise UsageError("--val-data and --val-clicks go together")
        val_log, _ = load_click_log(args.val_clicks, load_svmlight(args.val_data))
        plan = _build("plan", config)
        C, model, info = cross_validate_c(log, val_log, plan.c_grid, args.method, train)
        print(f"chosen C = {C!r} (validation IPS-DCG {info['val_risk']:.6g})")
    elif args.method == "proprank":
        model = train_proprank(log, train)
    else:
        if args.method == "naive_propdcg":
            log = log.with_propensities(np.ones(len(log)))
        model, trace = train_propdcg(log, train)
        trace.to_csv(_out(args, "trace.csv"))
    model.save(path)
    print(f"{args.method} model -> {path}")


def cmd_evaluate(args, config):
    data = load_svmlight(args.data)
    model = load_model(args.model)
    dim = model.input_dim if isinstance(model, MlpModel) else model.dim
    if dim != data.feature_dim:
        raise DataError(f"model has {dim} features, data has {data.feature_dim}")
    out = {}
    if data.has_relevances:
        out["dcg"], out["avg_rank"] = evaluate_ranker(data, model)
    if args.clicks:
        log, _ = load_click_log(args.clicks, data)
        out["ips_dcg"] = -ips_risk(log, model, DCG)
        out["snips_dcg"] = -snips_risk(log, model, DCG)
    print(json.dumps(out, indent=1))


def cmd_sweep(args, config):
    try:
        grid = [float(g) for g in args.grid.split(",")] if args.grid else None
    except ValueError:
        raise UsageError(f"--grid must be comma-separated numbers, got {args.grid!r}") from None
    models = args.models.split(",") if args.models else None
    plan = _build("plan", config, kind=args.kind, grid=grid, runs=args.runs, models=models,
                  master_seed=args.seed)
    spec = _build("synthetic", config)
    report = run_experiment(plan, spec, _build("simulation", config), _build("train", config),
                            _build("sgd", config), threads=args.threads)
    out_dir = plan.output or args.out_dir
    for path in write_report(report, out_dir, args.format):
        print(path)
    if report.failures:
        print(f"{len(report.failures)} cell(s) failed", file=sys.stderr)


def _relative_error(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


def _shifted_loss(model, name, index, delta, query, clicked, q):
    m = model.copy()
    if name == "b2":
        m.b2 += delta
    else:
        getattr(m, name).reshape(-1)[index] += delta
    return query_loss(m, query, clicked, q)


def gradient_check(networks: int, seed: int, input_dim=5, hidden=7, candidates=6,
                   step=1e-5, kink_margin=1e-3) -> float:
    """Largest relative error between analytic and central-difference gradients.

    Instances with a hinge argument within ``kink_margin`` of its kink are
    redrawn, since the loss is not differentiable there.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    done = 0
    while done < networks:
        model = MlpModel.init(input_dim, hidden, int(rng.integers(2**31)))
        model.w2 *= 5.0
        X = rng.normal(size=(candidates, input_dim))
        query = QueryInstance(0, X)
        clicked = int(rng.integers(candidates))
        q = float(rng.uniform(0.1, 1.0))
        s = model.forward(X)
        if np.min(np.abs(1.0 - (s[clicked] - np.delete(s, clicked)))) < kink_margin:
            continue
        grads = query_loss_gradient(model, query, clicked, q)
        for name in ("W1", "b1", "w2", "b2"):
            analytic = np.asarray(grads[name], dtype=np.float64).reshape(-1)
            for i in range(analytic.size):
                numeric = (_shifted_loss(model, name, i, step, query, clicked, q)
                           - _shifted_loss(model, name, i, -step, query, clicked, q)) / (2 * step)
                if max(abs(numeric), abs(analytic[i])) > 1e-7:
                    worst = max(worst, _relative_error(numeric, analytic[i]))
        done += 1
    return worst


def cmd_gradcheck(args, config):
    worst = gradient_check(args.networks, args.seed or 0)
    print(f"max relative error {worst:.3e} over {args.networks} networks")
    if worst >= args.tol:
        raise FloatingPointError(f"gradient check failed: {worst:.3e} >= {args.tol:g}")


def cmd_report(args, config):
    if args.input.endswith(".csv"):
        report = read_csv(args.input)
    else:
        with open(args.input) as fh:
            report = RunReport.from_json(fh.read())
    for path in write_report(report, args.out_dir, args.format):
        print(path)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cfltr", description="Counterfactual learning to rank from click logs.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--config", help="YAML/JSON file with synthetic/simulation/train/sgd/plan sections")
    p.add_argument("--seed", type=int, default=None, help="master seed")
    p.add_argument("--out-dir", default=".", help="directory for output files")
    p.add_argument("--threads", type=int, default=1, help="parallel jobs for sweeps")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", help="write synthetic train/val/test splits in SVMlight format")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("simulate", help="simulate a click log from a production ranker")
    s.add_argument("--data", required=True)
    s.add_argument("--production", help="model file; trained on a subsample when omitted")
    s.add_argument("--fraction", type=float, default=0.01)
    s.add_argument("--passes", type=int)
    s.add_argument("--eta", type=float)
    s.add_argument("--eps-minus", type=float)
    s.add_argument("--assumed-eta", type=float)
    s.add_argument("--output")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", help="train a ranker on a click log")
    s.add_argument("--data", required=True)
    s.add_argument("--clicks", required=True)
    s.add_argument("--method", default="propdcg",
                   choices=("proprank", "propdcg", "naive_propdcg", "deep_propdcg"))
    s.add_argument("--C", type=float)
    s.add_argument("--val-data")
    s.add_argument("--val-clicks")
    s.add_argument("--output")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="full-information and click-based metrics of a model")
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--clicks")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", help="run a full experiment and write its report")
    s.add_argument("--kind", choices=EXPERIMENT_KINDS)
    s.add_argument("--grid", help="comma-separated grid values")
    s.add_argument("--runs", type=int)
    s.add_argument("--models", help="comma-separated model names")
    s.add_argument("--format", choices=("csv", "json", "both"), default="both")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("gradcheck", help="finite-difference check of the deep model gradients")
    s.add_argument("--networks", type=int, default=100)
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("report", help="re-emit a saved report as CSV and/or JSON summary")
    s.add_argument("--input", required=True, help="report.json or report.csv")
    s.add_argument("--format", choices=("csv", "json", "both"), default="both")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        config = load_config(args.config)
        args.func(args, config)
    except UsageError as exc:
        print(f"cfltr: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergedError, CcpDivergenceError, FloatingPointError) as exc:
        print(f"cfltr: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"cfltr: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # non-finite scores and similar surface as ValueError from the numeric core
        msg = str(exc)
        code = EXIT_NUMERIC if "finite" in msg else EXIT_DATA
        print(f"cfltr: {'numeric failure' if code == EXIT_NUMERIC else 'data error'}: {msg}",
              file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
