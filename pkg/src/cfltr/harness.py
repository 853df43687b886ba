"""Experiment driver: simulate clicks, train, evaluate, sweep and report."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import statistics
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .click_sim import SimulationConfig, full_information_log, simulate_clicks, train_production_ranker
from .deep import SgdConfig, train_deep
from .linear_ccp import TrainConfig, train_propdcg, train_proprank
from .ltr_core import Dataset
from .metrics import DCG, ClickLog, evaluate_ranker, ips_risk, mean_full_info
from .synthetic import SyntheticSpec, generate_synthetic

logger = logging.getLogger(__name__)

EXPERIMENT_KINDS = (
    "learning_curve",
    "bias_sweep",
    "noise_sweep",
    "misspecification_sweep",
    "ccp_diagnostics",
    "deep_vs_linear",
)
CLICK_METHODS = ("proprank", "propdcg", "naive_propdcg", "deep_propdcg")
DEFAULT_C_GRID = (1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1e3)
CSV_HEADER = ("experiment", "grid_value", "run", "model", "metric", "value")


def derive_seed(master: int, *keys) -> int:
    """Stable 63-bit seed from a master seed and any sequence of keys."""
    text = "/".join(str(k) for k in (master, *keys))
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") >> 1


@dataclass
class ExperimentPlan:
    kind: str = "learning_curve"
    grid: Tuple[float, ...] = (1, 5, 25)
    runs: int = 3
    models: Tuple[str, ...] = ("proprank", "propdcg")
    c_grid: Tuple[float, ...] = DEFAULT_C_GRID
    production_fraction: float = 0.01
    master_seed: int = 0
    output: Optional[str] = None

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}")
        self.grid = tuple(float(g) for g in self.grid)
        self.models = tuple(self.models)
        self.c_grid = tuple(float(c) for c in self.c_grid)
        if not self.grid or not self.models:
            raise ValueError("experiment grid and model set must be non-empty")
        if not self.c_grid:
            raise ValueError("C grid must be non-empty")
        unknown = set(self.models) - set(CLICK_METHODS)
        if unknown:
            raise ValueError(f"unknown models {sorted(unknown)}")
        if self.runs < 1:
            raise ValueError("runs must be >= 1")


@dataclass
class RunReport:
    experiment: str
    rows: List[Tuple[str, float, int, str, str, float]] = field(default_factory=list)
    failures: List[Dict] = field(default_factory=list)
    timings: List[Dict] = field(default_factory=list)

    def add(self, grid_value, run, model, metric, value):
        self.rows.append((self.experiment, float(grid_value), int(run), model, metric, float(value)))

    def values(self, model: str, metric: str, grid_value=None) -> List[float]:
        return [r[5] for r in self.rows if r[3] == model and r[4] == metric
                and (grid_value is None or r[1] == float(grid_value))]

    def to_json(self) -> str:
        return json.dumps({
            "experiment": self.experiment,
            "rows": [list(r) for r in self.rows],
            "failures": self.failures,
            "timings": self.timings,
        }, indent=1, allow_nan=True)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        obj = json.loads(text)
        rows = [(r[0], float(r[1]), int(r[2]), r[3], r[4], float(r[5])) for r in obj["rows"]]
        return cls(obj["experiment"], rows, obj.get("failures", []), obj.get("timings", []))


def cross_validate_c(train_log: ClickLog, val_log: ClickLog, c_grid: Sequence[float],
                     method: str, config: Optional[TrainConfig] = None):
    """Pick C by the IPS-estimated DCG risk on validation clicks.

    Ties go to the smaller C. Returns ``(C, model, info)`` where ``info``
    maps every tried C to its validation risk (or the error message).
    """
    config = config or TrainConfig()
    if not c_grid:
        raise ValueError("empty C grid")
    best = None
    info = {}
    for C in sorted(set(float(c) for c in c_grid)):
        cfg = replace(config, C=C)
        try:
            model, iters = _fit(method, train_log, cfg)
        except Exception as exc:  # a failed grid point must not sink the whole search
            logger.warning("%s with C=%g failed: %s", method, C, exc)
            info[C] = repr(exc)
            continue
        risk = ips_risk(val_log, model, DCG)
        info[C] = risk
        if best is None or risk < best[0]:
            best = (risk, C, model, iters)
    if best is None:
        raise RuntimeError(f"every C failed for {method}: {info}")
    return best[1], best[2], {"val_risk": best[0], "ccp_iters": best[3], "grid": info}


def _fit(method: str, log: ClickLog, cfg: TrainConfig):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        if method == "proprank":
            return train_proprank(log, cfg), 0
        if method == "propdcg":
            model, trace = train_propdcg(log, cfg)
            return model, trace.num_iterations
        if method == "naive_propdcg":
            model, trace = train_propdcg(log.with_propensities(np.ones(len(log))), cfg)
            return model, trace.num_iterations
    raise ValueError(f"unknown linear method {method!r}")


def train_skyline(train: Dataset, val: Dataset, c_grid: Sequence[float],
                  config: Optional[TrainConfig] = None):
    """Full-information linear ranker, C picked by validation DCG."""
    config = config or TrainConfig()
    log = full_information_log(train)
    best = None
    for C in sorted(set(c_grid)):
        model, _ = _fit("propdcg", log, replace(config, C=C))
        score = -mean_full_info(val, model, DCG)
        if best is None or score > best[0]:
            best = (score, C, model)
    return best[2], best[1]


def _cell_config(kind: str, value: float, sim: SimulationConfig) -> SimulationConfig:
    if kind in ("learning_curve", "deep_vs_linear"):
        if value < 1 or int(value) != value:
            raise ValueError("learning-curve grid values are pass counts")
        return replace(sim, passes=int(value))
    if kind == "bias_sweep":
        return replace(sim, eta=value, assumed_eta=value)
    if kind == "noise_sweep":
        return replace(sim, eps_minus=value)
    if kind == "misspecification_sweep":
        return replace(sim, assumed_eta=value)
    return sim


@dataclass
class _Shared:
    """Data and reference rankers common to every run of an experiment."""

    train: Dataset
    val: Dataset
    test: Dataset
    production: object
    skyline: object
    skyline_c: float


@dataclass
class _RunJob:
    plan: ExperimentPlan
    shared: _Shared
    sim: SimulationConfig
    train: TrainConfig
    sgd: SgdConfig
    run: int


def _evaluate(report, value, run, name, model, test):
    dcg, avg_rank = evaluate_ranker(test, model)
    report.add(value, run, name, "test_dcg", dcg)
    report.add(value, run, name, "test_avgrank", avg_rank)


def prepare_data(plan: ExperimentPlan, spec: SyntheticSpec,
                 train_config: Optional[TrainConfig] = None) -> _Shared:
    """Synthetic splits, production ranker and skyline, all seeded from the master seed.

    Independent runs re-sample clicks on these fixed splits.
    """
    master = plan.master_seed
    train, val, test = generate_synthetic(replace(spec, seed=derive_seed(master, "data")))
    production = train_production_ranker(train, plan.production_fraction,
                                         derive_seed(master, "production"))
    skyline, sky_c = train_skyline(train, val, plan.c_grid, train_config)
    return _Shared(train, val, test, production, skyline, sky_c)


def _run_one(job: _RunJob) -> RunReport:
    plan, run, shared = job.plan, job.run, job.shared
    report = RunReport(plan.kind)
    for gi, value in enumerate(plan.grid):
        t0 = time.perf_counter()
        try:
            _evaluate(report, value, run, "production", shared.production, shared.test)
            _evaluate(report, value, run, "skyline", shared.skyline, shared.test)
            report.add(value, run, "skyline", "chosen_C", shared.skyline_c)
            _run_cell(report, job, gi, value)
        except Exception as exc:
            logger.exception("cell %s=%g run %d failed", plan.kind, value, run)
            report.failures.append({"grid_value": value, "run": run, "error": repr(exc)})
            report.add(value, run, "cell", "failed", 1.0)
        report.timings.append({"grid_value": value, "run": run,
                               "seconds": time.perf_counter() - t0})
    return report


def _run_cell(report, job, gi, value):
    plan, run, master = job.plan, job.run, job.plan.master_seed
    train, val, test = job.shared.train, job.shared.val, job.shared.test
    production = job.shared.production
    sim = _cell_config(plan.kind, value, job.sim)
    sim_train = replace(sim, seed=derive_seed(master, plan.kind, gi, run, "train"))
    sim_val = replace(sim, seed=derive_seed(master, plan.kind, gi, run, "val"))
    train_log = simulate_clicks(train, production, sim_train)
    val_log = simulate_clicks(val, production, sim_val)
    report.add(value, run, "clicks", "train_clicks", len(train_log))
    if len(train_log) == 0 or len(val_log) == 0:
        raise RuntimeError("simulation produced no clicks")
    model_seed = derive_seed(master, plan.kind, gi, run, "model") % 2**31
    tcfg = replace(job.train, seed=model_seed)

    if plan.kind == "ccp_diagnostics":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            model, trace = train_propdcg(train_log, replace(tcfg, C=value))
        for it in trace.iterations:
            report.add(value, run, "propdcg", f"objective_iter{it.iteration:02d}", it.objective)
            report.add(value, run, "propdcg", f"snips_dcg_iter{it.iteration:02d}", it.snips_dcg)
        report.add(value, run, "propdcg", "ccp_iters", trace.num_iterations)
        _evaluate(report, value, run, "propdcg", model, test)
        return

    for method in plan.models:
        if method == "deep_propdcg":
            model, _ = train_deep(train_log, replace(job.sgd, seed=model_seed))
            report.add(value, run, method, "val_ips_dcg", ips_risk(val_log, model, DCG))
        else:
            C, model, info = cross_validate_c(train_log, val_log, plan.c_grid, method, tcfg)
            report.add(value, run, method, "val_ips_dcg", info["val_risk"])
            report.add(value, run, method, "chosen_C", C)
            if method != "proprank":
                report.add(value, run, method, "ccp_iters", info["ccp_iters"])
        _evaluate(report, value, run, method, model, test)


def run_experiment(plan: ExperimentPlan, spec: SyntheticSpec,
                   sim: Optional[SimulationConfig] = None,
                   train: Optional[TrainConfig] = None,
                   sgd: Optional[SgdConfig] = None,
                   threads: int = 1) -> RunReport:
    """Run every (grid value, run) cell of ``plan``; failures are recorded, not raised."""
    train = train or TrainConfig()
    shared = prepare_data(plan, spec, train)
    jobs = [_RunJob(plan, shared, sim or SimulationConfig(), train, sgd or SgdConfig(), run)
            for run in range(plan.runs)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(_run_one, jobs))
    else:
        parts = [_run_one(job) for job in jobs]
    report = RunReport(plan.kind)
    for part in parts:
        report.rows.extend(part.rows)
        report.failures.extend(part.failures)
        report.timings.extend(part.timings)
    report.rows.sort(key=lambda r: (r[1], r[2], r[3], r[4]))
    return report


def _format_value(v: float) -> str:
    return repr(float(v))


def write_csv(report: RunReport, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(CSV_HEADER)
        for exp, grid_value, run, model, metric, value in report.rows:
            out.writerow([exp, _format_value(grid_value), run, model, metric, _format_value(value)])


def read_csv(path) -> RunReport:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise ValueError(f"{path}: not a report CSV")
    exp = rows[1][0] if len(rows) > 1 else ""
    report = RunReport(exp)
    for r in rows[1:]:
        report.rows.append((r[0], float(r[1]), int(r[2]), r[3], r[4], float(r[5])))
    return report


def summarize(report: RunReport) -> List[Dict]:
    """Mean and sample standard deviation over runs for every (grid, model, metric) cell."""
    cells: Dict[Tuple, List[float]] = {}
    for _, grid_value, _, model, metric, value in report.rows:
        cells.setdefault((grid_value, model, metric), []).append(value)
    out = []
    for (grid_value, model, metric), vals in sorted(cells.items()):
        sd = statistics.stdev(vals) if len(vals) > 1 else None
        out.append({"grid_value": grid_value, "model": model, "metric": metric,
                    "mean": statistics.fmean(vals), "sd": sd, "n": len(vals),
                    "median": statistics.median(vals)})
    return out


def write_report(report: RunReport, out_dir, fmt: str = "both") -> List[str]:
    """Write ``report.csv`` and/or ``summary.json`` (plus the raw ``report.json``)."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if fmt in ("csv", "both"):
        path = os.path.join(out_dir, "report.csv")
        write_csv(report, path)
        written.append(path)
    if fmt in ("json", "both"):
        path = os.path.join(out_dir, "summary.json")
        with open(path, "w") as fh:
            json.dump({"experiment": report.experiment, "cells": summarize(report),
                       "failures": report.failures}, fh, indent=1)
        written.append(path)
        path = os.path.join(out_dir, "report.json")
        with open(path, "w") as fh:
            fh.write(report.to_json())
        written.append(path)
    return written


def median_by_model(report: RunReport, metric: str = "test_dcg", grid_value=None) -> Dict[str, float]:
    models = sorted({r[3] for r in report.rows if r[4] == metric})
    out = {}
    for m in models:
        vals = report.values(m, metric, grid_value)
        if vals:
            out[m] = float(np.median(vals))
    return out

