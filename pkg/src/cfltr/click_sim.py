"""Position-based click simulation on full-information ranking data.

A candidate shown at rank r is examined with probability (1/r)^eta. An
examined relevant candidate is clicked with probability eps_plus, an
examined irrelevant one with probability eps_minus. Every click is logged
with the propensity (1/r)^assumed_eta, which equals the true examination
probability only when the assumed severity matches the real one.

Randomness comes from numpy's Philox counter-based generator. Each
(query, pass) pair gets its own stream keyed by ``(seed, query index,
pass)``, so logs do not depend on the order in which queries are simulated.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .linear_ccp import TrainConfig, train_proprank
from .ltr_core import DataError, Dataset, LinearModel, Ranking, rank_by_scores
from .metrics import ClickLog, ClickRecord


@dataclass(frozen=True)
class PositionBiasModel:
    eta: float = 1.0

    def __post_init__(self):
        if not self.eta >= 0:
            raise ValueError("eta must be >= 0")

    def propensity(self, rank: int) -> float:
        return propensity(self, rank)


@dataclass(frozen=True)
class NoiseModel:
    eps_minus: float = 0.1
    eps_plus: float = 1.0

    def __post_init__(self):
        if not 0 <= self.eps_minus <= 1:
            raise ValueError("eps_minus must lie in [0, 1]")
        if not 0 < self.eps_plus <= 1:
            raise ValueError("eps_plus must lie in (0, 1]")


@dataclass(frozen=True)
class SimulationConfig:
    eta: float = 1.0
    eps_minus: float = 0.1
    eps_plus: float = 1.0
    passes: int = 1
    seed: int = 0
    assumed_eta: Optional[float] = None

    def __post_init__(self):
        PositionBiasModel(self.eta)
        NoiseModel(self.eps_minus, self.eps_plus)
        if int(self.passes) != self.passes or self.passes < 1:
            raise ValueError("passes must be a positive integer")
        if self.assumed_eta is None:
            object.__setattr__(self, "assumed_eta", self.eta)
        elif not self.assumed_eta >= 0:
            raise ValueError("assumed_eta must be >= 0")


def propensity(model: PositionBiasModel, rank: int) -> float:
    """Examination probability (1/rank)^eta."""
    if not rank >= 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    return (1.0 / rank) ** model.eta


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed & (2**64 - 1), *key])))


def full_information_log(dataset: Dataset) -> ClickLog:
    """Every relevant candidate as a click with propensity 1 (no position bias)."""
    records = []
    for q in dataset:
        if q.relevances is None:
            raise DataError(f"query {q.query_id!r} has no relevances")
        identity = Ranking(tuple(range(q.num_candidates)))
        for y in np.flatnonzero(q.relevances):
            records.append(ClickRecord(q.query_id, int(y), identity, 1.0))
    return ClickLog(tuple(records), dataset)


def train_production_ranker(dataset: Dataset, fraction: float = 0.01, seed: int = 0,
                            C: float = 1.0) -> LinearModel:
    """Deliberately weak linear ranker fit on ``ceil(fraction * N)`` random queries.

    The subsample is drawn from queries with at least one relevant candidate
    and trained as full-information SVM PropRank (every relevant candidate a
    click, all propensities 1).
    """
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    if not dataset.has_relevances:
        raise DataError("production ranker needs a fully labelled dataset")
    size = math.ceil(fraction * len(dataset))
    if size == 0:
        raise DataError("empty subsample for the production ranker")
    eligible = np.array([i for i, q in enumerate(dataset) if q.relevances.any()], dtype=np.int64)
    if eligible.size == 0:
        raise DataError("no query has a relevant candidate")
    rng = _stream(seed, 0x5052)
    picked = np.sort(rng.permutation(eligible)[:size])
    log = full_information_log(dataset.subset(picked))
    return train_proprank(log, TrainConfig(C=C, seed=seed))


def simulate_clicks(dataset: Dataset, production, config: SimulationConfig) -> ClickLog:
    """Sample a click log from the position-based model.

    The presented ranking of a query is fixed across passes; only the clicks
    are re-sampled.
    """
    if not dataset.has_relevances:
        raise DataError("click simulation needs relevances")
    records = []
    for qpos, q in enumerate(dataset):
        presented = rank_by_scores(production.scores(q), q.query_id)
        ranks = np.asarray(presented.ranks, dtype=np.float64)
        eps = np.where(q.relevances == 1, config.eps_plus, config.eps_minus)
        click_prob = (1.0 / ranks) ** config.eta * eps
        logged = (1.0 / ranks) ** config.assumed_eta
        for p in range(config.passes):
            u = _stream(config.seed, qpos, p).random(q.num_candidates)
            # record in presentation order
            for y in presented.order:
                if u[y] < click_prob[y]:
                    records.append(ClickRecord(q.query_id, int(y), presented, float(logged[y])))
    return ClickLog(tuple(records), dataset)


def save_click_log(log: ClickLog, config: SimulationConfig, path) -> None:
    """JSON-lines: a header with the simulation config, then one object per click."""
    with open(path, "w") as fh:
        fh.write(json.dumps({"config": asdict(config)}) + "\n")
        for r in log.records:
            fh.write(json.dumps({
                "query_id": r.query_id,
                "clicked_candidate": r.clicked_candidate,
                "presented_order": list(r.presented_ranking.order),
                "propensity": r.propensity,
            }) + "\n")


def load_click_log(path, dataset: Dataset):
    """Inverse of :func:`save_click_log`; returns ``(log, config)``."""
    records = []
    config = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if "config" in obj:
                    config = SimulationConfig(**obj["config"])
                    continue
                records.append(ClickRecord(
                    obj["query_id"], int(obj["clicked_candidate"]),
                    Ranking(tuple(obj["presented_order"])), float(obj["propensity"]),
                ))
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: bad click record ({exc})") from None
    return ClickLog(tuple(records), dataset), config
