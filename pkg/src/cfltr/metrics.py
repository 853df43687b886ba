"""Additive rank metrics and their propensity-weighted click estimators.

All metrics are losses of the form ``sum_y weight(rank(y)) * rel(y)``, so
lower is better (DCG and friends carry a negative sign).
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Hashable, Iterable, Optional, Sequence, Tuple

import numpy as np

from .ltr_core import DataError, Dataset, QueryInstance, Ranking, rank_by_scores

MAX_ORACLE_CANDIDATES = 12
DEFAULT_CLIP = 0.01


@dataclass(frozen=True)
class RankWeighting:
    """Rank weighting function lambda(rank) of an additive metric.

    ``kind`` is one of ``"avgrank"``, ``"dcg"``, ``"prec"`` or ``"rbp"``.
    ``log_base`` applies to DCG only, ``k`` to Prec@k and ``p`` to RBP.
    """

    kind: str
    log_base: float = 2.0
    k: int = 10
    p: float = 0.8

    def __post_init__(self):
        if self.kind not in ("avgrank", "dcg", "prec", "rbp"):
            raise ValueError(f"unknown rank weighting {self.kind!r}")
        if self.kind == "dcg" and not self.log_base > 1:
            raise ValueError("DCG log base must be > 1")
        if self.kind == "prec" and (int(self.k) != self.k or self.k < 1):
            raise ValueError("Prec@k needs a positive integer k")
        if self.kind == "rbp" and not 0 < self.p < 1:
            raise ValueError("RBP persistence p must lie in (0, 1)")

    @classmethod
    def avg_rank(cls):
        return cls("avgrank")

    @classmethod
    def dcg(cls, log_base: float = 2.0):
        return cls("dcg", log_base=log_base)

    @classmethod
    def dcg_ln(cls):
        return cls("dcg", log_base=math.e)

    @classmethod
    def prec_at(cls, k: int):
        return cls("prec", k=k)

    @classmethod
    def rbp(cls, p: float):
        return cls("rbp", p=p)

    @classmethod
    def parse(cls, text: str) -> "RankWeighting":
        """Build from strings like ``avgrank``, ``dcg``, ``dcg:e``, ``prec:5``, ``rbp:0.8``."""
        name, _, arg = text.strip().lower().partition(":")
        if name == "avgrank":
            return cls.avg_rank()
        if name == "dcg":
            if arg in ("", "2"):
                return cls.dcg()
            return cls.dcg_ln() if arg in ("e", "ln") else cls.dcg(float(arg))
        if name == "prec":
            return cls.prec_at(int(arg or 10))
        if name == "rbp":
            return cls.rbp(float(arg or 0.8))
        raise ValueError(f"unknown rank weighting {text!r}")

    def __call__(self, rank: float) -> float:
        return weight(self, rank)


AVG_RANK = RankWeighting.avg_rank()
DCG = RankWeighting.dcg()
DCG_LN = RankWeighting.dcg_ln()


def weight(lam: RankWeighting, rank: float) -> float:
    """lambda(rank); ``rank`` may be any real >= 1 so it can bound a hinge sum."""
    if not rank >= 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    if lam.kind == "avgrank":
        return float(rank)
    if lam.kind == "dcg":
        return -1.0 / math.log(1.0 + rank, lam.log_base)
    if lam.kind == "prec":
        return -1.0 / lam.k if rank <= lam.k else 0.0
    # standard RBP discount; the (1-p)/p**rank variant is not monotone
    return -(1.0 - lam.p) * lam.p ** rank


def weight_array(lam: RankWeighting, ranks) -> np.ndarray:
    r = np.asarray(ranks, dtype=np.float64)
    if np.any(~(r >= 1)):
        raise ValueError("ranks must be >= 1")
    if lam.kind == "avgrank":
        return r.copy()
    if lam.kind == "dcg":
        return -math.log(lam.log_base) / np.log1p(r)
    if lam.kind == "prec":
        return np.where(r <= lam.k, -1.0 / lam.k, 0.0)
    return -(1.0 - lam.p) * lam.p ** r


def weight_derivative(lam: RankWeighting, ranks) -> np.ndarray:
    """d lambda / d rank at real-valued ranks (Prec@k is flat almost everywhere)."""
    r = np.asarray(ranks, dtype=np.float64)
    if lam.kind == "avgrank":
        return np.ones_like(r)
    if lam.kind == "dcg":
        log1p = np.log1p(r)
        return math.log(lam.log_base) / ((1.0 + r) * log1p ** 2)
    if lam.kind == "prec":
        return np.zeros_like(r)
    return -(1.0 - lam.p) * lam.p ** r * math.log(lam.p)


def full_info_loss(ranking: Ranking, relevances: Sequence[int], lam: RankWeighting) -> float:
    rel = np.asarray(relevances)
    if rel.shape[0] != len(ranking):
        raise ValueError(f"{rel.shape[0]} relevances for a ranking of {len(ranking)}")
    total = 0.0
    for cand in np.flatnonzero(rel):
        total += weight(lam, ranking.ranks[cand])
    return total


@dataclass(frozen=True)
class ClickRecord:
    """One logged click with the propensity of its observation."""

    query_id: Hashable
    clicked_candidate: int
    presented_ranking: Ranking
    propensity: float

    def __post_init__(self):
        if not 0 < self.propensity <= 1:
            raise ValueError(f"propensity must lie in (0, 1], got {self.propensity}")
        if not 0 <= self.clicked_candidate < len(self.presented_ranking):
            raise ValueError(
                f"clicked candidate {self.clicked_candidate} not in presented ranking"
            )


@dataclass(frozen=True)
class ClickLog:
    records: tuple
    dataset: Dataset

    def __post_init__(self):
        records = tuple(self.records)
        object.__setattr__(self, "records", records)
        for rec in records:
            q = self.dataset.query(rec.query_id)
            if rec.clicked_candidate >= q.num_candidates:
                raise DataError(
                    f"click on candidate {rec.clicked_candidate} of query {rec.query_id!r}, "
                    f"which has {q.num_candidates} candidates"
                )
            if len(rec.presented_ranking) != q.num_candidates:
                raise DataError(f"presented ranking length mismatch for query {rec.query_id!r}")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def with_propensities(self, propensities: Iterable[float]) -> "ClickLog":
        recs = tuple(
            ClickRecord(r.query_id, r.clicked_candidate, r.presented_ranking, float(p))
            for r, p in zip(self.records, propensities)
        )
        return ClickLog(recs, self.dataset)

    def propensities(self) -> np.ndarray:
        return np.array([r.propensity for r in self.records], dtype=np.float64)


def clip_propensities(log: ClickLog, tau: float = DEFAULT_CLIP) -> ClickLog:
    """Floor every propensity at ``tau`` (trades variance for bias)."""
    if not 0 < tau <= 1:
        raise ValueError("clip threshold must lie in (0, 1]")
    return log.with_propensities(np.maximum(log.propensities(), tau))


def ips_loss(ranking: Ranking, clicks: Iterable[ClickRecord], lam: RankWeighting) -> float:
    """Propensity-weighted loss of ``ranking`` for the clicks of a single query."""
    total = 0.0
    ranks = ranking.ranks
    for c in clicks:
        if not c.propensity > 0:
            raise ValueError("propensity must be positive")
        total += weight(lam, ranks[c.clicked_candidate]) / c.propensity
    return total


def _system_ranks(log: ClickLog, system) -> np.ndarray:
    """Rank of every clicked candidate under the system's score ordering."""
    cache = {}
    out = np.empty(len(log.records))
    for i, rec in enumerate(log.records):
        ranking = cache.get(rec.query_id)
        if ranking is None:
            query = log.dataset.query(rec.query_id)
            ranking = rank_by_scores(system_scores(system, query), rec.query_id)
            cache[rec.query_id] = ranking
        out[i] = ranking.ranks[rec.clicked_candidate]
    return out


def system_scores(system, query: QueryInstance) -> np.ndarray:
    """Scores of a ranker: anything with ``.scores(query)`` or a callable on features."""
    if hasattr(system, "scores"):
        return system.scores(query)
    return np.asarray(system(query.features), dtype=np.float64)


def _weighted_terms(log, system, lam, clip):
    if len(log.records) == 0:
        raise ValueError("click log is empty")
    q = log.propensities()
    if clip is not None:
        q = np.maximum(q, clip)
    return weight_array(lam, _system_ranks(log, system)), q


def ips_risk(log: ClickLog, system, lam: RankWeighting, clip: Optional[float] = None) -> float:
    """Unbiased IPS estimate of the risk of ``system``; every click is its own term."""
    lam_vals, q = _weighted_terms(log, system, lam, clip)
    return float(np.sum(lam_vals / q) / len(q))


def snips_risk(log: ClickLog, system, lam: RankWeighting, clip: Optional[float] = None) -> float:
    """Self-normalized IPS: divide by the total importance weight instead of n."""
    lam_vals, q = _weighted_terms(log, system, lam, clip)
    return float(np.sum(lam_vals / q) / np.sum(1.0 / q))


def expected_ips_oracle(
    query: QueryInstance,
    presented: Ranking,
    eval_ranking: Ranking,
    propensity_fn: Callable[[int], float],
    lam: RankWeighting,
) -> float:
    """Exact expectation of :func:`ips_loss` over all observation patterns.

    Each candidate is observed independently with probability
    ``propensity_fn(presented rank)``; a click occurs on observed relevant
    candidates. Enumerates all ``2**|Y|`` patterns, so test scale only.
    """
    m = query.num_candidates
    if m > MAX_ORACLE_CANDIDATES:
        raise ValueError(f"oracle enumerates 2^{m} patterns; limit is {MAX_ORACLE_CANDIDATES}")
    if query.relevances is None:
        raise ValueError("oracle needs known relevances")
    obs_prob = [float(propensity_fn(presented.ranks[y])) for y in range(m)]
    for y, p in enumerate(obs_prob):
        if not 0 < p <= 1:
            raise ValueError(f"observation probability of candidate {y} is {p}")
    total = 0.0
    for pattern in itertools.product((0, 1), repeat=m):
        prob = 1.0
        clicks = []
        for y, seen in enumerate(pattern):
            prob *= obs_prob[y] if seen else 1.0 - obs_prob[y]
            if seen and query.relevances[y]:
                clicks.append(ClickRecord(query.query_id, y, presented, obs_prob[y]))
        if prob and clicks:
            total += prob * ips_loss(eval_ranking, clicks, lam)
    return total


def mean_full_info(dataset: Dataset, system, lam: RankWeighting) -> float:
    """Average per-query full-information loss of ``system`` over ``dataset``."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    total = 0.0
    for q in dataset:
        if q.relevances is None:
            raise ValueError(f"query {q.query_id!r} has no relevances")
        if not q.relevances.any():
            continue
        ranking = rank_by_scores(system_scores(system, q), q.query_id)
        total += float(np.sum(weight_array(lam, np.asarray(ranking.ranks))[q.relevances == 1]))
    return total / len(dataset)


def evaluate_ranker(dataset: Dataset, system) -> Tuple[float, float]:
    """Test-set (DCG, AvgRank): mean base-2 DCG as a gain and mean sum of relevant ranks."""
    return -mean_full_info(dataset, system, DCG), mean_full_info(dataset, system, AVG_RANK)
