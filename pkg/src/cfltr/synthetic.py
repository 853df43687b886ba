"""Synthetic full-information ranking data standing in for LETOR-style corpora."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .ltr_core import Dataset, QueryInstance


@dataclass(frozen=True)
class SyntheticSpec:
    """Generative process for candidates and binary relevances.

    Features are i.i.d. standard normal. A candidate's latent score is a
    linear projection ``u.x``; with ``nonlinear_weight`` w > 0 it becomes
    ``u.x + w * max(v.x - u.x - second_intent_offset, 0)`` for a direction v
    orthogonal to u, so at w = 1 it is ``max(u.x, v.x - offset)``, which no
    linear scorer reproduces. A per-query shift is added and a candidate is
    relevant with probability ``sigmoid(relevance_scale * (latent -
    relevance_bias))``. Queries may end up with no relevant candidate.
    """

    num_queries: int = 300
    num_val_queries: int = 100
    num_test_queries: int = 300
    min_candidates: int = 10
    max_candidates: int = 10
    feature_dim: int = 10
    nonlinear_weight: float = 0.0
    second_intent_offset: float = 0.5
    relevance_scale: float = 4.0
    relevance_bias: float = 1.5
    query_shift_sd: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if min(self.num_queries, self.num_val_queries, self.num_test_queries) < 1:
            raise ValueError("every split needs at least one query")
        if not 1 <= self.min_candidates <= self.max_candidates:
            raise ValueError("need 1 <= min_candidates <= max_candidates")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be positive")
        if not 0 <= self.nonlinear_weight <= 1:
            raise ValueError("nonlinear_weight must lie in [0, 1]")


def _latent(x: np.ndarray, direction: np.ndarray, second: np.ndarray,
            nonlinear_weight: float, offset: float) -> np.ndarray:
    linear = x @ direction
    if nonlinear_weight == 0:
        return linear
    # a second intent: candidates far along another direction are relevant too
    return linear + nonlinear_weight * np.maximum(x @ second - linear - offset, 0.0)


def generate_synthetic(spec: SyntheticSpec) -> Tuple[Dataset, Dataset, Dataset]:
    """Train, validation and test splits drawn from one generative process.

    Query ids are globally unique across the three splits.
    """
    rng = np.random.default_rng(spec.seed)
    direction = rng.normal(size=spec.feature_dim)
    direction /= np.linalg.norm(direction)
    second = rng.normal(size=spec.feature_dim)
    if spec.feature_dim > 1:
        second -= (second @ direction) * direction
    second /= np.linalg.norm(second)

    splits = []
    next_id = 0
    for size in (spec.num_queries, spec.num_val_queries, spec.num_test_queries):
        queries = []
        for _ in range(size):
            m = int(rng.integers(spec.min_candidates, spec.max_candidates + 1))
            x = rng.normal(size=(m, spec.feature_dim))
            shift = rng.normal(scale=spec.query_shift_sd) if spec.query_shift_sd > 0 else 0.0
            latent = _latent(x, direction, second, spec.nonlinear_weight,
                             spec.second_intent_offset) + shift
            p = 1.0 / (1.0 + np.exp(-spec.relevance_scale * (latent - spec.relevance_bias)))
            rel = (rng.random(m) < p).astype(np.int8)
            queries.append(QueryInstance(next_id, x, rel))
            next_id += 1
        splits.append(Dataset(tuple(queries), spec.feature_dim))
    return tuple(splits)
