"""Queries, rankings, linear scoring and SVMlight/LETOR ingestion."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Hashable, Iterable, List, Optional, Sequence

import numpy as np


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


@dataclass(frozen=True)
class QueryInstance:
    """One query: a candidate feature matrix and optional binary relevances.

    Row ``j`` of ``features`` is the feature vector of candidate ``j``.
    """

    query_id: Hashable
    features: np.ndarray
    relevances: Optional[np.ndarray] = None

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats.reshape(1, -1) if feats.size else feats.reshape(0, 0)
        if feats.ndim != 2 or feats.shape[0] == 0:
            raise DataError(f"query {self.query_id!r}: candidate set must be non-empty")
        bad = ~np.isfinite(feats)
        if bad.any():
            cand = int(np.argwhere(bad)[0][0])
            raise DataError(f"query {self.query_id!r}: non-finite feature on candidate {cand}")
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)
        if self.relevances is not None:
            rel = np.asarray(self.relevances)
            if rel.shape != (feats.shape[0],):
                raise DataError(
                    f"query {self.query_id!r}: {rel.size} relevances for {feats.shape[0]} candidates"
                )
            if not np.all((rel == 0) | (rel == 1)):
                raise DataError(f"query {self.query_id!r}: relevances must be binary")
            rel = rel.astype(np.int8)
            rel.setflags(write=False)
            object.__setattr__(self, "relevances", rel)

    @property
    def num_candidates(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class Ranking:
    """A permutation of candidate indices; ``order[0]`` is the top position."""

    order: tuple

    def __post_init__(self):
        order = tuple(int(i) for i in self.order)
        if sorted(order) != list(range(len(order))):
            raise ValueError(f"not a permutation: {order}")
        object.__setattr__(self, "order", order)
        ranks = [0] * len(order)
        for pos, cand in enumerate(order):
            ranks[cand] = pos + 1
        object.__setattr__(self, "_ranks", tuple(ranks))

    def __len__(self):
        return len(self.order)

    @property
    def ranks(self) -> tuple:
        """1-based rank of every candidate (inverse permutation)."""
        return self._ranks


@dataclass(frozen=True)
class Dataset:
    queries: tuple
    feature_dim: int
    _index: Dict[Hashable, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        queries = tuple(self.queries)
        object.__setattr__(self, "queries", queries)
        index = {}
        for pos, q in enumerate(queries):
            if q.dim != self.feature_dim:
                raise DataError(
                    f"query {q.query_id!r} has dim {q.dim}, dataset dim is {self.feature_dim}"
                )
            if q.query_id in index:
                raise DataError(f"duplicate query id {q.query_id!r}")
            index[q.query_id] = pos
        object.__setattr__(self, "_index", index)

    def __len__(self):
        return len(self.queries)

    def __iter__(self):
        return iter(self.queries)

    def query(self, query_id) -> QueryInstance:
        try:
            return self.queries[self._index[query_id]]
        except KeyError:
            raise DataError(f"unknown query id {query_id!r}") from None

    def position(self, query_id) -> int:
        try:
            return self._index[query_id]
        except KeyError:
            raise DataError(f"unknown query id {query_id!r}") from None

    @property
    def has_relevances(self) -> bool:
        return all(q.relevances is not None for q in self.queries)

    def subset(self, positions: Iterable[int]) -> "Dataset":
        return Dataset(tuple(self.queries[i] for i in positions), self.feature_dim)


@dataclass(frozen=True)
class LinearModel:
    """Linear scoring function f(x, y) = w . phi(x, y)."""

    w: np.ndarray

    def __post_init__(self):
        w = np.array(self.w, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(w)):
            raise ValueError("model weights must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    @property
    def dim(self) -> int:
        return self.w.shape[0]

    @classmethod
    def zeros(cls, dim: int) -> "LinearModel":
        return cls(np.zeros(dim))

    def scores(self, query: QueryInstance) -> np.ndarray:
        if query.dim != self.dim:
            raise ValueError(f"model dim {self.dim} != feature dim {query.dim}")
        return query.features @ self.w

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(f"{self.dim}\n")
            for v in self.w:
                fh.write(f"{float(v)!r}\n")

    @classmethod
    def load(cls, path) -> "LinearModel":
        with open(path) as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
        if not lines:
            raise DataError(f"{path}: empty model file")
        dim = int(lines[0])
        if len(lines) - 1 != dim:
            raise DataError(f"{path}: header says {dim} weights, found {len(lines) - 1}")
        return cls(np.array([float(v) for v in lines[1:]]))


def rank_by_scores(scores: Sequence[float], query_id=None) -> Ranking:
    """Sort candidates by descending score; ties go to the lower index."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise ValueError("cannot rank an empty candidate set")
    bad = np.flatnonzero(~np.isfinite(s))
    if bad.size:
        where = f"query {query_id!r}, " if query_id is not None else ""
        raise ValueError(f"non-finite score at {where}candidate {int(bad[0])}")
    # stable sort on -s keeps index order among equal scores
    return Ranking(tuple(np.argsort(-s, kind="stable")))


def rank_of(candidate: int, ranking: Ranking) -> int:
    if not 0 <= candidate < len(ranking):
        raise IndexError(f"candidate {candidate} out of range for {len(ranking)} candidates")
    return ranking.ranks[candidate]


def score_linear(model: LinearModel, features) -> float:
    phi = np.asarray(features, dtype=np.float64).reshape(-1)
    if phi.shape[0] != model.dim:
        raise ValueError(f"model dim {model.dim} != feature dim {phi.shape[0]}")
    return float(model.w @ phi)


def _parse_qid(token: str):
    raw = token[4:]
    try:
        return int(raw)
    except ValueError:
        return raw


def load_svmlight(path) -> Dataset:
    """Read an SVMlight/LETOR ranking file.

    Lines are ``<rel> qid:<q> <idx>:<val> ... # comment``. Queries are grouped
    by qid in order of first appearance, relevance is binarized as ``rel >= 1``
    and feature indices are 1-based in the file.
    """
    rows: Dict[Hashable, List] = {}
    max_idx = 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            tokens = body.split()
            try:
                rel = float(tokens[0])
                if len(tokens) < 2 or not tokens[1].startswith("qid:"):
                    raise ValueError("missing qid")
                qid = _parse_qid(tokens[1])
                feats = {}
                for tok in tokens[2:]:
                    k, v = tok.split(":", 1)
                    idx = int(k)
                    if idx < 1:
                        raise ValueError(f"feature index {idx} < 1")
                    val = float(v)
                    if not math.isfinite(val):
                        raise ValueError(f"non-finite value for feature {idx}")
                    feats[idx] = val
                    max_idx = max(max_idx, idx)
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}:{lineno}: malformed line ({exc})") from None
            rows.setdefault(qid, []).append((1 if rel >= 1 else 0, feats))

    queries = []
    for qid, docs in rows.items():
        x = np.zeros((len(docs), max_idx))
        for j, (_, feats) in enumerate(docs):
            for idx, val in feats.items():
                x[j, idx - 1] = val
        queries.append(QueryInstance(qid, x, np.array([r for r, _ in docs])))
    return Dataset(tuple(queries), max_idx)


def save_svmlight(dataset: Dataset, path) -> None:
    """Write ``dataset`` in SVMlight format (dense, every index written)."""
    with open(path, "w") as fh:
        for q in dataset:
            rels = q.relevances if q.relevances is not None else np.zeros(q.num_candidates, int)
            for j in range(q.num_candidates):
                tokens = [f"{int(rels[j])}", f"qid:{q.query_id}"]
                tokens += [f"{k + 1}:{float(v)!r}" for k, v in enumerate(q.features[j])]
                fh.write(" ".join(tokens) + "\n")

