"""Linear rankers trained on propensity-weighted clicks.

SVM PropRank is the convex case (lambda(r) = r). SVM PropDCG is a
difference of convex functions and is solved with the convex-concave
procedure: linearize the concave DCG part at the current slacks, which turns
each step into a PropRank-form problem with per-click weights q'.

The convex problems are solved in the dual by coordinate descent over
(click, candidate) pairs, stopping on a relative duality gap.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Union

import numba
import numpy as np

from .ltr_core import LinearModel, QueryInstance
from .metrics import DCG, DCG_LN, ClickLog, RankWeighting, snips_risk, weight_array

logger = logging.getLogger(__name__)

__all__ = [
    "LinearModel",
    "TrainConfig",
    "CcpTrace",
    "CcpDivergenceError",
    "PairData",
    "SubproblemResult",
    "hinge_slacks",
    "propdcg_objective",
    "ccp_qprime",
    "solve_convex_subproblem",
    "train_propdcg",
    "train_proprank",
]


class CcpDivergenceError(RuntimeError):
    """The true objective went up across a CCP step (inner solver failure)."""


@dataclass
class TrainConfig:
    C: float = 1.0
    max_ccp_iters: int = 20
    ccp_tol: float = 1e-4
    inner_tol: float = 1e-6
    max_epochs: int = 20000
    clip: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if not self.C > 0:
            raise ValueError("C must be positive")
        if self.max_ccp_iters < 1 or self.max_epochs < 1:
            raise ValueError("iteration budgets must be positive")
        if not (self.ccp_tol > 0 and self.inner_tol > 0):
            raise ValueError("tolerances must be positive")


@dataclass
class CcpIteration:
    iteration: int
    objective: float
    snips_dcg: float
    qprime_min: float = float("nan")
    qprime_median: float = float("nan")
    qprime_max: float = float("nan")
    inner_epochs: int = 0
    inner_converged: bool = True


@dataclass
class CcpTrace:
    iterations: List[CcpIteration] = field(default_factory=list)
    converged: bool = False

    @property
    def objectives(self) -> List[float]:
        return [it.objective for it in self.iterations]

    @property
    def num_iterations(self) -> int:
        """CCP steps taken (the entry for the starting point is not counted)."""
        return max(len(self.iterations) - 1, 0)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["iteration", "objective", "snips_dcg", "qprime_min",
                          "qprime_median", "qprime_max", "inner_epochs"])
            for it in self.iterations:
                out.writerow([it.iteration, repr(it.objective), repr(it.snips_dcg),
                              repr(it.qprime_min), repr(it.qprime_median),
                              repr(it.qprime_max), it.inner_epochs])


class PairData:
    """Click log flattened into (clicked, other) candidate pairs.

    Identical click records (same query, clicked candidate and propensity)
    are merged into one instance with a multiplicity, which leaves every
    objective in this module unchanged.
    """

    def __init__(self, log: ClickLog, clip: Optional[float] = None):
        if len(log) == 0:
            raise ValueError("click log is empty")
        dataset = log.dataset
        self.n = len(log)
        self.dim = dataset.feature_dim

        groups = {}
        for rec in log.records:
            q = rec.propensity if clip is None else max(rec.propensity, clip)
            key = (dataset.position(rec.query_id), rec.clicked_candidate, q)
            groups[key] = groups.get(key, 0) + 1
        keys = sorted(groups)

        row_start = {}
        block_of = {}
        blocks = []
        offset = 0
        for qpos in sorted({k[0] for k in keys}):
            row_start[qpos] = offset
            block_of[qpos] = len(blocks)
            feats = dataset.queries[qpos].features
            blocks.append(feats)
            offset += feats.shape[0]
        self.X = np.ascontiguousarray(np.vstack(blocks))
        self.block_start = np.array([row_start[qp] for qp in sorted(row_start)], dtype=np.int64)
        self.block_len = np.array([b.shape[0] for b in blocks], dtype=np.int64)
        self.inst_block = np.array([block_of[k[0]] for k in keys], dtype=np.int64)
        self.inst_clicked_row = np.array([row_start[k[0]] + k[1] for k in keys], dtype=np.int64)

        self.q = np.array([k[2] for k in keys])
        self.count = np.array([groups[k] for k in keys], dtype=np.float64)
        a, b, inst = [], [], []
        for i, (qpos, clicked, _) in enumerate(keys):
            start = row_start[qpos]
            m = dataset.queries[qpos].num_candidates
            others = [start + j for j in range(m) if j != clicked]
            a.extend([start + clicked] * len(others))
            b.extend(others)
            inst.extend([i] * len(others))
        self.pair_a = np.array(a, dtype=np.int64)
        self.pair_b = np.array(b, dtype=np.int64)
        self.pair_inst = np.array(inst, dtype=np.int64)
        self.num_instances = len(keys)
        self.inst_pair_start = np.concatenate(
            [[0], np.cumsum(self.block_len[self.inst_block] - 1)]).astype(np.int64)
        d = self.X[self.pair_a] - self.X[self.pair_b]
        self.pair_sqnorm = np.einsum("ij,ij->i", d, d)

    def slack_sums(self, w: np.ndarray) -> np.ndarray:
        """Sum of hinge slacks per instance."""
        s = self.X @ w
        hinge = np.maximum(1.0 - (s[self.pair_a] - s[self.pair_b]), 0.0)
        return np.bincount(self.pair_inst, weights=hinge, minlength=self.num_instances)

    def dual_to_primal(self, alpha: np.ndarray) -> np.ndarray:
        rows = self.X.shape[0]
        coef = np.bincount(self.pair_a, alpha, rows) - np.bincount(self.pair_b, alpha, rows)
        return self.X.T @ coef


def hinge_slacks(model: LinearModel, query: QueryInstance, clicked: int) -> np.ndarray:
    """Slack max(1 - (f(clicked) - f(y)), 0) for every other candidate y, in index order."""
    s = model.scores(query)
    if not 0 <= clicked < s.shape[0]:
        raise IndexError(f"clicked candidate {clicked} out of range")
    others = np.delete(s, clicked)
    return np.maximum(1.0 - (s[clicked] - others), 0.0)


def _objective(data: PairData, w: np.ndarray, C: float, lam: RankWeighting) -> float:
    sums = data.slack_sums(w)
    risk = np.sum(data.count / data.q * weight_array(lam, 1.0 + sums))
    return 0.5 * float(w @ w) + C / data.n * float(risk)


def propdcg_objective(model: LinearModel, log: Union[ClickLog, PairData], C: float,
                      lam: RankWeighting = DCG_LN) -> float:
    """Regularized hinge bound on the propensity-weighted risk of a linear model."""
    data = log if isinstance(log, PairData) else PairData(log)
    return _objective(data, model.w, C, lam)


def ccp_qprime(xi_sums, q) -> np.ndarray:
    """Per-click weights q' = q (s + 2) ln^2(s + 2) at slack sums s."""
    s = np.asarray(xi_sums, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if np.any(s < 0) or np.any(q <= 0):
        raise ValueError("need slack sums >= 0 and propensities > 0")
    t = s + 2.0
    return q * t * np.log(t) ** 2


def ccp_surrogate(data: PairData, w: np.ndarray, w_expand: np.ndarray, C: float) -> float:
    """DCG objective with its concave part linearized at ``w_expand``; an upper bound."""
    s_k = data.slack_sums(w_expand)
    qp = ccp_qprime(s_k, data.q)
    s = data.slack_sums(w)
    const = -np.sum(data.count / (data.q * np.log(s_k + 2.0)))
    lin = np.sum(data.count * (s - s_k) / qp)
    return 0.5 * float(w @ w) + C / data.n * float(const + lin)


@numba.njit(cache=True)
def _cd_solve(X, pair_a, pair_b, sqnorm, upper, alpha, w, eps, max_epochs, seed):
    """Dual coordinate descent with active-set shrinking.

    Runs until the projected-gradient spread over the full pair set drops
    below ``eps`` or ``max_epochs`` passes are done. Updates ``alpha`` and
    ``w`` in place and returns the number of passes.
    """
    np.random.seed(seed)
    npairs = pair_a.shape[0]
    dim = X.shape[1]
    active = np.arange(npairs)
    n_active = npairs
    pg_max_old = np.inf
    pg_min_old = -np.inf
    epochs = 0
    while epochs < max_epochs:
        epochs += 1
        np.random.shuffle(active[:n_active])
        pg_max = -np.inf
        pg_min = np.inf
        t = 0
        while t < n_active:
            k = active[t]
            ia = pair_a[k]
            ib = pair_b[k]
            g = -1.0
            for j in range(dim):
                g += w[j] * (X[ia, j] - X[ib, j])
            a_old = alpha[k]
            pg = 0.0
            if a_old == 0.0:
                if g > pg_max_old:
                    n_active -= 1
                    active[t], active[n_active] = active[n_active], active[t]
                    continue
                if g < 0.0:
                    pg = g
            elif a_old == upper[k]:
                if g < pg_min_old:
                    n_active -= 1
                    active[t], active[n_active] = active[n_active], active[t]
                    continue
                if g > 0.0:
                    pg = g
            else:
                pg = g
            if pg > pg_max:
                pg_max = pg
            if pg < pg_min:
                pg_min = pg
            if pg != 0.0:
                if sqnorm[k] > 0.0:
                    a_new = a_old - g / sqnorm[k]
                    if a_new < 0.0:
                        a_new = 0.0
                    elif a_new > upper[k]:
                        a_new = upper[k]
                else:
                    a_new = upper[k]
                delta = a_new - a_old
                if delta != 0.0:
                    alpha[k] = a_new
                    for j in range(dim):
                        w[j] += delta * (X[ia, j] - X[ib, j])
            t += 1
        if n_active == 0 or pg_max - pg_min <= eps:
            if n_active == npairs:
                break
            n_active = npairs
            pg_max_old = np.inf
            pg_min_old = -np.inf
            continue
        pg_max_old = pg_max if pg_max > 0.0 else np.inf
        pg_min_old = pg_min if pg_min < 0.0 else -np.inf
    return epochs


@dataclass
class SubproblemResult:
    model: LinearModel
    alpha: np.ndarray
    upper: np.ndarray
    objective: float
    gap: float
    epochs: int
    converged: bool


def _subproblem_value(data, w, upper_per_inst):
    return 0.5 * float(w @ w) + float(np.sum(upper_per_inst * data.slack_sums(w)))


def solve_convex_subproblem(
    log: Union[ClickLog, PairData],
    weights,
    C: float,
    warm_start: Union[LinearModel, SubproblemResult, None] = None,
    tol: float = 1e-6,
    max_epochs: int = 20000,
    seed: int = 0,
) -> SubproblemResult:
    """Minimize 1/2 |w|^2 + C/n sum_i (1/weights_i) sum_y xi_iy(w).

    ``weights`` holds one positive value per click instance of ``log`` (the
    raw propensities for PropRank, q' inside CCP). Stops once the relative
    duality gap drops below ``tol``; if ``max_epochs`` runs out first, the
    current iterate is returned with ``converged=False``.
    """
    data = log if isinstance(log, PairData) else PairData(log)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (data.num_instances,):
        raise ValueError(f"expected {data.num_instances} weights, got {weights.shape}")
    if np.any(~(weights > 0)):
        raise ValueError("subproblem weights must be positive")
    if not C > 0:
        raise ValueError("C must be positive")

    inst_upper = C * data.count / (data.n * weights)
    upper = inst_upper[data.pair_inst]

    if isinstance(warm_start, SubproblemResult) and warm_start.alpha.shape == upper.shape:
        ratio = np.divide(warm_start.alpha, warm_start.upper,
                          out=np.zeros_like(upper), where=warm_start.upper > 0)
        alpha = np.clip(ratio, 0.0, 1.0) * upper
    elif warm_start is not None:
        w0 = warm_start.model.w if isinstance(warm_start, SubproblemResult) else warm_start.w
        if w0.shape[0] != data.dim:
            raise ValueError("warm start dimension mismatch")
        # dual guess from complementary slackness at w0
        s = data.X @ w0
        margin = s[data.pair_a] - s[data.pair_b]
        alpha = np.where(margin < 1.0, upper, 0.0)
        alpha[margin == 1.0] *= 0.5
    else:
        alpha = np.zeros_like(upper)
    w = data.dual_to_primal(alpha)

    primal = _subproblem_value(data, w, inst_upper)
    gap = primal - (alpha.sum() - 0.5 * float(w @ w))
    epochs = 0
    eps = 1e-2
    round_no = 0
    converged = gap <= tol * max(primal, 1e-300)
    while not converged and epochs < max_epochs:
        epochs += _cd_solve(data.X, data.pair_a, data.pair_b, data.pair_sqnorm, upper,
                            alpha, w, eps, max_epochs - epochs, (seed * 1000 + round_no) % 2**32)
        round_no += 1
        w = data.dual_to_primal(alpha)  # cancel accumulated rounding in w
        primal = _subproblem_value(data, w, inst_upper)
        gap = primal - (alpha.sum() - 0.5 * float(w @ w))
        converged = gap <= tol * max(primal, 1e-300)
        eps = max(eps * 0.1, 1e-14)
    if not converged:
        warnings.warn(f"subproblem not converged after {epochs} epochs (gap {gap:.3g})",
                      RuntimeWarning, stacklevel=2)
    return SubproblemResult(LinearModel(w.copy()), alpha, upper, primal, gap, epochs, converged)


def train_proprank(log: ClickLog, config: TrainConfig, warm_start=None) -> LinearModel:
    """SVM PropRank: the average-rank bound, weights are the logged propensities."""
    data = PairData(log, clip=config.clip)
    res = solve_convex_subproblem(data, data.q, config.C, warm_start,
                                  config.inner_tol, config.max_epochs, config.seed)
    return res.model


def _snips(log: ClickLog, model: LinearModel, clip) -> float:
    return snips_risk(log, model, DCG, clip=clip)


def train_propdcg(log: ClickLog, config: TrainConfig,
                  init: Optional[LinearModel] = None):
    """SVM PropDCG via the convex-concave procedure.

    Starts from w = 0 unless ``init`` is given. Returns ``(model, trace)``;
    the trace holds the true (not linearized) objective of every iterate.
    """
    data = PairData(log, clip=config.clip)
    C = config.C
    w = np.zeros(data.dim) if init is None else init.w.copy()
    obj = _objective(data, w, C, DCG_LN)
    trace = CcpTrace()
    trace.iterations.append(CcpIteration(0, obj, _snips(log, LinearModel(w), config.clip)))

    warm: Union[SubproblemResult, LinearModel, None] = None if init is None else init
    for k in range(1, config.max_ccp_iters + 1):
        qp = ccp_qprime(data.slack_sums(w), data.q)
        tol = config.inner_tol
        res = solve_convex_subproblem(data, qp, C, warm, tol, config.max_epochs,
                                      config.seed + k)
        new_obj = _objective(data, res.model.w, C, DCG_LN)
        epochs = res.epochs
        while new_obj > obj and tol > 1e-13:
            tol *= 1e-3
            res = solve_convex_subproblem(data, qp, C, res, tol, config.max_epochs,
                                          config.seed + k)
            new_obj = _objective(data, res.model.w, C, DCG_LN)
            epochs += res.epochs
        slack = 1e-9 * max(1.0, abs(obj))
        if new_obj > obj + slack:
            raise CcpDivergenceError(
                f"objective rose from {obj!r} to {new_obj!r} at CCP iteration {k}"
            )
        w_new = res.model.w
        trace.iterations.append(CcpIteration(
            k, new_obj, _snips(log, res.model, config.clip),
            float(qp.min()), float(np.median(qp)), float(qp.max()), epochs, res.converged,
        ))
        rel = (obj - new_obj) / max(abs(obj), 1e-12)
        w, obj, warm = w_new, new_obj, res
        if rel < config.ccp_tol:
            trace.converged = True
            break
    logger.debug("propdcg C=%g: %d CCP iterations, objective %.6g", C, trace.num_iterations, obj)
    return LinearModel(w), trace
