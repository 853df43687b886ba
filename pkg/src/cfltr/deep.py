"""Deep PropDCG: a one-hidden-layer network trained on the hinge bound of IPS-DCG.

The loss of one click instance is built from shared-weight scores of every
candidate, one hinge node per (clicked, other) pair, and a single weighting
node lambda(1 + sum of hinges), scaled by 1/propensity. Gradients are
derived by hand and checked against finite differences in the tests.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .linear_ccp import PairData
from .ltr_core import DataError, QueryInstance
from .metrics import DCG_LN, ClickLog, RankWeighting, weight_array, weight_derivative

PARAM_NAMES = ("W1", "b1", "w2", "b2")


class TrainingDivergedError(FloatingPointError):
    pass


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class MlpModel:
    """Scores f(x) = w2 . sigmoid(W1 x + b1) + b2."""

    W1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float = 0.0

    def __post_init__(self):
        self.W1 = np.array(self.W1, dtype=np.float64, ndmin=2)
        self.b1 = np.array(self.b1, dtype=np.float64).reshape(-1)
        self.w2 = np.array(self.w2, dtype=np.float64).reshape(-1)
        self.b2 = float(self.b2)
        h = self.W1.shape[0]
        if self.b1.shape != (h,) or self.w2.shape != (h,):
            raise ValueError("inconsistent layer shapes")
        if not all(np.all(np.isfinite(p)) for p in self.params().values()):
            raise ValueError("model parameters must be finite")

    @classmethod
    def init(cls, input_dim: int, hidden: int = 200, seed: int = 0) -> "MlpModel":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        a1 = math.sqrt(6.0 / (input_dim + hidden))
        a2 = math.sqrt(6.0 / (hidden + 1))
        return cls(rng.uniform(-a1, a1, (hidden, input_dim)), np.zeros(hidden),
                   rng.uniform(-a2, a2, hidden), 0.0)

    @property
    def input_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    def params(self) -> Dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "w2": self.w2, "b2": np.array(self.b2)}

    def copy(self) -> "MlpModel":
        return MlpModel(self.W1.copy(), self.b1.copy(), self.w2.copy(), self.b2)

    def hidden_features(self, X) -> np.ndarray:
        return _sigmoid(np.asarray(X, dtype=np.float64) @ self.W1.T + self.b1)

    def forward(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.input_dim:
            raise ValueError(f"input dim {X.shape[-1]} != model input dim {self.input_dim}")
        return self.hidden_features(X) @ self.w2 + self.b2

    def scores(self, query: QueryInstance) -> np.ndarray:
        return self.forward(query.features)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(f"mlp {self.input_dim} {self.hidden} sigmoid\n")
            for arr in (self.W1.ravel(), self.b1, self.w2, [self.b2]):
                for v in arr:
                    fh.write(f"{float(v)!r}\n")

    @classmethod
    def load(cls, path) -> "MlpModel":
        with open(path) as fh:
            header = fh.readline().split()
            values = [float(ln) for ln in fh if ln.strip()]
        if len(header) != 4 or header[0] != "mlp" or header[3] != "sigmoid":
            raise DataError(f"{path}: not an mlp model file")
        d, h = int(header[1]), int(header[2])
        if len(values) != h * d + 2 * h + 1:
            raise DataError(f"{path}: expected {h * d + 2 * h + 1} values, found {len(values)}")
        v = np.array(values)
        return cls(v[:h * d].reshape(h, d), v[h * d:h * d + h], v[h * d + h:h * d + 2 * h], v[-1])


def mlp_forward(model: MlpModel, features) -> float:
    x = np.asarray(features, dtype=np.float64).reshape(-1)
    return float(model.forward(x[None, :])[0])


def _check_click(query: QueryInstance, clicked: int, q: float):
    if not 0 <= clicked < query.num_candidates:
        raise IndexError(f"clicked candidate {clicked} out of range")
    if not q > 0:
        raise ValueError("propensity must be positive")


def query_loss(model: MlpModel, query: QueryInstance, clicked: int, q: float,
               lam: RankWeighting = DCG_LN) -> float:
    """(1/q) lambda(1 + sum_y max(1 - (f(clicked) - f(y)), 0)) for one click."""
    _check_click(query, clicked, q)
    s = model.forward(query.features)
    hinge = np.maximum(1.0 - (s[clicked] - np.delete(s, clicked)), 0.0)
    return float(weight_array(lam, 1.0 + hinge.sum())) / q


def _backward(model: MlpModel, X, hidden, dscores, train_hidden=True) -> Dict[str, np.ndarray]:
    grads = {
        "w2": hidden.T @ dscores,
        "b2": np.array(dscores.sum()),
    }
    if train_hidden:
        dz = np.outer(dscores, model.w2) * hidden * (1.0 - hidden)
        grads["W1"] = dz.T @ X
        grads["b1"] = dz.sum(axis=0)
    else:
        grads["W1"] = np.zeros_like(model.W1)
        grads["b1"] = np.zeros_like(model.b1)
    return grads


def query_loss_gradient(model: MlpModel, query: QueryInstance, clicked: int, q: float,
                        lam: RankWeighting = DCG_LN) -> Dict[str, np.ndarray]:
    """Exact gradient of :func:`query_loss` for every parameter.

    Each candidate is forward-passed once. A hinge whose argument is exactly
    zero contributes a zero subgradient.
    """
    _check_click(query, clicked, q)
    X = query.features
    hidden = model.hidden_features(X)
    s = hidden @ model.w2 + model.b2
    arg = 1.0 - (s[clicked] - s)
    arg[clicked] = 0.0
    active = arg > 0.0
    total = np.where(active, arg, 0.0).sum()
    dtotal = float(weight_derivative(lam, 1.0 + total)) / q
    dscores = np.where(active, dtotal, 0.0)
    dscores[clicked] = -dtotal * active.sum()
    return _backward(model, X, hidden, dscores)


def _default_boundaries(epochs: int) -> Tuple[int, int]:
    # 300 and 500 of 750 epochs
    return round(epochs * 0.4), round(epochs * 2 / 3)


@dataclass
class SgdConfig:
    epochs: int = 750
    minibatch_docs: int = 1000
    lr: float = 1e-6
    lr_boundaries: Optional[Tuple[int, int]] = None
    lr_decay: float = 0.1
    weight_decay: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    hidden: int = 200
    train_hidden: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.minibatch_docs < 1 or self.hidden < 1:
            raise ValueError("epochs, minibatch size and hidden units must be positive")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("learning rate and weight decay must be >= 0")
        if self.lr_boundaries is None:
            self.lr_boundaries = _default_boundaries(self.epochs)
        self.lr_boundaries = tuple(int(b) for b in self.lr_boundaries)
        if any(b > self.epochs for b in self.lr_boundaries) or list(self.lr_boundaries) != sorted(self.lr_boundaries):
            raise ValueError("learning-rate boundaries must be sorted and <= epochs")

    def learning_rate(self, epoch: int) -> float:
        """Rate for 1-based ``epoch``: drops by ``lr_decay`` after each boundary."""
        drops = sum(epoch > b for b in self.lr_boundaries)
        return self.lr * self.lr_decay ** drops


class Adam:
    """Adaptive-moment updates with decoupled weight decay."""

    def __init__(self, params: Dict[str, np.ndarray], config: SgdConfig):
        self.config = config
        self.m = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
        self.v = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
        self.t = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: float):
        c = self.config
        self.t += 1
        out = {}
        for k, p in params.items():
            g = grads[k]
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            m_hat = self.m[k] / (1 - c.beta1 ** self.t)
            v_hat = self.v[k] / (1 - c.beta2 ** self.t)
            out[k] = p - lr * (m_hat / (np.sqrt(v_hat) + c.adam_eps) + c.weight_decay * p)
        return out


def _set_params(model: MlpModel, params: Dict[str, np.ndarray]) -> MlpModel:
    return MlpModel(params["W1"], params["b1"], params["w2"], float(params["b2"]))


@dataclass
class DeepTrace:
    epochs: List[int] = field(default_factory=list)
    train_ips_dcg: List[float] = field(default_factory=list)
    grad_norm: List[float] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["epoch", "train_ips_dcg", "grad_norm"])
            for row in zip(self.epochs, self.train_ips_dcg, self.grad_norm):
                out.writerow([row[0], repr(row[1]), repr(row[2])])


class _Batches:
    """Minibatch index plumbing over a :class:`PairData`."""

    def __init__(self, data: PairData):
        self.data = data
        self.docs = data.block_len[data.inst_block]

    def split(self, order: np.ndarray, budget: int) -> List[np.ndarray]:
        batches, current, count = [], [], 0
        for i in order:
            current.append(i)
            count += self.docs[i]
            if count >= budget:
                batches.append(np.array(current))
                current, count = [], 0
        if current:
            batches.append(np.array(current))
        return batches

    def gather(self, insts: np.ndarray):
        d = self.data
        blocks = np.unique(d.inst_block[insts])
        rows = np.concatenate([np.arange(d.block_start[b], d.block_start[b] + d.block_len[b])
                               for b in blocks])
        remap = np.full(d.X.shape[0], -1, dtype=np.int64)
        remap[rows] = np.arange(rows.shape[0])
        pairs = np.concatenate([np.arange(d.inst_pair_start[i], d.inst_pair_start[i + 1])
                                for i in insts])
        local_inst = np.repeat(np.arange(insts.shape[0]),
                               d.inst_pair_start[insts + 1] - d.inst_pair_start[insts])
        return rows, remap[d.pair_a[pairs]], remap[d.pair_b[pairs]], local_inst


def _batch_loss_grad(model, X, a, b, inst, coef, lam, train_hidden):
    """Loss sum_i coef_i lambda(1 + S_i) and its gradient over a stacked batch."""
    hidden = model.hidden_features(X)
    s = hidden @ model.w2 + model.b2
    arg = 1.0 - (s[a] - s[b])
    active = arg > 0.0
    sums = np.bincount(inst, weights=np.where(active, arg, 0.0), minlength=coef.shape[0])
    loss = float(np.sum(coef * weight_array(lam, 1.0 + sums)))
    dsum = coef * weight_derivative(lam, 1.0 + sums)
    g_pair = np.where(active, dsum[inst], 0.0)
    dscores = (np.bincount(b, g_pair, X.shape[0]) - np.bincount(a, g_pair, X.shape[0]))
    return loss, _backward(model, X, hidden, dscores, train_hidden)


def _train_ips(model: MlpModel, data: PairData, lam: RankWeighting) -> float:
    """IPS risk of the argsort ranking, straight from the merged instances."""
    s = model.forward(data.X)
    u = s[data.inst_clicked_row]
    above = (s[data.pair_b] > u[data.pair_inst]) | (
        (s[data.pair_b] == u[data.pair_inst]) & (data.pair_b < data.pair_a))
    ranks = 1.0 + np.bincount(data.pair_inst, weights=above.astype(float),
                              minlength=data.num_instances)
    return float(np.sum(data.count / data.q * weight_array(lam, ranks)) / data.n)


def train_deep(log: ClickLog, config: SgdConfig, lam: RankWeighting = DCG_LN,
               init: Optional[MlpModel] = None):
    """Query-level minibatch training of the Deep PropDCG objective.

    Minibatches collect whole click instances until they hold at least
    ``config.minibatch_docs`` candidates. Returns ``(model, trace)``.
    """
    data = PairData(log)
    model = init.copy() if init is not None else MlpModel.init(data.dim, config.hidden, config.seed)
    if model.input_dim != data.dim:
        raise ValueError("model input dim does not match the dataset")
    trace = DeepTrace()
    if config.epochs == 0:
        return model, trace

    batches = _Batches(data)
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.params(), config)
    coef_all = data.count / data.q / data.n
    for epoch in range(1, config.epochs + 1):
        lr = config.learning_rate(epoch)
        norms = []
        for insts in batches.split(rng.permutation(data.num_instances), config.minibatch_docs):
            rows, a, b, inst = batches.gather(insts)
            # rescaled so the batch gradient is unbiased for the full objective
            coef = coef_all[insts] * (data.num_instances / insts.shape[0])
            loss, grads = _batch_loss_grad(model, data.X[rows], a, b, inst, coef, lam,
                                           config.train_hidden)
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"loss became non-finite in epoch {epoch}")
            norms.append(math.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
            params = opt.step(model.params(), grads, lr)
            if not config.train_hidden:
                params["W1"], params["b1"] = model.W1, model.b1
            if not all(np.all(np.isfinite(p)) for p in params.values()):
                raise TrainingDivergedError(f"parameters became non-finite in epoch {epoch}")
            model = _set_params(model, params)
        trace.epochs.append(epoch)
        trace.train_ips_dcg.append(_train_ips(model, data, lam))
        trace.grad_norm.append(float(np.mean(norms)))
    return model, trace
