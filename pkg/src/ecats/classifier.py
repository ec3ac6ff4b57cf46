"""Cross-attention concept classifier with hand-written backpropagation.

Each trajectory time step is a query token ``[standardized x(t), t/T]``;
concept embeddings provide keys and values. Attention over concepts is
averaged across time, the pooled context goes through a one-hidden-layer
MLP and a logistic output gives P(anomalous).
"""
from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .trajectory import LabeledSet

log = logging.getLogger(__name__)

P_CLAMP = 1e-12
PARAM_NAMES = ("W_q", "b_q", "W_k", "W_v", "W_1", "b_1", "W_2", "b_2")


class TrainingError(RuntimeError):
    pass


@dataclass
class ModelParams:
    W_q: np.ndarray   # (f_in, d_att)
    b_q: np.ndarray   # (d_att,)
    W_k: np.ndarray   # (d, d_att)
    W_v: np.ndarray   # (d, d_att)
    W_1: np.ndarray   # (d_att, h)
    b_1: np.ndarray   # (h,)
    W_2: np.ndarray   # (h,)
    b_2: float
    x_mean: np.ndarray = field(default_factory=lambda: np.zeros(1))   # input standardization,
    x_scale: np.ndarray = field(default_factory=lambda: np.ones(1))   # not trained

    @classmethod
    def init(cls, n_dims: int, embed_dim: int, d_att: int = 32, hidden: int = 64, seed=0,
             x_mean=None, x_scale=None) -> "ModelParams":
        """Uniform fan-in initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in)) per layer."""
        rng = np.random.default_rng(seed)
        f_in = n_dims + 1

        def u(fan_in, shape):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        return cls(
            W_q=u(f_in, (f_in, d_att)), b_q=u(f_in, (d_att,)),
            W_k=u(embed_dim, (embed_dim, d_att)), W_v=u(embed_dim, (embed_dim, d_att)),
            W_1=u(d_att, (d_att, hidden)), b_1=u(d_att, (hidden,)),
            W_2=u(hidden, (hidden,)), b_2=float(u(hidden, ())),
            x_mean=np.zeros(n_dims) if x_mean is None else np.asarray(x_mean, float),
            x_scale=np.ones(n_dims) if x_scale is None else np.asarray(x_scale, float),
        )

    def trainable(self) -> dict:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def copy(self) -> "ModelParams":
        kw = {k: np.array(v, dtype=float, copy=True) for k, v in asdict(self).items()}
        kw["b_2"] = float(kw["b_2"])
        return ModelParams(**kw)

    @property
    def d_att(self) -> int:
        return self.W_q.shape[1]


@dataclass
class AttentionRecord:
    weights: np.ndarray   # (C,) time-averaged attention over concepts

    def ranking(self) -> np.ndarray:
        return np.argsort(-self.weights, kind="stable")


def tokens(params: ModelParams, X: np.ndarray) -> np.ndarray:
    """(N, T, n) signals -> (N, T, n+1) query tokens."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 2:
        X = X[None]
    N, T, n = X.shape
    if n != params.x_mean.shape[0] or n + 1 != params.W_q.shape[0]:
        raise ValueError(f"model expects {params.W_q.shape[0] - 1}-dimensional signals, got {n}")
    z = (X - params.x_mean) / params.x_scale
    tcol = np.broadcast_to((np.arange(T) / T)[None, :, None], (N, T, 1))
    return np.concatenate([z, tcol], axis=-1)


def _softmax(S: np.ndarray) -> np.ndarray:
    S = S - S.max(axis=-1, keepdims=True)
    e = np.exp(S)
    return e / e.sum(axis=-1, keepdims=True)


def _forward(params: ModelParams, X: np.ndarray, E: np.ndarray):
    if E.shape[1] != params.W_k.shape[0]:
        raise ValueError(f"model expects {params.W_k.shape[0]}-dimensional concept embeddings, got {E.shape[1]}")
    Xt = tokens(params, X)
    scale = 1.0 / np.sqrt(params.d_att)
    Q = Xt @ params.W_q + params.b_q                 # (N, T, a)
    Kc = E @ params.W_k                              # (C, a)
    Vc = E @ params.W_v                              # (C, a)
    A = _softmax((Q @ Kc.T) * scale)                 # (N, T, C)
    alpha = A.mean(axis=1)                           # (N, C)
    ctx = alpha @ Vc                                 # (N, a) == mean_t (A V)
    H = ctx @ params.W_1 + params.b_1
    Hr = np.maximum(H, 0.0)
    logit = Hr @ params.W_2 + params.b_2
    p = 0.5 * (1.0 + np.tanh(0.5 * logit))          # overflow-free logistic
    cache = dict(Xt=Xt, Q=Q, Kc=Kc, Vc=Vc, A=A, alpha=alpha, ctx=ctx, H=H, Hr=Hr, p=p, scale=scale)
    return p, cache


def forward(params: ModelParams, xi, bank):
    """Probability of the anomalous class and the attention record for one trajectory."""
    X = getattr(xi, "values", xi)
    p, cache = _forward(params, np.asarray(X)[None], _embeddings(bank))
    return float(p[0]), AttentionRecord(cache["alpha"][0])


def _embeddings(bank) -> np.ndarray:
    return np.asarray(getattr(bank, "embeddings", bank), dtype=float)


def loss_bce(p, y) -> float:
    """Mean binary cross entropy with p clamped to [1e-12, 1 - 1e-12]."""
    p = np.clip(np.asarray(p, dtype=float), P_CLAMP, 1 - P_CLAMP)
    y = np.asarray(y, dtype=float)
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p))))


def backward(params: ModelParams, X: np.ndarray, y: np.ndarray, bank):
    """Mean BCE loss and its gradient w.r.t. every trainable parameter."""
    E = _embeddings(bank)
    y = np.asarray(y, dtype=float)
    p, c = _forward(params, X, E)
    loss = loss_bce(p, y)
    N = p.shape[0]
    T = c["A"].shape[1]
    inside = (p > P_CLAMP) & (p < 1 - P_CLAMP)     # the clamp is flat outside
    dlogit = np.where(inside, p - y, 0.0) / N
    g = {}
    g["W_2"] = c["Hr"].T @ dlogit
    g["b_2"] = float(dlogit.sum())
    dH = np.outer(dlogit, params.W_2) * (c["H"] > 0)
    g["W_1"] = c["ctx"].T @ dH
    g["b_1"] = dH.sum(axis=0)
    dctx = dH @ params.W_1.T                          # (N, a)
    dVc = c["alpha"].T @ dctx                         # (C, a)
    dalpha = dctx @ c["Vc"].T                         # (N, C)
    A = c["A"]
    dA = np.broadcast_to(dalpha[:, None, :] / T, A.shape)
    dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True))
    dS *= c["scale"]
    dQ = dS @ c["Kc"]                                 # (N, T, a)
    dKc = np.einsum("ntc,nta->ca", dS, c["Q"])
    g["W_q"] = np.einsum("ntf,nta->fa", c["Xt"], dQ)
    g["b_q"] = dQ.sum(axis=(0, 1))
    g["W_k"] = E.T @ dKc
    g["W_v"] = E.T @ dVc
    for name, v in g.items():
        if not np.all(np.isfinite(v)):
            raise TrainingError(f"non-finite gradient for parameter {name}")
    return loss, g


@dataclass
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 1e-5
    seeds: tuple = (0, 1, 2, 3, 4)
    batch_size: int = 32
    optimizer: str = "adam"          # or "sgd"
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    d_att: int = 32
    hidden: int = 64
    test_fraction: float = 0.3

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


class _Adam:
    def __init__(self, params: ModelParams, cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(np.asarray(v, dtype=float)) for k, v in params.trainable().items()}
        self.v = {k: np.zeros_like(np.asarray(v, dtype=float)) for k, v in params.trainable().items()}
        self.t = 0

    def step(self, params: ModelParams, grads: dict):
        b1, b2 = self.cfg.betas
        self.t += 1
        lr = self.cfg.learning_rate
        for k in PARAM_NAMES:
            gk = np.asarray(grads[k], dtype=float)
            self.m[k] = b1 * self.m[k] + (1 - b1) * gk
            self.v[k] = b2 * self.v[k] + (1 - b2) * gk * gk
            mhat = self.m[k] / (1 - b1 ** self.t)
            vhat = self.v[k] / (1 - b2 ** self.t)
            update = lr * mhat / (np.sqrt(vhat) + self.cfg.adam_eps)
            value = getattr(params, k) - update
            setattr(params, k, float(value) if k == "b_2" else value)


class _SGD:
    def __init__(self, params, cfg: TrainConfig):
        self.cfg = cfg

    def step(self, params: ModelParams, grads: dict):
        for k in PARAM_NAMES:
            value = getattr(params, k) - self.cfg.learning_rate * np.asarray(grads[k])
            setattr(params, k, float(value) if k == "b_2" else value)


def standardization(data: LabeledSet):
    X = data.array()
    pooled = X.reshape(-1, X.shape[2])
    scale = pooled.std(axis=0)
    scale[scale == 0] = 1.0
    return pooled.mean(axis=0), scale


def train(trainset: LabeledSet, bank, config: TrainConfig = TrainConfig(), seed: int | None = None):
    """Mini-batch training of the mean BCE; deterministic in ``seed``.

    Returns the fitted parameters and a per-epoch history of
    ``{"epoch", "loss", "accuracy"}`` measured on the training set.
    """
    if not len(trainset):
        raise TrainingError("empty training set")
    if len(set(trainset.labels)) < 2:
        warnings.warn("training set contains a single class", stacklevel=2)
    seed = config.seeds[0] if seed is None else seed
    E = _embeddings(bank)
    X = trainset.array()
    y = trainset.y.astype(float)
    mean, scale = standardization(trainset)
    params = ModelParams.init(X.shape[2], E.shape[1], config.d_att, config.hidden,
                              seed=[int(seed), 0], x_mean=mean, x_scale=scale)
    opt = _Adam(params, config) if config.optimizer == "adam" else _SGD(params, config)
    rng = np.random.default_rng([int(seed), 1])
    history = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(y))
        for start in range(0, len(y), config.batch_size):
            idx = order[start:start + config.batch_size]
            _, grads = backward(params, X[idx], y[idx], E)
            opt.step(params, grads)
        p, _ = _forward(params, X, E)
        history.append({"epoch": epoch, "loss": loss_bce(p, y), "accuracy": float(np.mean((p >= 0.5) == (y == 1)))})
        log.debug("epoch %d loss %.5f acc %.3f", epoch, history[-1]["loss"], history[-1]["accuracy"])
    return params, history


@dataclass
class Prediction:
    labels: np.ndarray
    probabilities: np.ndarray
    attention: list

    def accuracy(self, y) -> float:
        return float(np.mean(self.labels == np.asarray(y)))


def predict(params: ModelParams, data, bank) -> Prediction:
    """Label 1 iff p >= 0.5; keeps the attention record of every input."""
    X = data.array() if isinstance(data, LabeledSet) else np.asarray(data, dtype=float)
    p, c = _forward(params, X, _embeddings(bank))
    return Prediction((p >= 0.5).astype(int), p, [AttentionRecord(a) for a in c["alpha"]])


def split_stratified(data: LabeledSet, test_fraction: float, seed) -> tuple[list[int], list[int]]:
    """Per-class shuffled split; returns sorted (train, test) index lists."""
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    y = data.y
    for label in sorted(set(y.tolist())):
        idx = np.flatnonzero(y == label)
        idx = idx[rng.permutation(len(idx))]
        n_test = int(round(test_fraction * len(idx)))
        test_idx += idx[:n_test].tolist()
        train_idx += idx[n_test:].tolist()
    return sorted(train_idx), sorted(test_idx)


# ---------------------------------------------------------------------------
# Checkpoints: flat CSV weight dump + JSON metadata

def save_checkpoint(params: ModelParams, path, metadata: dict | None = None) -> None:
    path = Path(path)
    arrays = asdict(params)
    shapes = {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["param", "index", "value"])
        for name, value in arrays.items():
            a = np.atleast_1d(np.asarray(value, dtype=float))
            shapes[name] = list(np.shape(value))
            for i, v in enumerate(a.ravel()):
                w.writerow([name, i, repr(float(v))])
    meta = dict(metadata or {})
    meta["shapes"] = shapes
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    flat: dict[str, list] = {}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != ["param", "index", "value"]:
            raise ValueError(f"{path}: not a checkpoint file")
        for name, _, value in r:
            flat.setdefault(name, []).append(float(value))
    kw = {}
    for name, shape in meta["shapes"].items():
        a = np.asarray(flat[name], dtype=float)
        kw[name] = float(a[0]) if shape == [] else a.reshape(shape)
    return ModelParams(**kw), meta


def save_history(history: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "loss", "accuracy"])
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
