"""Feedforward networks with hand-written backpropagation.

Layer convention: ``W_l`` has shape ``(k_{l-1}, k_l)`` and a batch of
row vectors propagates as ``h_l = phi(h_{l-1} @ W_l + b_l)``; the output
layer has no activation.  A ``gaussian`` head emits ``2m`` raw outputs,
``mu`` and a raw scale mapped to ``sigma = softplus(raw) + SIGMA_FLOOR``.
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ParameterError, ShapeError, TrainingError

ACTIVATIONS = ("relu", "tanh", "identity")
HEADS = ("point", "gaussian")
LOSSES = ("mse", "mae", "gaussian_nll")
SIGMA_FLOOR = 1e-6


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden: tuple
    output_dim: int = 1
    activation: object = "relu"  # one name, or one per hidden layer
    head: str = "point"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(k) for k in self.hidden))
        if isinstance(self.activation, (list, tuple)):
            object.__setattr__(self, "activation", tuple(self.activation))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ParameterError("input_dim and output_dim must be >= 1")
        if not self.hidden:
            raise ParameterError("at least one hidden layer is required")
        if any(k < 1 for k in self.hidden):
            raise ParameterError("hidden widths must be >= 1")
        if any(a not in ACTIVATIONS for a in self.activations):
            raise ParameterError(f"activations must be in {ACTIVATIONS}")
        if isinstance(self.activation, tuple) and len(self.activation) != len(self.hidden):
            raise ParameterError("one activation per hidden layer")
        if self.head not in HEADS:
            raise ParameterError(f"head must be one of {HEADS}")

    @property
    def activations(self) -> tuple:
        if isinstance(self.activation, tuple):
            return self.activation
        return (self.activation,) * len(self.hidden)

    @property
    def depth(self) -> int:
        return len(self.hidden) + 1

    @property
    def out_width(self) -> int:
        return self.output_dim * (2 if self.head == "gaussian" else 1)

    @property
    def layer_sizes(self) -> tuple:
        return (self.input_dim, *self.hidden, self.out_width)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        if isinstance(self.activation, tuple):
            d["activation"] = list(self.activation)
        return d

    @classmethod
    def from_dict(cls, d) -> "NetworkSpec":
        return cls(int(d["input_dim"]), tuple(d["hidden"]), int(d.get("output_dim", 1)),
                   d.get("activation", "relu"), d.get("head", "point"))


@dataclass
class Network:
    spec: NetworkSpec
    weights: list
    biases: list

    def __post_init__(self):
        sizes = self.spec.layer_sizes
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ShapeError("parameter count does not match spec depth")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (sizes[l], sizes[l + 1]) or b.shape != (sizes[l + 1],):
                raise ShapeError(f"layer {l + 1}: expected {(sizes[l], sizes[l + 1])}, got {W.shape}")

    @property
    def params(self) -> list:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def with_params(self, params: Sequence[np.ndarray]) -> "Network":
        return Network(self.spec, list(params[0::2]), list(params[1::2]))

    def copy(self) -> "Network":
        return copy.deepcopy(self)


def init_limits(spec: NetworkSpec) -> list:
    """Uniform init bounds: He-style for relu layers, Xavier-style otherwise."""
    sizes = spec.layer_sizes
    acts = spec.activations + ("identity",)
    return [math.sqrt(6.0 / sizes[l]) if acts[l] == "relu" else math.sqrt(6.0 / (sizes[l] + sizes[l + 1]))
            for l in range(spec.depth)]


def init_network(spec: NetworkSpec, rng) -> Network:
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    sizes = spec.layer_sizes
    weights = [rng.uniform(-lim, lim, size=(sizes[l], sizes[l + 1])) for l, lim in enumerate(init_limits(spec))]
    biases = [np.zeros(sizes[l + 1]) for l in range(spec.depth)]
    return Network(spec, weights, biases)


# -- activations -------------------------------------------------------------


def _act(name, a):
    if name == "relu":
        return np.maximum(a, 0.0)
    if name == "tanh":
        return np.tanh(a)
    return a


def _act_grad(name, a, h):
    if name == "relu":
        return (a > 0).astype(float)
    if name == "tanh":
        return 1.0 - h * h
    return np.ones_like(a)


def softplus(r):
    return np.logaddexp(0.0, r)


def sigmoid(r):
    return 0.5 * (1.0 + np.tanh(0.5 * r))


def softplus_inv(s):
    s = np.asarray(s, dtype=float)
    return s + np.log(-np.expm1(-s))


# -- forward / backward over raw parameter lists -----------------------------


def forward_layers(weights, biases, activations, x, masks=None, scales=None):
    """Run the layer stack; returns ``(output, cache)``.

    ``masks[l]`` (optional) multiplies the input of layer ``l``;
    ``scales[l]`` (optional, hidden layers only) multiplies the activation
    of hidden layer ``l``.
    """
    h = x
    cache = []
    L = len(weights)
    for l in range(L):
        m = None if masks is None else masks[l]
        inp = h if m is None else h * m
        a = inp @ weights[l] + biases[l]
        if l < L - 1:
            act = _act(activations[l], a)
            s = 1.0 if scales is None else scales[l]
            h = act * s
            cache.append((h, m, inp, a, act, s))
        else:
            cache.append((None, m, inp, a, None, 1.0))
            h = a
    return h, cache


def backward_layers(weights, activations, cache, grad_out):
    """Gradients of a scalar w.r.t. every ``W_l``, ``b_l`` given ``d/d(output)``."""
    L = len(weights)
    gW, gb = [None] * L, [None] * L
    g = grad_out
    for l in range(L - 1, -1, -1):
        _, m, inp, a, act, s = cache[l]
        if l < L - 1:
            g = g * s * _act_grad(activations[l], a, act)
        gW[l] = inp.T @ g
        gb[l] = g.sum(axis=0)
        if not (np.all(np.isfinite(gW[l])) and np.all(np.isfinite(gb[l]))):
            raise NumericError(f"non-finite gradient at layer {l + 1}", layer=l + 1)
        if l > 0:
            g = g @ weights[l].T
            if m is not None:
                g = g * m
    return gW, gb


def _as_batch(net_or_spec, x):
    spec = net_or_spec.spec if isinstance(net_or_spec, Network) else net_or_spec
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x.reshape(1, -1) if single else x
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ShapeError(f"expected input dimension {spec.input_dim}, got shape {x.shape}")
    return X, single


def forward(net: Network, x, return_cache: bool = False):
    """Raw network output for a vector or a batch of row vectors."""
    X, single = _as_batch(net, x)
    out, cache = forward_layers(net.weights, net.biases, net.spec.activations, X)
    if single:
        out = out[0]
    return (out, cache) if return_cache else out


def split_head(spec: NetworkSpec, out):
    """``(mu, sigma)`` for a gaussian head, ``(out, None)`` for a point head."""
    m = spec.output_dim
    if spec.head == "gaussian":
        return out[..., :m], softplus(out[..., m:]) + SIGMA_FLOOR
    return out, None


def predict(net: Network, x):
    """Mean prediction, squeezed to ``(N,)`` for single-output nets."""
    mu, _ = split_head(net.spec, forward(net, x))
    return mu[..., 0] if net.spec.output_dim == 1 else mu


# -- losses ------------------------------------------------------------------


def _check_pair(pred, target):
    p = np.asarray(pred, dtype=float)
    t = np.asarray(target, dtype=float)
    if p.shape != t.shape:
        raise ShapeError(f"prediction shape {p.shape} != target shape {t.shape}")
    if p.size == 0:
        raise ParameterError("empty batch")
    return p, t


def loss_mse(pred, target) -> float:
    """``(1/N) sum_i ||pred_i - target_i||^2`` over the leading (batch) axis."""
    p, t = _check_pair(pred, target)
    return float(np.sum((p - t) ** 2) / p.shape[0])


def loss_mae(pred, target) -> float:
    p, t = _check_pair(pred, target)
    return float(np.sum(np.abs(p - t)) / p.shape[0])


def gaussian_nll(y, mu, sigma, reduction: str = "sum"):
    """Gaussian negative log-likelihood ``0.5 ln(2 pi sigma^2) + (y-mu)^2 / (2 sigma^2)``."""
    y, mu, sigma = (np.asarray(v, dtype=float) for v in (y, mu, sigma))
    if np.any(~(sigma > 0)):
        raise NumericError("sigma must be positive")
    nll = 0.5 * np.log(2.0 * np.pi * sigma**2) + (y - mu) ** 2 / (2.0 * sigma**2)
    if reduction == "none":
        return nll
    if reduction == "mean":
        return float(np.mean(nll))
    return float(np.sum(nll))


def l2_penalty(net: Network, lam: float, weight_scale: float = 1.0) -> float:
    """``lam * sum_l (weight_scale * ||W_l||^2 + ||b_l||^2)``."""
    if lam < 0:
        raise ParameterError("weight decay must be non-negative")
    return float(lam * sum(weight_scale * np.sum(W * W) + np.sum(b * b)
                           for W, b in zip(net.weights, net.biases)))


def data_loss_and_grad(spec: NetworkSpec, out, y, loss: str):
    """Data loss of raw outputs ``out`` against ``y`` and its gradient w.r.t. ``out``."""
    n = out.shape[0]
    y = np.asarray(y, dtype=float).reshape(n, spec.output_dim)
    if n == 0:
        raise ParameterError("empty batch")
    if loss == "gaussian_nll":
        if spec.head != "gaussian":
            raise ParameterError("gaussian_nll loss needs a gaussian head")
        m = spec.output_dim
        mu, raw = out[:, :m], out[:, m:]
        sigma = softplus(raw) + SIGMA_FLOOR
        r = mu - y
        value = float(np.sum(0.5 * np.log(2.0 * np.pi * sigma**2) + r**2 / (2.0 * sigma**2)) / n)
        g_mu = r / sigma**2
        g_sigma = 1.0 / sigma - r**2 / sigma**3
        return value, np.hstack([g_mu, g_sigma * sigmoid(raw)]) / n
    mu = out[:, : spec.output_dim]
    r = mu - y
    if loss == "mse":
        value, g = float(np.sum(r * r) / n), 2.0 * r / n
    elif loss == "mae":
        value, g = float(np.sum(np.abs(r)) / n), np.sign(r) / n  # sign(0) = 0 subgradient
    else:
        raise ParameterError(f"unknown loss {loss!r}")
    if spec.head == "gaussian":
        g = np.hstack([g, np.zeros_like(g)])
    return value, g


def backward(net: Network, x, y, loss: str = "mse", lam: float = 0.0, weight_scale: float = 1.0):
    """Exact gradients of ``data loss + l2_penalty`` for one batch.

    Returns ``(loss_value, grads)`` where ``grads`` is a :class:`Network`
    holding d/dW and d/db in place of the parameters.
    """
    X, _ = _as_batch(net, x)
    out, cache = forward_layers(net.weights, net.biases, net.spec.activations, X)
    value, g_out = data_loss_and_grad(net.spec, out, y, loss)
    gW, gb = backward_layers(net.weights, net.spec.activations, cache, g_out)
    if lam:
        value += l2_penalty(net, lam, weight_scale)
        gW = [g + 2.0 * lam * weight_scale * W for g, W in zip(gW, net.weights)]
        gb = [g + 2.0 * lam * b for g, b in zip(gb, net.biases)]
    return value, Network(net.spec, gW, gb)


# -- optimizer ---------------------------------------------------------------


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0, **kw)


def optimizer_step(state: AdamState, params, grads, learning_rate: float):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient passed to optimizer")
    b1, b2 = state.beta1, state.beta2
    t = state.t + 1
    m = [b1 * mi + (1 - b1) * g for mi, g in zip(state.m, grads)]
    v = [b2 * vi + (1 - b2) * g * g for vi, g in zip(state.v, grads)]
    c1, c2 = 1 - b1**t, 1 - b2**t
    new = [p - learning_rate * (mi / c1) / (np.sqrt(vi / c2) + state.eps) for p, mi, vi in zip(params, m, v)]
    return new, AdamState(m, v, t, b1, b2, state.eps)


# -- training ----------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "mse"
    weight_decay: float = 0.0
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 100
    early_stop_patience: int | None = 20
    early_stop_min_delta: float = 0.0
    plateau_factor: float = 0.5
    plateau_patience: int | None = 10
    min_lr: float = 1e-6
    rng_seed: int = 0

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ParameterError(f"loss must be one of {LOSSES}")
        if not self.learning_rate > 0:
            raise ParameterError("learning_rate must be positive")
        if not 0 < self.plateau_factor < 1:
            raise ParameterError("plateau factor must lie in (0, 1)")
        if self.weight_decay < 0:
            raise ParameterError("weight_decay must be non-negative")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ParameterError("batch_size must be >= 1 and max_epochs >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    learning_rate: list = field(default_factory=list)
    stop_reason: str = "max_epochs"
    best_epoch: int | None = None

    def __len__(self) -> int:
        return len(self.val_loss)

    def digest(self) -> dict:
        return {
            "epochs": len(self),
            "stop_reason": self.stop_reason,
            "best_epoch": self.best_epoch,
            "best_val_loss": None if self.best_epoch is None else self.val_loss[self.best_epoch],
            "final_lr": self.learning_rate[-1] if self.learning_rate else None,
        }


def fit_loop(params: list, n_train: int, step_loss: Callable, val_loss: Callable, config: TrainConfig):
    """Mini-batch Adam with early stopping and LR-on-plateau.

    ``step_loss(params, batch_idx, rng) -> (loss, grads)``;
    ``val_loss(params) -> float``.  Returns the parameters with the lowest
    recorded validation loss and the history.
    """
    hist = TrainHistory()
    if config.max_epochs == 0:
        return params, hist
    rng = np.random.default_rng(config.rng_seed)
    state = AdamState.zeros_like(params)
    lr = config.learning_rate
    best_params, best_val = [p.copy() for p in params], math.inf
    es_best, es_wait = math.inf, 0
    pl_best, pl_wait = math.inf, 0
    bs = config.batch_size
    for epoch in range(config.max_epochs):
        perm = rng.permutation(n_train)
        total = 0.0
        for start in range(0, n_train, bs):
            idx = perm[start:start + bs]
            loss, grads = step_loss(params, idx, rng)
            params, state = optimizer_step(state, params, grads, lr)
            total += loss * len(idx)
        v = float(val_loss(params))
        hist.train_loss.append(total / n_train)
        hist.val_loss.append(v)
        hist.learning_rate.append(lr)
        if not math.isfinite(v):
            hist.stop_reason = "diverged"
            raise TrainingError(f"validation loss became non-finite at epoch {epoch}", history=hist)
        if v < best_val:
            best_val, best_params, hist.best_epoch = v, [p.copy() for p in params], epoch

        if config.early_stop_patience is not None:
            if v < es_best - config.early_stop_min_delta:
                es_best, es_wait = v, 0
            else:
                es_wait += 1
                if es_wait >= config.early_stop_patience:
                    hist.stop_reason = "early_stop"
                    break
        if config.plateau_patience is not None:
            if v < pl_best - config.early_stop_min_delta:
                pl_best, pl_wait = v, 0
            else:
                pl_wait += 1
                if pl_wait >= config.plateau_patience:
                    lr, pl_wait = max(lr * config.plateau_factor, config.min_lr), 0
    return best_params, hist


def _xy(split):
    if isinstance(split, tuple):
        x, y = split
    else:
        x, y = split.x, split.y
    x = np.asarray(x, dtype=float)
    return (x.reshape(-1, 1) if x.ndim == 1 else x), np.asarray(y, dtype=float)


def evaluate_loss(net: Network, split, loss: str) -> float:
    X, y = _xy(split)
    out = forward(net, X)
    value, _ = data_loss_and_grad(net.spec, np.atleast_2d(out), y, loss)
    return value


def train(net: Network, train_split, val_split, config: TrainConfig):
    """Fit ``net`` on ``train_split``; returns ``(trained copy, TrainHistory)``.

    Splits are :class:`RegressionDataset` objects or ``(x, y)`` tuples.  The
    validation metric is the training loss (without the penalty) evaluated
    on ``val_split``.
    """
    X, y = _xy(train_split)
    Xv, yv = _xy(val_split)
    if len(X) == 0 or len(Xv) == 0:
        raise ParameterError("train and validation splits must be non-empty")
    if config.max_epochs == 0:
        return net.copy(), TrainHistory()

    def step(params, idx, rng):
        value, g = backward(net.with_params(params), X[idx], y[idx], config.loss, config.weight_decay)
        return value, g.params

    def val(params):
        return evaluate_loss(net.with_params(params), (Xv, yv), config.loss)

    params, hist = fit_loop(net.copy().params, len(X), step, val, config)
    return net.with_params(params), hist
