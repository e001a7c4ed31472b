"""Monte Carlo Dropout: dropout-enabled networks and predictive moments.

Masks are 0/1 Bernoulli(keep_prob) draws placed before each layer (before
the first layer only when ``input_dropout``).  ``scaling`` selects how
activations are rescaled around the masks:

* ``"none"``      plain 0/1 masks, the default;
* ``"sqrt_width"`` each hidden activation times ``sqrt(1/k_l)``;
* ``"inverted"``  masks divided by ``keep_prob`` (framework convention).
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from statistics import NormalDist

import numpy as np

from . import nncore
from .errors import ParameterError, ShapeError
from .rng import as_seed_sequence
from .nncore import Network, TrainConfig

SCALINGS = ("none", "sqrt_width", "inverted")
DEFAULT_CHUNK_PASSES = 50


def _workers(workers):
    if workers is not None:
        return max(1, int(workers))
    return max(1, int(os.environ.get("FLUXNET_WORKERS", "1")))


@dataclass
class DropoutNetwork:
    base: Network
    keep_prob: float = 0.8
    weight_decay: float = 0.0
    input_dropout: bool = True
    scaling: str = "none"

    def __post_init__(self):
        if not 0.0 < self.keep_prob <= 1.0:
            raise ParameterError("keep_prob must lie in (0, 1]")
        if self.scaling not in SCALINGS:
            raise ParameterError(f"scaling must be one of {SCALINGS}")
        if self.weight_decay < 0:
            raise ParameterError("weight_decay must be non-negative")

    @classmethod
    def from_drop_rate(cls, base: Network, drop_rate: float, **kw) -> "DropoutNetwork":
        return cls(base, keep_prob=1.0 - drop_rate, **kw)

    @property
    def drop_rate(self) -> float:
        return 1.0 - self.keep_prob

    @property
    def spec(self):
        return self.base.spec


def dropout_mask(width: int, keep_prob: float, rng) -> np.ndarray:
    """Diagonal of a 0/1 dropout matrix: each entry is 1 with probability ``keep_prob``."""
    if not 0.0 < keep_prob <= 1.0:
        raise ParameterError("keep_prob must lie in (0, 1]")
    if keep_prob == 1.0:
        return np.ones(width)
    return (rng.random(width) < keep_prob).astype(float)


def _masks_and_scales(net: DropoutNetwork, n_rows: int, rng, scaling):
    sizes = net.spec.layer_sizes
    p = net.keep_prob
    masks = []
    for l in range(net.spec.depth):
        if l == 0 and not net.input_dropout:
            masks.append(None)
            continue
        if p == 1.0:
            masks.append(None)
            continue
        m = (rng.random((n_rows, sizes[l])) < p).astype(float)
        if scaling == "inverted":
            m /= p
        masks.append(m)
    scales = None
    if scaling == "sqrt_width":
        scales = [1.0 / np.sqrt(k) for k in net.spec.hidden]
    return masks, scales


def _resolve_scaling(net, scaling):
    if scaling is None:
        return net.scaling
    if scaling is True:
        return "sqrt_width"
    if scaling is False:
        return "none"
    if scaling not in SCALINGS:
        raise ParameterError(f"scaling must be one of {SCALINGS}")
    return scaling


def forward_dropout(net: DropoutNetwork, x, rng, scaling=None, return_cache: bool = False):
    """One stochastic pass with fresh masks per row; returns ``(mu, sigma)``.

    ``scaling=True`` selects the ``sqrt(1/k_l)`` form, ``False`` plain
    masks, ``None`` the network's own setting.  ``sigma`` is ``None`` for a
    point head.
    """
    X, single = nncore._as_batch(net.base, x)
    scaling = _resolve_scaling(net, scaling)
    masks, scales = _masks_and_scales(net, len(X), rng, scaling)
    out, cache = nncore.forward_layers(net.base.weights, net.base.biases, net.spec.activations, X, masks, scales)
    mu, sigma = nncore.split_head(net.spec, out)
    if single:
        mu = mu[0]
        sigma = None if sigma is None else sigma[0]
    if return_cache:
        return (mu, sigma), (out, cache, masks, scales)
    return mu, sigma


def mcd_penalty(net: DropoutNetwork) -> float:
    return nncore.l2_penalty(net.base, net.weight_decay, weight_scale=net.keep_prob)


def mcd_loss(net: DropoutNetwork, x, y, rng, scaling=None) -> float:
    """Masked-pass data loss plus ``lam * sum_l (p ||W_l||^2 + ||b_l||^2)``.

    The data term is the mean Gaussian NLL for a gaussian head and the mean
    squared error for a point head.
    """
    value, _ = mcd_loss_and_grad(net, x, y, rng, scaling)
    return value


def mcd_loss_and_grad(net: DropoutNetwork, x, y, rng, scaling=None):
    X, _ = nncore._as_batch(net.base, x)
    scaling = _resolve_scaling(net, scaling)
    masks, scales = _masks_and_scales(net, len(X), rng, scaling)
    base = net.base
    out, cache = nncore.forward_layers(base.weights, base.biases, net.spec.activations, X, masks, scales)
    loss = "gaussian_nll" if net.spec.head == "gaussian" else "mse"
    value, g_out = nncore.data_loss_and_grad(net.spec, out, y, loss)
    gW, gb = nncore.backward_layers(base.weights, net.spec.activations, cache, g_out)
    lam, p = net.weight_decay, net.keep_prob
    if lam:
        value += mcd_penalty(net)
        gW = [g + 2.0 * lam * p * W for g, W in zip(gW, base.weights)]
        gb = [g + 2.0 * lam * b for g, b in zip(gb, base.biases)]
    return value, Network(net.spec, gW, gb)


def train_mcd(net: DropoutNetwork, train_split, val_split, config: TrainConfig):
    """Train with dropout active; returns ``(trained DropoutNetwork, TrainHistory)``.

    ``config.weight_decay`` is ignored in favour of ``net.weight_decay``.
    The validation metric is the data term on one fixed set of masks, so
    epochs are compared on the same noise.
    """
    X, y = nncore._xy(train_split)
    Xv, yv = nncore._xy(val_split)
    if len(X) == 0 or len(Xv) == 0:
        raise ParameterError("train and validation splits must be non-empty")
    if config.max_epochs == 0:
        return replace(net, base=net.base.copy()), nncore.TrainHistory()
    val_seed = as_seed_sequence(config.rng_seed).spawn(1)[0]

    def step(params, idx, rng):
        cur = replace(net, base=net.base.with_params(params))
        value, g = mcd_loss_and_grad(cur, X[idx], y[idx], rng)
        return value, g.params

    def val(params):
        cur = replace(net, base=net.base.with_params(params))
        rng = np.random.default_rng(val_seed)
        masks, scales = _masks_and_scales(cur, len(Xv), rng, cur.scaling)
        out, _ = nncore.forward_layers(cur.base.weights, cur.base.biases, cur.spec.activations, Xv, masks, scales)
        loss = "gaussian_nll" if cur.spec.head == "gaussian" else "mse"
        return nncore.data_loss_and_grad(cur.spec, out, yv, loss)[0]

    params, hist = nncore.fit_loop(net.base.copy().params, len(X), step, val, config)
    return replace(net, base=net.base.with_params(params)), hist


# -- predictive moments ------------------------------------------------------


@dataclass
class PredictiveDistribution:
    mean: np.ndarray
    epistemic_std: np.ndarray
    aleatoric_std: np.ndarray
    total_std: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    level: float = 0.95
    n_passes: int = 0

    def with_level(self, level: float) -> "PredictiveDistribution":
        lo, hi = confidence_interval(self.mean, self.total_std, level)
        return replace(self, ci_low=lo, ci_high=hi, level=level)

    def rescaled(self, mean: float, std: float) -> "PredictiveDistribution":
        """Map from z-scored target units back to physical units."""
        return replace(
            self,
            mean=self.mean * std + mean,
            epistemic_std=self.epistemic_std * std,
            aleatoric_std=self.aleatoric_std * std,
            total_std=self.total_std * std,
            ci_low=self.ci_low * std + mean,
            ci_high=self.ci_high * std + mean,
        )

    def __len__(self) -> int:
        return len(self.mean)


def gaussian_quantile(level: float) -> float:
    if not 0.0 <= level < 1.0:
        raise ParameterError("level must lie in [0, 1)")
    return 0.0 if level == 0.0 else NormalDist().inv_cdf(0.5 + level / 2.0)


def confidence_interval(mean, std, level):
    z = gaussian_quantile(level)
    return mean - z * std, mean + z * std


@dataclass
class MomentAccumulator:
    """Running per-point mean/M2 of the mean head and sum of sigma^2."""

    n: int
    mean: np.ndarray
    m2: np.ndarray
    sigma2_sum: np.ndarray

    @classmethod
    def from_samples(cls, mu, sigma=None) -> "MomentAccumulator":
        mu = np.asarray(mu, dtype=float)
        # shifted by the first pass: identical passes give an exact mean and zero M2
        m = mu[0] + (mu - mu[0]).mean(axis=0)
        s2 = np.zeros_like(m) if sigma is None else np.sum(np.asarray(sigma, dtype=float) ** 2, axis=0)
        return cls(mu.shape[0], m, np.sum((mu - m) ** 2, axis=0), s2)

    def merge(self, other: "MomentAccumulator") -> "MomentAccumulator":
        n = self.n + other.n
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.n / n)
        m2 = self.m2 + other.m2 + delta**2 * (self.n * other.n / n)
        return MomentAccumulator(n, mean, m2, self.sigma2_sum + other.sigma2_sum)


def compose_moments(acc: MomentAccumulator, level: float = 0.95) -> PredictiveDistribution:
    """Predictive mean, unbiased epistemic variance, mean aleatoric variance, and the CI."""
    if acc.n < 2:
        raise ParameterError("at least two passes are required")
    epi = np.sqrt(acc.m2 / (acc.n - 1))
    ale = np.sqrt(acc.sigma2_sum / acc.n)
    total = np.sqrt(epi**2 + ale**2)
    lo, hi = confidence_interval(acc.mean, total, level)
    return PredictiveDistribution(acc.mean, epi, ale, total, lo, hi, level, acc.n)


def predictive_from_samples(mu_samples, sigma_samples=None, level: float = 0.95) -> PredictiveDistribution:
    """Moments from explicit ``(T, N)`` pass samples."""
    mu = np.asarray(mu_samples, dtype=float)
    if mu.ndim == 1:
        mu = mu[:, None]
        sigma_samples = None if sigma_samples is None else np.asarray(sigma_samples, dtype=float)[:, None]
    return compose_moments(MomentAccumulator.from_samples(mu, sigma_samples), level)


def run_chunked(sample_chunk, n_passes: int, rng, chunk_passes: int = DEFAULT_CHUNK_PASSES,
                workers=None) -> MomentAccumulator:
    """Split ``n_passes`` into fixed-size chunks, each with its own sub-stream.

    ``sample_chunk(n, rng) -> (mu (n, N), sigma (n, N) or None)``.  Chunk
    boundaries depend only on ``n_passes`` and ``chunk_passes``, and the
    merge runs in chunk order, so the result does not depend on ``workers``.
    """
    sizes = [chunk_passes] * (n_passes // chunk_passes)
    if n_passes % chunk_passes:
        sizes.append(n_passes % chunk_passes)
    seeds = as_seed_sequence(rng).spawn(len(sizes))

    def run(i):
        mu, sigma = sample_chunk(sizes[i], np.random.default_rng(seeds[i]))
        return MomentAccumulator.from_samples(mu, sigma)

    w = _workers(workers)
    if w == 1:
        parts = [run(i) for i in range(len(sizes))]
    else:
        with ThreadPoolExecutor(w) as pool:
            parts = list(pool.map(run, range(len(sizes))))
    acc = parts[0]
    for part in parts[1:]:
        acc = acc.merge(part)
    return acc


def _sample_passes(net: DropoutNetwork, X: np.ndarray, n: int, rng):
    """``n`` independent passes over every row of ``X`` without a backprop cache.

    Passes are stacked on a leading axis so each one is its own matmul with
    the same shape as a plain forward over ``X``; BLAS rounding then matches
    the deterministic forward exactly when no unit is dropped.
    """
    masks, scales = _masks_and_scales(net, n * len(X), rng, net.scaling)
    h = np.broadcast_to(X, (n, *X.shape))
    L = net.spec.depth
    for l in range(L):
        if masks[l] is not None:
            h = h * masks[l].reshape(n, len(X), -1)
        h = np.matmul(h, net.base.weights[l]) + net.base.biases[l]
        if l < L - 1:
            h = nncore._act(net.spec.activations[l], h)
            if scales is not None:
                h = h * scales[l]
    mu, sigma = nncore.split_head(net.spec, h)
    return mu[..., 0], None if sigma is None else sigma[..., 0]


def mc_predict(net: DropoutNetwork, x, T: int, rng, level: float = 0.95, workers=None,
               chunk_passes: int = DEFAULT_CHUNK_PASSES) -> PredictiveDistribution:
    """Monte Carlo Dropout prediction from ``T`` stochastic passes.

    Works on the first output only; ``x`` is a batch of query rows in the
    network's input units.
    """
    if T < 2:
        raise ParameterError("T must be at least 2")
    X, _ = nncore._as_batch(net.base, x)
    if net.spec.output_dim != 1:
        raise ShapeError("mc_predict supports single-output networks")
    acc = run_chunked(lambda n, r: _sample_passes(net, X, n, r), T, rng, chunk_passes, workers)
    return compose_moments(acc, level)
