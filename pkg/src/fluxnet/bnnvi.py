"""Mean-field Gaussian Bayesian networks trained on the variational free energy.

Every weight and bias has an independent Gaussian posterior
``N(mu, softplus(rho)^2)`` and a zero-mean Gaussian prior.  Weight draws
use the reparameterization ``w = mu + softplus(rho) * eps`` so gradients
reach ``(mu, rho)`` through the sampled network.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nncore
from .errors import NumericError, ParameterError, ShapeError
from .mcd import DEFAULT_CHUNK_PASSES, compose_moments, run_chunked
from .nncore import Network, NetworkSpec, TrainConfig, gaussian_nll, softplus, softplus_inv, sigmoid
from .rng import as_seed_sequence


@dataclass
class VariationalLayer:
    w_mu: np.ndarray
    w_rho: np.ndarray
    b_mu: np.ndarray
    b_rho: np.ndarray
    prior_std: float = 1.0

    def __post_init__(self):
        if self.w_mu.shape != self.w_rho.shape or self.b_mu.shape != self.b_rho.shape:
            raise ShapeError("posterior mean and scale shapes differ")
        if self.w_mu.shape[1:] != self.b_mu.shape:
            raise ShapeError("bias width does not match weight matrix")
        if not self.prior_std > 0:
            raise ParameterError("prior_std must be positive")

    @property
    def w_std(self):
        return softplus(self.w_rho)

    @property
    def b_std(self):
        return softplus(self.b_rho)


@dataclass
class BayesianNetwork:
    spec: NetworkSpec
    layers: list
    n_train: int

    def __post_init__(self):
        if self.spec.head != "gaussian":
            raise ParameterError("a Bayesian network needs a gaussian head")
        if self.n_train < 1:
            raise ParameterError("n_train must be >= 1")
        sizes = self.spec.layer_sizes
        if len(self.layers) != self.spec.depth:
            raise ShapeError("layer count does not match spec")
        for l, layer in enumerate(self.layers):
            if layer.w_mu.shape != (sizes[l], sizes[l + 1]):
                raise ShapeError(f"layer {l + 1} has shape {layer.w_mu.shape}")

    @property
    def prior_std(self) -> float:
        return self.layers[0].prior_std

    @property
    def params(self) -> list:
        return [p for ly in self.layers for p in (ly.w_mu, ly.w_rho, ly.b_mu, ly.b_rho)]

    def with_params(self, params) -> "BayesianNetwork":
        layers = [VariationalLayer(*params[4 * i:4 * i + 4], prior_std=ly.prior_std)
                  for i, ly in enumerate(self.layers)]
        return BayesianNetwork(self.spec, layers, self.n_train)

    def copy(self) -> "BayesianNetwork":
        return self.with_params([p.copy() for p in self.params])


def init_bayesian(spec: NetworkSpec, n_train: int, rng, prior_std: float = 1.0,
                  init_std_fraction: float = 0.05) -> BayesianNetwork:
    """Posterior means from the deterministic initializer; stds ``init_std_fraction * prior_std``."""
    base = nncore.init_network(spec, rng)
    rho0 = float(softplus_inv(init_std_fraction * prior_std))
    layers = [VariationalLayer(W, np.full_like(W, rho0), b, np.full_like(b, rho0), prior_std)
              for W, b in zip(base.weights, base.biases)]
    return BayesianNetwork(spec, layers, n_train)


def mean_network(net: BayesianNetwork) -> Network:
    return Network(net.spec, [ly.w_mu.copy() for ly in net.layers], [ly.b_mu.copy() for ly in net.layers])


def sample_weights(layer: VariationalLayer, rng, return_noise: bool = False):
    """One reparameterized draw ``(W, b)`` from the layer posterior."""
    ew = rng.standard_normal(layer.w_mu.shape)
    eb = rng.standard_normal(layer.b_mu.shape)
    W = layer.w_mu + layer.w_std * ew
    b = layer.b_mu + layer.b_std * eb
    return (W, b, ew, eb) if return_noise else (W, b)


def kl_gaussian(mu_q, sigma_q, mu_p=0.0, sigma_p=1.0) -> float:
    """Closed-form ``KL(N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2))`` summed over entries."""
    mu_q, sigma_q, mu_p, sigma_p = (np.asarray(v, dtype=float) for v in (mu_q, sigma_q, mu_p, sigma_p))
    if np.any(~(sigma_q > 0)) or np.any(~(sigma_p > 0)):
        raise ParameterError("standard deviations must be positive")
    kl = np.log(sigma_p / sigma_q) + (sigma_q**2 + (mu_q - mu_p) ** 2) / (2.0 * sigma_p**2) - 0.5
    return float(np.sum(kl))


def network_kl(net: BayesianNetwork) -> float:
    return sum(kl_gaussian(ly.w_mu, ly.w_std, 0.0, ly.prior_std) + kl_gaussian(ly.b_mu, ly.b_std, 0.0, ly.prior_std)
               for ly in net.layers)


def _kl_grads(layer: VariationalLayer):
    sp2 = layer.prior_std**2
    out = []
    for mu, rho in ((layer.w_mu, layer.w_rho), (layer.b_mu, layer.b_rho)):
        s = softplus(rho)
        out.append((mu / sp2, (-1.0 / s + s / sp2) * sigmoid(rho)))
    (gwm, gwr), (gbm, gbr) = out
    return [gwm, gwr, gbm, gbr]


@dataclass(frozen=True)
class FreeEnergy:
    total: float
    complexity: float  # scaled KL(q || prior)
    likelihood: float  # Monte Carlo estimate of -E_q[log p(batch | w)]


def free_energy_and_grad(net: BayesianNetwork, x, y, rng, mc_samples: int = 1, kl_scale: float = 1.0,
                         noise=None, need_grad: bool = True):
    """Batch free energy ``KL * B / n_train * kl_scale + mean_draws(sum_i NLL_i)``.

    ``noise`` fixes the unit-normal draws: a list (one entry per sample) of
    per-layer ``(eps_W, eps_b)`` lists.  Returns ``(FreeEnergy, grads)``
    with ``grads`` aligned with ``net.params`` (``None`` when
    ``need_grad`` is false).
    """
    if mc_samples < 1:
        raise ParameterError("mc_samples must be >= 1")
    X, _ = nncore._as_batch(net.spec, x)
    B = len(X)
    if B == 0:
        raise ParameterError("empty batch")
    if noise is not None:
        mc_samples = len(noise)
    acts = net.spec.activations
    grads = [np.zeros_like(p) for p in net.params] if need_grad else None
    lik = 0.0
    for s in range(mc_samples):
        Ws, bs, eps = [], [], []
        for l, ly in enumerate(net.layers):
            if noise is None:
                W, b, ew, eb = sample_weights(ly, rng, return_noise=True)
            else:
                ew, eb = noise[s][l]
                W, b = ly.w_mu + ly.w_std * ew, ly.b_mu + ly.b_std * eb
            Ws.append(W)
            bs.append(b)
            eps.append((ew, eb))
        out, cache = nncore.forward_layers(Ws, bs, acts, X)
        mean_nll, g_out = nncore.data_loss_and_grad(net.spec, out, y, "gaussian_nll")
        lik += mean_nll * B / mc_samples
        if need_grad:
            gW, gb = nncore.backward_layers(Ws, acts, cache, g_out * (B / mc_samples))
            for l, ly in enumerate(net.layers):
                ew, eb = eps[l]
                grads[4 * l] += gW[l]
                grads[4 * l + 1] += gW[l] * ew * sigmoid(ly.w_rho)
                grads[4 * l + 2] += gb[l]
                grads[4 * l + 3] += gb[l] * eb * sigmoid(ly.b_rho)
    w = kl_scale * B / net.n_train
    complexity = w * network_kl(net)
    if need_grad and w:
        for l, ly in enumerate(net.layers):
            for k, g in enumerate(_kl_grads(ly)):
                grads[4 * l + k] += w * g
    total = complexity + lik
    if not math.isfinite(total):
        raise NumericError("non-finite free energy")
    return FreeEnergy(total, complexity, lik), grads


def free_energy(net: BayesianNetwork, x, y, mc_samples: int = 1, rng=None, kl_scale: float = 1.0,
                noise=None) -> FreeEnergy:
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    return free_energy_and_grad(net, x, y, rng, mc_samples, kl_scale, noise, need_grad=False)[0]


def fixed_noise(net: BayesianNetwork, rng, mc_samples: int = 1) -> list:
    return [[(rng.standard_normal(ly.w_mu.shape), rng.standard_normal(ly.b_mu.shape)) for ly in net.layers]
            for _ in range(mc_samples)]


def train_bnn(net: BayesianNetwork, train_split, val_split, config: TrainConfig, mc_samples: int = 1,
              kl_scale: float = 1.0, freeze_std: bool = False, val_samples: int = 4):
    """Minimize the free energy with the shared Adam / early-stop / plateau loop.

    The per-step objective is the batch free energy divided by the batch
    size.  Validation uses the per-sample free energy on ``val_samples``
    fixed weight draws.  ``freeze_std`` keeps every ``rho`` at its initial
    value; with ``kl_scale=0`` this is plain maximum-likelihood training.
    """
    X, y = nncore._xy(train_split)
    Xv, yv = nncore._xy(val_split)
    if len(X) == 0 or len(Xv) == 0:
        raise ParameterError("train and validation splits must be non-empty")
    if config.max_epochs == 0:
        return net.copy(), nncore.TrainHistory()
    val_noise = fixed_noise(net, np.random.default_rng(as_seed_sequence(config.rng_seed).spawn(1)[0]), val_samples)

    def step(params, idx, rng):
        cur = net.with_params(params)
        fe, g = free_energy_and_grad(cur, X[idx], y[idx], rng, mc_samples, kl_scale)
        B = len(idx)
        g = [gi / B for gi in g]
        if freeze_std:
            g[1::2] = [np.zeros_like(gi) for gi in g[1::2]]
        return fe.total / B, g

    def val(params):
        cur = net.with_params(params)
        fe = free_energy(cur, Xv, yv, kl_scale=kl_scale, noise=val_noise)
        return fe.total / len(Xv)

    params, hist = nncore.fit_loop(net.copy().params, len(X), step, val, config)
    return net.with_params(params), hist


def _sample_passes(net: BayesianNetwork, X: np.ndarray, n: int, rng):
    """``n`` weight draws, each applied to every row of ``X`` (batched matmul)."""
    h = np.broadcast_to(X, (n, *X.shape))
    L = net.spec.depth
    for l, ly in enumerate(net.layers):
        W = ly.w_mu + ly.w_std * rng.standard_normal((n, *ly.w_mu.shape))
        b = ly.b_mu + ly.b_std * rng.standard_normal((n, *ly.b_mu.shape))
        h = np.matmul(h, W) + b[:, None, :]
        if l < L - 1:
            h = nncore._act(net.spec.activations[l], h)
    mu, sigma = nncore.split_head(net.spec, h)
    return mu[..., 0], sigma[..., 0]


def bnn_predict(net: BayesianNetwork, x, T: int, rng, level: float = 0.95, workers=None,
                chunk_passes: int = DEFAULT_CHUNK_PASSES):
    """Predictive distribution from ``T`` posterior weight draws (same moments as MC Dropout)."""
    if T < 2:
        raise ParameterError("T must be at least 2")
    X, _ = nncore._as_batch(net.spec, x)
    if net.spec.output_dim != 1:
        raise ShapeError("bnn_predict supports single-output networks")
    acc = run_chunked(lambda n, r: _sample_passes(net, X, n, r), T, rng, chunk_passes, workers)
    return compose_moments(acc, level)


def inflate_std(net: BayesianNetwork, factor: float) -> BayesianNetwork:
    """Copy with every posterior std multiplied by ``factor``."""
    params = net.copy().params
    for i in range(1, len(params), 2):
        params[i] = softplus_inv(softplus(params[i]) * factor)
    return net.with_params(params)


def with_std(net: BayesianNetwork, std: float) -> BayesianNetwork:
    """Copy with every posterior std set to ``std``."""
    params = net.copy().params
    rho = float(softplus_inv(std)) if std > 0 else -800.0
    for i in range(1, len(params), 2):
        params[i] = np.full_like(params[i], rho)
    return net.with_params(params)


def as_dict_layers(net: BayesianNetwork) -> list:
    return [{k: getattr(ly, k) for k in ("w_mu", "w_rho", "b_mu", "b_rho")} for ly in net.layers]

