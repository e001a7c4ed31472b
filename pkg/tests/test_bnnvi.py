import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fluxnet import bnnvi
from fluxnet.bnnvi import (
    BayesianNetwork, VariationalLayer, bnn_predict, free_energy, free_energy_and_grad, init_bayesian, kl_gaussian,
    mean_network, network_kl, sample_weights, train_bnn, with_std,
)
from fluxnet.errors import ParameterError, ShapeError
from fluxnet.evalmetrics import ci_coverage
from fluxnet.nncore import (AdamState, NetworkSpec, TrainConfig, evaluate_loss, forward, gaussian_nll, optimizer_step,
                            softplus, softplus_inv, split_head, train)
from oracles import random_variational_instance

SPEC = NetworkSpec(2, (5, 4), 1, "tanh", "gaussian")


@pytest.fixture
def bnet():
    return init_bayesian(SPEC, 100, np.random.default_rng(0), init_std_fraction=0.2)


# -- construction and sampling -----------------------------------------------


def test_requires_gaussian_head():
    with pytest.raises(ParameterError):
        init_bayesian(NetworkSpec(2, (3,)), 10, 0)


def test_layer_shape_validation():
    with pytest.raises(ShapeError):
        VariationalLayer(np.zeros((2, 3)), np.zeros((2, 2)), np.zeros(3), np.zeros(3))


def test_initial_std_fraction_of_prior():
    net = init_bayesian(SPEC, 10, 0, prior_std=2.0)
    for ly in net.layers:
        np.testing.assert_allclose(ly.w_std, 0.1, rtol=1e-12)
        np.testing.assert_allclose(ly.b_std, 0.1, rtol=1e-12)


def test_zero_std_sample_is_mean(bnet):
    ly = with_std(bnet, 0.0).layers[0]
    W, b = sample_weights(ly, np.random.default_rng(1))
    assert np.array_equal(W, ly.w_mu) and np.array_equal(b, ly.b_mu)


def test_sample_mean_within_three_standard_errors():
    rng = np.random.default_rng(3)
    ly = VariationalLayer(rng.standard_normal((2, 3)), np.full((2, 3), 0.3), rng.standard_normal(3),
                          np.full(3, -0.5))
    n = 10**5
    draws = [sample_weights(ly, rng) for _ in range(n)]
    W = np.mean([d[0] for d in draws], axis=0)
    b = np.mean([d[1] for d in draws], axis=0)
    assert np.all(np.abs(W - ly.w_mu) < 3 * ly.w_std / math.sqrt(n))
    assert np.all(np.abs(b - ly.b_mu) < 3 * ly.b_std / math.sqrt(n))


def test_fixed_seed_same_draw(bnet):
    a = sample_weights(bnet.layers[1], np.random.default_rng(8))
    b = sample_weights(bnet.layers[1], np.random.default_rng(8))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-6, 50.0))
def test_softplus_inverse(s):
    assert softplus(softplus_inv(s)) == pytest.approx(s, rel=1e-9)


# -- KL --------------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(mu=st.floats(-5, 5), sigma=st.floats(0.01, 10))
def test_kl_self_is_zero(mu, sigma):
    assert kl_gaussian(mu, sigma, mu, sigma) == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(mu=st.floats(-5, 5), sigma=st.floats(0.01, 10), sp=st.floats(0.1, 5))
def test_kl_nonnegative(mu, sigma, sp):
    assert kl_gaussian(mu, sigma, 0.0, sp) >= -1e-12


def test_kl_closed_form_values():
    assert kl_gaussian(1.0, 1.0, 0.0, 1.0) == pytest.approx(0.5, abs=1e-15)
    assert kl_gaussian(0.0, 2.0, 0.0, 1.0) == pytest.approx(0.806853, abs=1e-6)


def test_kl_monte_carlo_cross_check():
    rng = np.random.default_rng(0)
    w = rng.normal(0.0, 2.0, 10**6)
    log_q = -np.log(2.0) - 0.5 * (w / 2.0) ** 2
    log_p = -0.5 * w**2
    assert np.mean(log_q - log_p) == pytest.approx(kl_gaussian(0.0, 2.0), rel=0.01)


def test_kl_rejects_nonpositive_std():
    with pytest.raises(ParameterError):
        kl_gaussian(0.0, 0.0)


# -- free energy -----------------------------------------------------------


@pytest.mark.parametrize("seed", range(8))
def test_free_energy_gradient(seed):
    assert random_variational_instance(np.random.default_rng(seed)) < 1e-5


def test_mc_sample_counts_agree(bnet):
    rng = np.random.default_rng(4)
    x, y = rng.standard_normal((20, 2)), rng.standard_normal(20)
    singles = np.array([free_energy(bnet, x, y, 1, rng).total for _ in range(400)])
    many = free_energy(bnet, x, y, 64, rng).total
    se = singles.std(ddof=1) * math.sqrt(1 / 400 + 1 / 64)
    assert abs(many - singles.mean()) < 3 * se


def test_kl_weight_scales_with_batch(bnet):
    rng = np.random.default_rng(5)
    n = bnet.n_train
    x, y = rng.standard_normal((n, 2)), rng.standard_normal(n)
    full = free_energy(bnet, x, y, rng=rng)
    halves = [free_energy(bnet, x[s], y[s], rng=rng) for s in (slice(0, n // 2), slice(n // 2, n))]
    assert full.complexity == pytest.approx(network_kl(bnet), rel=1e-14)
    assert sum(h.complexity for h in halves) == pytest.approx(full.complexity, rel=1e-14)


def test_zero_std_free_energy_is_nll_of_mean_net(bnet):
    rng = np.random.default_rng(6)
    x, y = rng.standard_normal((10, 2)), rng.standard_normal(10)
    net = with_std(bnet, 1e-12)
    mu, sigma = split_head(SPEC, forward(mean_network(net), x))
    fe, _ = free_energy_and_grad(net, x, y, rng, kl_scale=0.0)
    assert fe.total == pytest.approx(gaussian_nll(y, mu[:, 0], sigma[:, 0]), rel=1e-9)


def test_sigma_driven_to_residual_scale():
    # calculus oracle: argmin_sigma of the NLL at fixed residuals is their rms
    r = np.random.default_rng(7).normal(0.0, 0.37, 2000)
    raw = [np.array(0.0)]
    state = AdamState.zeros_like(raw)
    for _ in range(3000):
        s = softplus(raw[0])
        g = np.sum(1.0 / s - r**2 / s**3) * (1.0 / (1.0 + np.exp(-raw[0]))) / len(r)
        raw, state = optimizer_step(state, raw, [np.asarray(g)], 0.01)
    assert softplus(raw[0]) == pytest.approx(np.sqrt(np.mean(r**2)), rel=1e-3)


# -- training --------------------------------------------------------------


def _toy(n, noise, rng):
    x = rng.uniform(-1, 1, (n, 2))
    return x, np.sin(2 * x[:, 0]) + 0.5 * x[:, 1] + noise * rng.standard_normal(n)


def test_frozen_zero_std_no_kl_is_maximum_likelihood():
    rng = np.random.default_rng(8)
    x, y = _toy(400, 0.1, rng)
    spec = NetworkSpec(2, (16,), 1, "tanh", "gaussian")
    cfg = TrainConfig(loss="gaussian_nll", learning_rate=5e-3, batch_size=32, max_epochs=60, rng_seed=1)
    bnet = init_bayesian(spec, 300, np.random.default_rng(2), init_std_fraction=1e-9)
    trained_b, _ = train_bnn(bnet, (x[:300], y[:300]), (x[300:], y[300:]), cfg, kl_scale=0.0, freeze_std=True)
    trained_p, _ = train(mean_network(bnet), (x[:300], y[:300]), (x[300:], y[300:]), cfg)
    nll_b = evaluate_loss(mean_network(trained_b), (x[300:], y[300:]), "gaussian_nll")
    nll_p = evaluate_loss(trained_p, (x[300:], y[300:]), "gaussian_nll")
    assert abs(nll_b - nll_p) < 0.02
    np.testing.assert_allclose(trained_b.layers[0].w_std, 1e-9, rtol=1e-6)


def test_constant_target_learns_noise_level():
    rng = np.random.default_rng(9)
    s = 0.3
    x = rng.uniform(-1, 1, (1500, 2))
    y = 2.0 + s * rng.standard_normal(1500)
    spec = NetworkSpec(2, (8,), 1, "tanh", "gaussian")
    net = init_bayesian(spec, 1200, rng)
    cfg = TrainConfig(loss="gaussian_nll", learning_rate=1e-2, batch_size=64, max_epochs=80, rng_seed=3)
    trained, _ = train_bnn(net, (x[:1200], y[:1200]), (x[1200:], y[1200:]), cfg)
    pd = bnn_predict(trained, x[1200:], 200, 0)
    assert np.mean(pd.aleatoric_std) == pytest.approx(s, rel=0.2)


def test_wide_pyramid_architecture_trains(desk_small):
    from fluxnet.pipeline import train_settings, training_splits

    s = train_settings("bnn", {"learning_rate": 1e-4, "batch_size": 16})
    tr, _, va = training_splits(desk_small["E6"], s, 0)
    spec = NetworkSpec(2, (157, 137, 86, 32), 1, "relu", "gaussian")
    net = init_bayesian(spec, len(tr), np.random.default_rng(0))
    _, hist = train_bnn(net, tr, va, TrainConfig(loss="gaussian_nll", learning_rate=1e-4, batch_size=16,
                                                 max_epochs=6))
    assert min(hist.val_loss[1:]) < hist.val_loss[0]
    assert hist.val_loss[-1] < hist.val_loss[0]


# -- prediction ------------------------------------------------------------


def test_zero_std_collapses_to_mean_network(bnet):
    x = np.random.default_rng(10).standard_normal((6, 2))
    pd = bnn_predict(with_std(bnet, 0.0), x, 20, 0)
    mu, sigma = split_head(SPEC, forward(mean_network(bnet), x))
    assert np.array_equal(pd.epistemic_std, np.zeros(6))
    np.testing.assert_allclose(pd.mean, mu[:, 0], rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(pd.aleatoric_std, sigma[:, 0], rtol=1e-12)


def test_shared_moment_composition(monkeypatch, bnet):
    def two_passes(net, X, n, rng):
        mu = np.tile(np.array([[1.0], [3.0]]), (n // 2, len(X)))
        return mu, np.zeros_like(mu)

    monkeypatch.setattr(bnnvi, "_sample_passes", two_passes)
    pd = bnn_predict(bnet, np.zeros((1, 2)), 2, 0)
    assert pd.mean[0] == 2.0
    assert pd.epistemic_std[0] ** 2 == pytest.approx(2.0, rel=1e-15)
    assert pd.total_std[0] == pytest.approx(math.sqrt(2.0), rel=1e-15)


def test_bnn_predict_worker_independent(bnet):
    x = np.ones((3, 2))
    a = bnn_predict(bnet, x, 120, 5, workers=1, chunk_passes=25)
    b = bnn_predict(bnet, x, 120, 5, workers=2, chunk_passes=25)
    assert np.array_equal(a.mean, b.mean) and np.array_equal(a.total_std, b.total_std)


def test_inflating_std_widens_epistemic(bnet):
    x = np.ones((3, 2))
    a = bnn_predict(bnet, x, 400, 5)
    b = bnn_predict(bnnvi.inflate_std(bnet, 3.0), x, 400, 5)
    assert np.all(b.epistemic_std > a.epistemic_std)


def test_desk_bnn_coverage(desk, desk_models):
    for aid in ("E6", "H3"):
        from fluxnet.pipeline import predict_bundle

        hold = desk["holdout"][aid]
        pd = predict_bundle(desk_models.get("bnn", aid), hold.x, 500, 0.95, 1)
        assert 0.90 <= ci_coverage(pd, hold.y).coverage <= 0.99
