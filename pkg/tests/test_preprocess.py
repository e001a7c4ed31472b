import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fluxnet.errors import DataError, NormalizationError, ParameterError
from fluxnet.preprocess import (
    _allocate, build_dataset, decay_correct, decay_correct_cycle, normalize_splits, partition,
    preprocess_campaign, read_dataset, reject_low_count_cycles, savgol_filter, savgol_matrix, write_dataset,
    zscore_apply, zscore_fit, zscore_invert,
)
from fluxnet.synthdata import (AxialProfile, CoreLayout, DefectSpec, MeasurementCycle, TrueFluxModel,
                               simulate_campaign, true_flux)


@pytest.fixture(scope="module")
def core():
    layout = CoreLayout.default()
    return layout, TrueFluxModel.default(layout)


def _cycle(values, cid="C001"):
    values = np.asarray(values, dtype=float)
    return MeasurementCycle(cid, 500.0, {"E6": AxialProfile("E6", np.arange(len(values), dtype=float), values, 0.0)})


# -- decay correction ------------------------------------------------------


def test_decay_identity():
    c = np.array([3.0, 17.0, 250.0])
    assert np.array_equal(decay_correct(c, 4.0, 4.0, 12.7), c)


def test_decay_one_half_life_doubles():
    assert decay_correct(500.0, 12.7, 0.0, 12.7) == pytest.approx(1000.0, rel=1e-15)


def test_decay_recovers_generator_counts(core):
    layout, model = core
    for cyc in simulate_campaign(model, layout, 3, rng_seed=11):
        fixed = decay_correct_cycle(cyc)
        for aid, p in cyc.profiles.items():
            corrected = fixed.profiles[aid].counts
            np.testing.assert_allclose(corrected, p.pre_decay_counts, rtol=1e-13, atol=0)
            # the pre-decay draws are integers, so rounding recovers them exactly
            assert np.array_equal(np.round(corrected), p.pre_decay_counts)


def test_decay_bad_half_life():
    with pytest.raises(ParameterError):
        decay_correct(1.0, 0.0, 0.0, 0.0)


# -- rejection -------------------------------------------------------------


def test_reject_boundary():
    above = np.zeros(180)
    above[40] = 101
    at = np.zeros(180)
    at[40] = 100
    kept, rejected = reject_low_count_cycles([_cycle(above, "C001"), _cycle(at, "C002")])
    assert [c.cycle_id for c in kept] == ["C001"]
    assert [c.cycle_id for c in rejected] == ["C002"]


def test_105_cycles_with_19_under_exposed(core):
    layout, model = core
    rng = np.random.default_rng(0)
    bad = sorted(rng.choice(105, size=19, replace=False))
    ids = [f"C{i + 1:03d}" for i in bad]
    specs = [DefectSpec("under_exposure", 0.1, cid) for cid in ids]
    cycles = simulate_campaign(model, layout, 105, defect_specs=specs, rng_seed=3)
    kept, rejected = preprocess_campaign(cycles)
    assert len(kept) == 86
    assert sorted(c.cycle_id for c in rejected) == ids


# -- z-score ---------------------------------------------------------------


def test_zscore_population_std():
    s = zscore_fit([2.0, 4.0, 6.0])
    assert s.mean == (4.0,)
    assert s.std[0] == pytest.approx(1.632993, abs=1e-6)
    assert zscore_apply(4.0, s) == 0.0


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 40), st.integers(1, 3)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_zscore_round_trip(x):
    if np.any(x.std(axis=0) < 1e-3):
        return
    s = zscore_fit(x)
    assert np.max(np.abs(zscore_invert(zscore_apply(x, s), s) - x)) < 1e-12 * max(1.0, np.abs(x).max())


def test_zscore_standard_normal_sample():
    x = np.random.default_rng(1).standard_normal(10**5)
    n = zscore_apply(x, zscore_fit(x))
    assert -0.02 <= n.mean() <= 0.02
    assert 0.98 <= n.std() <= 1.02


def test_zscore_degenerate():
    with pytest.raises(NormalizationError):
        zscore_fit([1.0, 1.0, 1.0])
    with pytest.raises(NormalizationError):
        zscore_fit([1.0])


# -- Savitzky-Golay --------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(coef=st.lists(st.floats(-5, 5), min_size=4, max_size=4),
       window=st.sampled_from([5, 7, 11, 15, 21]), order=st.integers(0, 3))
def test_savgol_reproduces_polynomials(coef, window, order):
    if order > window - 1:
        return
    t = np.linspace(-1.0, 1.0, 180)
    y = np.polyval(coef[: order + 1], t)
    assert np.max(np.abs(savgol_filter(y, window, order) - y)) < 1e-9


def test_savgol_cubic_window_11():
    t = np.arange(180.0) / 179.0
    y = 3.0 - 2.0 * t + 5.0 * t**2 - 4.0 * t**3
    assert np.max(np.abs(savgol_filter(y, 11, 3) - y)) < 1e-9


def test_savgol_window_checks():
    with pytest.raises(ParameterError):
        savgol_filter(np.arange(10.0), 1, 0)
    with pytest.raises(ParameterError):
        savgol_filter(np.arange(10.0), 4, 2)
    with pytest.raises(ParameterError):
        savgol_filter(np.arange(10.0), 5, 5)


def test_savgol_order0_moving_average():
    out = savgol_filter([1.0, 2.0, 3.0], 3, 0)
    assert out[1] == pytest.approx(2.0, abs=1e-15)
    # edges use the truncated window
    assert out[0] == pytest.approx(1.5, abs=1e-15)


def test_savgol_interior_matches_scipy():
    from scipy.signal import savgol_coeffs

    S = savgol_matrix(180, 15, 3)
    np.testing.assert_allclose(S[90, 83:98], savgol_coeffs(15, 3, use="dot"), atol=1e-13)


def test_savgol_reduces_noise(core):
    layout, model = core
    truth = 600.0 * true_flux(model, "E6", 500.0, model.z_grid) / true_flux(model, "E6", 500.0, 300.0)
    noisy = np.random.default_rng(4).poisson(truth).astype(float)
    err = lambda y: np.sqrt(np.mean((y - truth) ** 2)) / truth.mean()
    assert err(savgol_filter(noisy, 15, 3)) < err(noisy)


# -- datasets and partition -------------------------------------------------


@pytest.fixture(scope="module")
def cycles77(core):
    layout, model = core
    kept, _ = preprocess_campaign(simulate_campaign(model, layout, 77, rng_seed=8))
    return kept


def test_13860_samples(cycles77):
    assert len(cycles77) == 77
    ds = build_dataset(cycles77, assemblies=["E6"])["E6"]
    assert len(ds) == 13860


def test_normalized_dataset_moments(cycles77):
    ds = build_dataset(cycles77, smooth=(15, 3), normalize=True, assemblies=["H3"])["H3"]
    assert abs(ds.y.mean()) < 1e-9
    assert abs(ds.y.std() - 1.0) < 1e-9
    np.testing.assert_allclose(ds.x.mean(axis=0), 0.0, atol=1e-9)


def test_assembly_order_irrelevant(cycles77):
    a = build_dataset(cycles77[:10], smooth=(15, 3), normalize=True, assemblies=["E6", "H3"])
    b = build_dataset(cycles77[:10], smooth=(15, 3), normalize=True, assemblies=["H3", "E6"])
    for aid in ("E6", "H3"):
        assert np.array_equal(a[aid].y, b[aid].y)
        assert a[aid].y_norm == b[aid].y_norm


def test_missing_points_excluded(core):
    layout, model = core
    cycles = simulate_campaign(model, layout, 2, rng_seed=1,
                               defect_specs=[DefectSpec("missing_points", 5, "C001", "E6")])
    ds = build_dataset(cycles, smooth=(15, 3), assemblies=["E6"])["E6"]
    assert len(ds) == 355
    assert np.all(np.isfinite(ds.y))


def test_partition_sizes():
    assert _allocate(13860, (0.64, 0.20, 0.16)) == [8870, 2772, 2218]


@settings(max_examples=40, deadline=None)
@given(n=st.integers(3, 5000))
def test_allocation_sums(n):
    sizes = _allocate(n, (0.64, 0.20, 0.16))
    assert sum(sizes) == n
    assert all(abs(s - n * f) < 1 for s, f in zip(sizes, (0.64, 0.20, 0.16)))


def test_partition_is_a_partition(cycles77):
    ds = build_dataset(cycles77[:5], assemblies=["E6"])["E6"]
    ds.cycle_ids = np.arange(len(ds))  # unique row labels for the check
    tr, te, va = partition(ds, rng_seed=3)
    ids = [set(s.cycle_ids.tolist()) for s in (tr, te, va)]
    assert set().union(*ids) == set(range(len(ds)))
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    tr2, _, _ = partition(ds, rng_seed=3)
    assert np.array_equal(tr.x, tr2.x)


def test_partition_bad_fractions(cycles77):
    ds = build_dataset(cycles77[:2], assemblies=["E6"])["E6"]
    with pytest.raises(ParameterError):
        partition(ds, (0.5, 0.5, 0.5))


def test_normalize_splits_fit_on_train_only(cycles77):
    ds = build_dataset(cycles77[:5], assemblies=["E6"])["E6"]
    tr, te, va = normalize_splits(*partition(ds, rng_seed=0))
    assert abs(tr.y.mean()) < 1e-9 and abs(tr.y.std() - 1) < 1e-9
    assert te.y_norm == tr.y_norm
    np.testing.assert_allclose(te.y_processed, partition(ds, rng_seed=0)[1].y, rtol=1e-12)


def test_dataset_csv_round_trip(cycles77, tmp_path):
    ds = build_dataset(cycles77[:3], smooth=(15, 3), normalize=True, assemblies=["E6"])["E6"]
    write_dataset(ds, tmp_path / "E6.csv")
    back = read_dataset(tmp_path / "E6.csv")
    assert np.array_equal(back.x, ds.x_physical)
    assert np.array_equal(back.y, ds.y_processed)
    assert np.array_equal(back.y_raw, ds.y_raw)
    assert back.settings["smooth"] == [15, 3]


def test_read_dataset_missing(tmp_path):
    with pytest.raises(DataError):
        read_dataset(tmp_path / "none.csv")
