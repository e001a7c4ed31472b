import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import CENTRAL, DESK_SETTINGS, DESK_SEED, PERIPHERAL
from fluxnet.errors import MetricError, ReportError, ShapeError
from fluxnet.evalmetrics import (
    boxplot_stats, boxplot_summary, ci_coverage, max_pairwise_distance, mean_relative_band_width, nrmse,
    per_cycle_nrmse, r_squared, rmse, sensitivity_report,
)
from fluxnet.mcd import PredictiveDistribution
from fluxnet.pipeline import predict_bundle, train_model
from fluxnet.preprocess import build_dataset, preprocess_campaign
from fluxnet.synthdata import DefectSpec, simulate_campaign, simulate_cycle


def _pd(mean, std, level=0.95):
    mean = np.asarray(mean, dtype=float)
    std = np.broadcast_to(np.asarray(std, dtype=float), mean.shape).copy()
    z = np.zeros_like(mean)
    return PredictiveDistribution(mean, z, std, std, mean, mean).with_level(level)


# -- point metrics -----------------------------------------------------------


def test_worked_examples():
    assert rmse([1, 2, 3], [1, 2, 5]) == pytest.approx(np.sqrt(4 / 3))
    assert nrmse([1, 2, 3], [1, 2, 5]) == pytest.approx(np.sqrt(4 / 3) / (8 / 3))
    assert r_squared([1, 2, 3], [1, 2, 3]) == 1.0
    assert r_squared([2, 2, 2], [1, 2, 3]) == 0.0


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.1, 100), min_size=2, max_size=40), st.floats(0.5, 10))
def test_nrmse_scale_invariant(values, k):
    t = np.array(values)
    p = t * 1.1
    assert nrmse(k * p, k * t) == pytest.approx(nrmse(p, t), rel=1e-9)


def test_metric_errors():
    with pytest.raises(ShapeError):
        rmse([1, 2], [1])
    with pytest.raises(MetricError):
        nrmse([1, -1], [1, -1])
    with pytest.raises(MetricError):
        r_squared([1, 2], [3, 3])
    with pytest.raises(MetricError):
        rmse([], [])


# -- coverage ----------------------------------------------------------------


def test_targets_at_means_fully_covered():
    rep = ci_coverage(_pd([1.0, 2.0, 3.0], 0.5), [1.0, 2.0, 3.0])
    assert rep.coverage == 1.0 and rep.n_covered == 3


def test_gaussian_targets_nominal_coverage():
    rng = np.random.default_rng(0)
    mean = rng.normal(10, 2, 10**4)
    y = mean + rng.standard_normal(10**4) * 0.7
    assert 0.94 <= ci_coverage(_pd(mean, 0.7), y).coverage <= 0.96


def test_level_zero_covers_nothing():
    rng = np.random.default_rng(1)
    mean = rng.standard_normal(1000)
    assert ci_coverage(_pd(mean, 1.0), mean + rng.standard_normal(1000), level=0.0).coverage == 0.0


def test_epistemic_interval_is_narrower():
    mean = np.zeros(4)
    pd = PredictiveDistribution(mean, np.full(4, 0.1), np.ones(4), np.full(4, np.sqrt(1.01)), mean, mean)
    pd = pd.with_level(0.95)
    y = np.array([0.05, 0.5, -0.5, 3.0])
    assert ci_coverage(pd, y, kind="epistemic").coverage == 0.25
    assert ci_coverage(pd, y).coverage == 0.75


def test_coverage_over_a_list():
    rep = ci_coverage([_pd([0.0], 1.0), _pd([0.0], 1.0)], [0.0, 5.0])
    assert rep.n_points == 2 and rep.coverage == 0.5


def test_relative_band_width():
    pd = _pd([10.0, 30.0], 1.0)
    assert mean_relative_band_width(pd) == pytest.approx(2 * 1.959964 / 20, rel=1e-6)


# -- box plots ---------------------------------------------------------------


def test_identical_errors_zero_width_box():
    s = boxplot_stats({f"C{i}": 0.05 for i in range(7)}, "E6")
    assert s.q1 == s.median == s.q3 == s.whisker_low == s.whisker_high == 0.05
    assert s.outliers == []


def test_single_outlier_flagged():
    vals = {f"C{i:02d}": float(i) for i in range(1, 10)}
    vals["C10"] = 100.0
    s = boxplot_stats(vals)
    assert s.outliers == [("C10", 100.0)]
    assert s.whisker_high == 9.0 and s.whisker_low == 1.0
    assert s.median == 5.5


def test_boxplot_empty():
    with pytest.raises(MetricError):
        boxplot_stats({}, "E6")


def test_per_cycle_nrmse_and_summary():
    ids = np.array(["A", "A", "B", "B"])
    errs = per_cycle_nrmse(ids, [1.0, 1.0, 2.0, 2.0], [1.0, 1.0, 1.0, 1.0])
    assert errs == {"A": 0.0, "B": 1.0}
    summary = boxplot_summary({"E6": errs})
    assert summary[0].assembly == "E6" and summary[0].median == 0.5


@pytest.fixture(scope="module")
def pairs(core):
    layout, model = core
    kept, _ = preprocess_campaign(simulate_campaign(model, layout, 86, rng_seed=7))
    ids = ["E5", "E6", "G5", "F6"]
    tr = build_dataset(kept[:76], smooth=(15, 3), assemblies=ids)
    ho = build_dataset(kept[76:], assemblies=ids)
    med = {}
    for aid in ids:
        pd = predict_bundle(train_model(tr[aid], "dnn", DESK_SETTINGS["dnn"], DESK_SEED), ho[aid].x)
        med[aid] = boxplot_stats(per_cycle_nrmse(ho[aid].cycle_ids, pd.mean, ho[aid].y_raw), aid).median
    return med


@pytest.mark.parametrize("follower,fuel", [("E5", "E6"), ("G5", "F6")])
def test_follower_error_not_below_fuel(pairs, follower, fuel):
    assert pairs[follower] >= pairs[fuel]


# -- sensitivity -------------------------------------------------------------


def test_sensitivity_central_exceeds_peripheral(core):
    layout, model = core
    cycles = [simulate_cycle(model, layout, b, 1.0, 0, f"C{i}", noiseless=True)
              for i, b in enumerate(np.linspace(450, 550, 6))]
    rep = sensitivity_report(cycles)
    assert rep[CENTRAL].raw_spread > rep[PERIPHERAL].raw_spread > 0
    # noiseless profiles are smooth, so filtering barely changes the spread
    assert rep[CENTRAL].filtered_spread == pytest.approx(rep[CENTRAL].raw_spread, rel=0.05)


def test_filtering_reduces_noisy_spread(core):
    layout, model = core
    cycles = simulate_campaign(model, layout, 12, rng_seed=3)
    weak = [DefectSpec("under_exposure", 0.2, c.cycle_id) for c in cycles]
    under = simulate_campaign(model, layout, 12, rng_seed=3, defect_specs=weak)
    rep = sensitivity_report(under)
    for s in rep.values():
        assert s.filtered_spread < s.raw_spread
    base = sensitivity_report(cycles)
    assert rep[PERIPHERAL].raw_spread > base[PERIPHERAL].raw_spread


def test_sensitivity_needs_two_banks(core):
    layout, model = core
    cycles = [simulate_cycle(model, layout, 500.0, 1.0, s, f"C{s}") for s in range(3)]
    with pytest.raises(ReportError):
        sensitivity_report(cycles)


def test_max_pairwise_distance():
    assert max_pairwise_distance([np.zeros(2), np.array([3.0, 4.0]), np.ones(2)]) == 5.0
    assert max_pairwise_distance([np.ones(3)]) == 0.0


# -- desk models -------------------------------------------------------------


def test_r_squared_central_above_peripheral(desk, desk_models):
    r2 = {}
    for aid in (CENTRAL, PERIPHERAL):
        hold = desk["holdout"][aid]
        r2[aid] = r_squared(predict_bundle(desk_models.get("dnn", aid), hold.x).mean, hold.y_raw)
    assert r2[CENTRAL] > r2[PERIPHERAL]
