"""Scores and reports: NRMSE, R^2, interval coverage, box-plot statistics,
and the bank-sensitivity report."""
from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import MetricError, ReportError, ShapeError
from .mcd import PredictiveDistribution
from .preprocess import savgol_filter


def _pair(pred, target):
    p = np.asarray(pred, dtype=float).ravel()
    t = np.asarray(target, dtype=float).ravel()
    if p.shape != t.shape:
        raise ShapeError(f"length mismatch: {p.size} predictions vs {t.size} targets")
    if p.size == 0:
        raise MetricError("need at least one point")
    return p, t


def rmse(pred, target) -> float:
    p, t = _pair(pred, target)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def nrmse(pred, target) -> float:
    """RMSE divided by the mean of the measured (target) values."""
    p, t = _pair(pred, target)
    m = float(np.mean(t))
    if m == 0.0:
        raise MetricError("target mean is zero; NRMSE undefined")
    return rmse(p, t) / m


def r_squared(pred, target) -> float:
    p, t = _pair(pred, target)
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    if ss_tot == 0.0:
        raise MetricError("target variance is zero; R^2 undefined")
    return 1.0 - float(np.sum((t - p) ** 2)) / ss_tot


# -- coverage ----------------------------------------------------------------


@dataclass
class CoverageReport:
    level: float
    n_points: int
    n_covered: int
    coverage: float
    kind: str = "total"

    def to_dict(self) -> dict:
        return asdict(self)


def _concat(preds) -> PredictiveDistribution:
    if isinstance(preds, PredictiveDistribution):
        return preds
    preds = list(preds)
    if not preds:
        raise MetricError("no predictions")
    fields = ("mean", "epistemic_std", "aleatoric_std", "total_std", "ci_low", "ci_high")
    return PredictiveDistribution(*(np.concatenate([np.atleast_1d(getattr(p, f)) for p in preds]) for f in fields),
                                  level=preds[0].level)


def ci_coverage(preds, targets, level: float | None = None, kind: str = "total") -> CoverageReport:
    """Fraction of ``targets`` inside the predicted interval.

    ``preds`` is a :class:`PredictiveDistribution` or a sequence of them.
    ``kind="epistemic"`` uses the epistemic-only interval (diagnostic).
    """
    pd = _concat(preds)
    level = pd.level if level is None else level
    t = np.asarray(targets, dtype=float).ravel()
    if t.size != len(pd.mean):
        raise ShapeError("predictions and targets differ in length")
    if kind == "epistemic":
        pd = PredictiveDistribution(pd.mean, pd.epistemic_std, pd.aleatoric_std, pd.epistemic_std,
                                    pd.ci_low, pd.ci_high, pd.level).with_level(level)
    elif level != pd.level:
        pd = pd.with_level(level)
    inside = (t >= pd.ci_low) & (t <= pd.ci_high)
    n = int(t.size)
    k = int(inside.sum())
    return CoverageReport(float(level), n, k, k / n if n else 0.0, kind)


def mean_relative_band_width(pd: PredictiveDistribution) -> float:
    """Mean CI width divided by the mean predicted value (profile-normalized width)."""
    return float(np.mean(pd.ci_high - pd.ci_low) / np.mean(pd.mean))


# -- box plots ---------------------------------------------------------------


@dataclass
class AssemblyScore:
    assembly: str
    cycle_ids: list
    errors: list
    q1: float
    median: float
    q3: float
    whisker_low: float
    whisker_high: float
    outliers: list = field(default_factory=list)  # [(cycle_id, value)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["outliers"] = [{"cycle_id": c, "value": v} for c, v in self.outliers]
        return d


def boxplot_stats(values: Mapping[str, float], assembly: str = "") -> AssemblyScore:
    if not values:
        raise MetricError(f"no cycles for assembly {assembly!r}")
    items = sorted(values.items())
    ids = [c for c, _ in items]
    v = np.array([x for _, x in items], dtype=float)
    q1, med, q3 = (float(q) for q in np.percentile(v, [25, 50, 75], method="linear"))
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    outliers = [(c, float(x)) for c, x in items if x < lo_fence or x > hi_fence]
    return AssemblyScore(assembly, ids, [float(x) for x in v], q1, med, q3,
                         float(inside.min()), float(inside.max()), outliers)


def boxplot_summary(errors: Mapping[str, Mapping[str, float]]) -> list:
    """``{assembly: {cycle_id: error}}`` -> one :class:`AssemblyScore` per assembly.

    Quartiles interpolate linearly between order statistics; whiskers end at
    the most extreme values within 1.5 IQR of the box.
    """
    return [boxplot_stats(per_cycle, aid) for aid, per_cycle in errors.items()]


def per_cycle_nrmse(cycle_ids, pred, target) -> dict:
    cycle_ids = np.asarray(cycle_ids)
    p, t = _pair(pred, target)
    return {str(c): nrmse(p[cycle_ids == c], t[cycle_ids == c]) for c in sorted(set(cycle_ids.tolist()))}


# -- sensitivity -------------------------------------------------------------


@dataclass
class SensitivityStats:
    assembly: str
    n_cycles: int
    bank_min_mm: float
    bank_max_mm: float
    raw_spread: float
    filtered_spread: float
    peak_mean_count: float
    poisson_noise_fraction: float  # 1/sqrt(mean peak count)
    residual_noise_fraction: float  # rms of (raw - filtered) / filtered

    def to_dict(self) -> dict:
        return asdict(self)


def _normalized(profile):
    return profile / np.mean(profile)


def max_pairwise_distance(profiles: Sequence[np.ndarray]) -> float:
    return max((float(np.linalg.norm(a - b)) for a, b in itertools.combinations(profiles, 2)), default=0.0)


def sensitivity_report(cycles, window: int = 15, poly_order: int = 3) -> dict:
    """Per-assembly spread of mean-normalized profiles across bank positions.

    Spread is the largest pairwise L2 distance between normalized profiles,
    raw and after Savitzky-Golay filtering.  Profiles with missing points
    are skipped.
    """
    banks = {round(c.bank_mm, 9) for c in cycles}
    if len(banks) < 2:
        raise ReportError("sensitivity report needs at least two distinct bank positions")
    out = {}
    ids = list(dict.fromkeys(aid for c in cycles for aid in c.profiles))
    for aid in ids:
        raw, filt, peaks, resid, bk = [], [], [], [], []
        for c in cycles:
            p = c.profiles.get(aid)
            if p is None or not np.all(np.isfinite(p.counts)) or np.mean(p.counts) <= 0:
                continue
            f = savgol_filter(p.counts, window, poly_order)
            raw.append(_normalized(p.counts))
            filt.append(_normalized(f))
            peaks.append(float(np.max(f)))
            resid.append(float(np.sqrt(np.mean(((p.counts - f) / np.maximum(f, 1e-12)) ** 2))))
            bk.append(c.bank_mm)
        if len(raw) < 2:
            continue
        peak = float(np.mean(peaks))
        out[aid] = SensitivityStats(aid, len(raw), float(min(bk)), float(max(bk)),
                                    max_pairwise_distance(raw), max_pairwise_distance(filt),
                                    peak, float(1.0 / np.sqrt(peak)) if peak > 0 else float("inf"),
                                    float(np.mean(resid)))
    return out
