"""Raw campaign -> supervised regression datasets.

Order of operations: decay correction, low-count rejection, optional
Savitzky-Golay smoothing, z-score normalization.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, NormalizationError, ParameterError, SchemaError
from .synthdata import AxialProfile, MeasurementCycle

DEFAULT_SMOOTH = (15, 3)
DEFAULT_FRACTIONS = (0.64, 0.20, 0.16)
REJECT_THRESHOLD = 100.0


# -- decay and rejection -----------------------------------------------------


def decay_correct(counts, t_scan, t_ref, half_life):
    """Scale counts back to the reference time: ``counts * 2**((t_scan - t_ref) / half_life)``."""
    if not half_life > 0:
        raise ParameterError("half_life must be positive")
    counts = np.asarray(counts, dtype=float)
    for name, v in (("t_scan", t_scan), ("t_ref", t_ref), ("half_life", half_life)):
        if not np.all(np.isfinite(v)):
            raise DataError(f"non-finite {name}")
    if np.any(np.isinf(counts)):
        raise DataError("non-finite counts")
    return counts * np.exp(math.log(2.0) * (np.asarray(t_scan, dtype=float) - t_ref) / half_life)


def decay_correct_cycle(cycle: MeasurementCycle) -> MeasurementCycle:
    profiles = {
        aid: replace(p, counts=decay_correct(p.counts, p.t_scan_h, cycle.t_ref_h, cycle.half_life_h),
                     t_scan_h=cycle.t_ref_h)
        for aid, p in cycle.profiles.items()
    }
    return replace(cycle, profiles=profiles)


def reject_low_count_cycles(cycles: Sequence[MeasurementCycle], threshold: float = REJECT_THRESHOLD):
    """Split cycles into (kept, rejected); a cycle is rejected iff its global max count <= threshold."""
    if not threshold > 0:
        raise ParameterError("threshold must be positive")
    kept, rejected = [], []
    for c in cycles:
        (kept if c.max_count() > threshold else rejected).append(c)
    return kept, rejected


# -- z-score -----------------------------------------------------------------


@dataclass(frozen=True)
class NormalizationState:
    mean: tuple
    std: tuple

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d) -> "NormalizationState":
        return cls(tuple(float(v) for v in d["mean"]), tuple(float(v) for v in d["std"]))


def zscore_fit(values) -> NormalizationState:
    """Per-column mean and population std.  1-D input is treated as one feature."""
    v = np.asarray(values, dtype=float)
    v2 = v.reshape(-1, 1) if v.ndim == 1 else v
    if v2.shape[0] < 2:
        raise NormalizationError("z-score fit needs at least two values")
    if not np.all(np.isfinite(v2)):
        raise NormalizationError("non-finite values in z-score fit")
    mean = v2.mean(axis=0)
    std = v2.std(axis=0)
    if np.any(std <= 0):
        raise NormalizationError("zero variance feature cannot be normalized")
    return NormalizationState(tuple(float(m) for m in mean), tuple(float(s) for s in std))


def zscore_apply(values, state: NormalizationState):
    v = np.asarray(values, dtype=float)
    mean, std = np.array(state.mean), np.array(state.std)
    if v.ndim <= 1 and len(state.mean) == 1:
        return (v - mean[0]) / std[0]
    return (v - mean) / std


def zscore_invert(normalized, state: NormalizationState):
    v = np.asarray(normalized, dtype=float)
    mean, std = np.array(state.mean), np.array(state.std)
    if v.ndim <= 1 and len(state.mean) == 1:
        return v * std[0] + mean[0]
    return v * std + mean


# -- Savitzky-Golay ----------------------------------------------------------


@lru_cache(maxsize=32)
def savgol_matrix(n: int, window: int, poly_order: int) -> np.ndarray:
    """Linear operator ``S`` with ``smoothed = S @ profile``.

    Row ``i`` is the least-squares polynomial fit over the window centred at
    ``i``, evaluated at ``i``.  Near the ends the window is truncated to the
    available points and the fit stays centred on ``i`` (no padding); if the
    truncated window is too short for ``poly_order`` the order drops to
    ``len - 1``.
    """
    half = window // 2
    S = np.zeros((n, n))
    for i in range(n):
        lo, hi = max(0, i - half), min(n, i + half + 1)
        t = np.arange(lo, hi) - i
        order = min(poly_order, hi - lo - 1)
        V = np.vander(t.astype(float), order + 1, increasing=True)
        # value at t=0 is the constant coefficient: first row of pinv(V)
        S[i, lo:hi] = np.linalg.pinv(V)[0]
    S.setflags(write=False)
    return S


def savgol_filter(profile, window: int = DEFAULT_SMOOTH[0], poly_order: int = DEFAULT_SMOOTH[1]):
    y = np.asarray(profile, dtype=float)
    if y.ndim != 1:
        raise ParameterError("savgol_filter expects a 1-D profile")
    if int(window) != window or window % 2 == 0 or not 3 <= window <= max(3, len(y)):
        raise ParameterError(f"window must be an odd integer in [3, {len(y)}], got {window}")
    if int(poly_order) != poly_order or not 0 <= poly_order < window:
        raise ParameterError("poly_order must satisfy 0 <= poly_order < window")
    return savgol_matrix(len(y), int(window), int(poly_order)) @ y


# -- datasets ----------------------------------------------------------------


@dataclass
class RegressionDataset:
    """Supervised samples for one assembly: ``x = (bank_mm, z_mm) -> y``.

    ``y`` is the processed target (smoothed, and normalized when
    ``y_norm`` is set); ``y_raw`` keeps the decay-corrected counts.  ``x``
    is normalized iff ``x_norm`` is set.
    """

    assembly: str
    x: np.ndarray
    y: np.ndarray
    y_raw: np.ndarray
    cycle_ids: np.ndarray
    x_norm: NormalizationState | None = None
    y_norm: NormalizationState | None = None
    settings: dict = field(default_factory=dict)
    missing: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "RegressionDataset":
        return replace(self, x=self.x[idx], y=self.y[idx], y_raw=self.y_raw[idx],
                       cycle_ids=self.cycle_ids[idx])

    @property
    def x_physical(self) -> np.ndarray:
        return zscore_invert(self.x, self.x_norm) if self.x_norm else self.x

    @property
    def y_processed(self) -> np.ndarray:
        return zscore_invert(self.y, self.y_norm) if self.y_norm else self.y

    def denormalized(self) -> "RegressionDataset":
        return replace(self, x=self.x_physical, y=self.y_processed, x_norm=None, y_norm=None)

    def normalized_with(self, x_norm: NormalizationState, y_norm: NormalizationState) -> "RegressionDataset":
        base = self.denormalized()
        return replace(base, x=zscore_apply(base.x, x_norm), y=zscore_apply(base.y, y_norm),
                       x_norm=x_norm, y_norm=y_norm)


def build_dataset(cycles: Sequence[MeasurementCycle], smooth=None, normalize: bool = False,
                  assemblies: Iterable[str] | None = None) -> dict:
    """One :class:`RegressionDataset` per assembly from decay-corrected cycles.

    NaN (missing) points are excluded; an assembly absent from a cycle is
    recorded in ``missing`` rather than filled in.  With ``normalize`` the
    inputs and the target are z-scored on the whole dataset.
    """
    if assemblies is None:
        seen = {}
        for c in cycles:
            for aid in c.profiles:
                seen.setdefault(aid, None)
        assemblies = list(seen)
    out = {}
    for aid in assemblies:
        xs, ys, raws, cids, missing = [], [], [], [], []
        for c in cycles:
            p = c.profiles.get(aid)
            if p is None:
                missing.append(c.cycle_id)
                continue
            raw = np.asarray(p.counts, dtype=float)
            ok = np.isfinite(raw)
            y = raw
            if smooth is not None:
                y = np.full_like(raw, np.nan)
                # smoothing runs on the contiguous finite profile only
                y[ok] = savgol_filter(raw[ok], *smooth) if ok.sum() >= smooth[0] else raw[ok]
            xs.append(np.column_stack([np.full(ok.sum(), c.bank_mm), p.z_mm[ok]]))
            ys.append(y[ok])
            raws.append(raw[ok])
            cids.append(np.full(ok.sum(), c.cycle_id, dtype=object))
        if not xs:
            raise DataError(f"assembly {aid!r} absent from every cycle")
        ds = RegressionDataset(
            aid, np.vstack(xs), np.concatenate(ys), np.concatenate(raws), np.concatenate(cids),
            settings={"smooth": list(smooth) if smooth else None, "normalize": bool(normalize)},
            missing=missing,
        )
        if not (np.all(np.isfinite(ds.x)) and np.all(np.isfinite(ds.y))):
            raise DataError(f"non-finite samples for {aid}")
        if normalize:
            ds = ds.normalized_with(zscore_fit(ds.x), zscore_fit(ds.y))
        out[aid] = ds
    return out


def _allocate(n: int, fractions) -> list[int]:
    # floors, then leftover samples by largest fractional part; ties favour earlier splits
    exact = [Fraction(n) * Fraction(f).limit_denominator(10**9) for f in fractions]
    sizes = [math.floor(e) for e in exact]
    order = sorted(range(len(exact)), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def partition(dataset: RegressionDataset, fractions=DEFAULT_FRACTIONS, rng_seed=0):
    """Random disjoint (train, test, validation) split."""
    if len(fractions) != 3 or any(not f > 0 for f in fractions):
        raise ParameterError("fractions must be three positive numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ParameterError(f"fractions must sum to 1, got {sum(fractions)}")
    n_train, n_test, n_val = _allocate(len(dataset), fractions)
    perm = np.random.default_rng(rng_seed).permutation(len(dataset))
    return (dataset.subset(np.sort(perm[:n_train])),
            dataset.subset(np.sort(perm[n_train:n_train + n_test])),
            dataset.subset(np.sort(perm[n_train + n_test:])))


def normalize_splits(train: RegressionDataset, *others: RegressionDataset):
    """Fit input and target z-scores on ``train`` and apply them to every split."""
    base = train.denormalized()
    xs, ys = zscore_fit(base.x), zscore_fit(base.y)
    return tuple(d.normalized_with(xs, ys) for d in (train, *others))


def preprocess_campaign(cycles: Sequence[MeasurementCycle], threshold: float = REJECT_THRESHOLD):
    """Decay-correct then reject; returns (kept, rejected)."""
    return reject_low_count_cycles([decay_correct_cycle(c) for c in cycles], threshold)


# -- files -------------------------------------------------------------------

CSV_COLUMNS = ("cycle_id", "assembly", "bank_mm", "z_mm", "y_raw", "y_processed")


def write_dataset(ds: RegressionDataset, csv_path) -> None:
    """Columnar CSV plus a ``.json`` sidecar with normalization and settings."""
    csv_path = Path(csv_path)
    x = ds.x_physical
    yp = ds.y_processed
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for cid, (b, z), r, p in zip(ds.cycle_ids, x, ds.y_raw, yp):
            w.writerow([cid, ds.assembly, repr(float(b)), repr(float(z)), repr(float(r)), repr(float(p))])
    side = {
        "assembly": ds.assembly,
        "settings": ds.settings,
        "missing_cycles": ds.missing,
        "x_norm": ds.x_norm.to_dict() if ds.x_norm else None,
        "y_norm": ds.y_norm.to_dict() if ds.y_norm else None,
    }
    csv_path.with_suffix(".json").write_text(json.dumps(side, indent=2))


def read_dataset(csv_path, assembly: str | None = None) -> RegressionDataset:
    """Read a dataset CSV (physical units).  Normalization is not re-applied.

    ``assembly`` filters rows of a multi-assembly file such as a holdout set.
    """
    csv_path = Path(csv_path)
    try:
        with csv_path.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {csv_path}: {exc}") from exc
    if rows and set(CSV_COLUMNS) - set(rows[0]):
        raise SchemaError(f"{csv_path}: missing columns {set(CSV_COLUMNS) - set(rows[0])}")
    if assembly is not None:
        rows = [r for r in rows if r["assembly"] == assembly]
    if not rows:
        raise DataError(f"{csv_path}: no samples")
    names = {r["assembly"] for r in rows}
    settings = {}
    side = csv_path.with_suffix(".json")
    if side.exists():
        settings = json.loads(side.read_text()).get("settings", {})
    try:
        x = np.array([[float(r["bank_mm"]), float(r["z_mm"])] for r in rows])
        y_raw = np.array([float(r["y_raw"]) for r in rows])
        y = np.array([float(r["y_processed"]) for r in rows])
    except ValueError as exc:
        raise DataError(f"{csv_path}: non-numeric value ({exc})") from exc
    return RegressionDataset(
        assembly if assembly is not None else (names.pop() if len(names) == 1 else "*"),
        x, y, y_raw, np.array([r["cycle_id"] for r in rows], dtype=object), settings=settings)


def read_table(csv_path) -> list[dict]:
    with Path(csv_path).open(newline="") as fh:
        return list(csv.DictReader(fh))
