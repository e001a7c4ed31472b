"""Synthetic copper-wire measurement campaigns with a known ground truth.

The true axial flux of an assembly is a chopped cosine on an extrapolated
height, multiplied by a smooth suppression factor above the control-bank
absorber tip.  Follower (control) assemblies additionally carry a narrow
dip at the coupling piece and a thermal peak near the top end.  Measured
wires are Poisson counts of ``exposure * radial_weight * true_flux``,
attenuated by the Cu-64 decay accrued before each wire is scanned.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, DomainError, ParameterError, SchemaError

ACTIVE_HEIGHT_MM = 600.0
N_AXIAL = 180
BANK_RANGE_MM = (450.0, 550.0)
# absorber tip height; 0 is full insertion, anything above the core top is withdrawn
BANK_TRAVEL_MM = 800.0
CU64_HALF_LIFE_H = 12.7
SCAN_MINUTES_PER_WIRE = 5.0

FOLLOWER_IDS = ("C5", "C7", "E5", "E7", "G5", "G7")
CENTER_ID = "E6"
_COLUMNS = "CDEFGH"
_ROWS = range(3, 9)
_EXCLUDED = {"C3", "D3", "C8", "H8"}

CAMPAIGN_FORMAT = "fluxnet-campaign"
CAMPAIGN_VERSION = 1


@dataclass(frozen=True)
class AssemblyDescriptor:
    id: str
    kind: str  # "fuel" | "follower"
    radial_weight: float

    def __post_init__(self):
        if self.kind not in ("fuel", "follower"):
            raise ConfigError(f"unknown assembly kind {self.kind!r}")
        if not 0.0 < self.radial_weight <= 1.0:
            raise ConfigError(f"radial_weight of {self.id} must lie in (0, 1]")


@dataclass(frozen=True)
class CoreLayout:
    assemblies: tuple[AssemblyDescriptor, ...]

    def __post_init__(self):
        ids = [a.id for a in self.assemblies]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate assembly ids in layout")

    def __getitem__(self, assembly_id: str) -> AssemblyDescriptor:
        for a in self.assemblies:
            if a.id == assembly_id:
                return a
        raise KeyError(assembly_id)

    def __contains__(self, assembly_id) -> bool:
        return any(a.id == assembly_id for a in self.assemblies)

    @property
    def ids(self) -> list[str]:
        return [a.id for a in self.assemblies]

    def most_central(self) -> AssemblyDescriptor:
        return max(self.assemblies, key=lambda a: a.radial_weight)

    def most_peripheral(self, kind: str = "fuel") -> AssemblyDescriptor:
        return min((a for a in self.assemblies if a.kind == kind), key=lambda a: a.radial_weight)

    @classmethod
    def default(cls, peripheral_weight: float = 0.2) -> "CoreLayout":
        """32-position core: 26 fuel assemblies and 6 followers, centred on E6.

        Radial weights fall off as a Gaussian of the grid distance from E6,
        scaled so that the farthest position (H3) gets ``peripheral_weight``.
        """
        cx, cy = _COLUMNS.index("E"), 6
        cells = [f"{c}{r}" for c in _COLUMNS for r in _ROWS if f"{c}{r}" not in _EXCLUDED]
        d2 = {p: (_COLUMNS.index(p[0]) - cx) ** 2 + (int(p[1:]) - cy) ** 2 for p in cells}
        scale = max(d2.values()) / math.log(1.0 / peripheral_weight)
        assemblies = tuple(
            AssemblyDescriptor(p, "follower" if p in FOLLOWER_IDS else "fuel", math.exp(-d2[p] / scale))
            for p in cells
        )
        return cls(assemblies)


@dataclass(frozen=True)
class AssemblyShape:
    extrap_bottom_mm: float
    extrap_top_mm: float
    coupling: float  # fraction of flux removed well above the absorber tip
    dip_z_mm: float = 0.0
    dip_width_mm: float = 1.0
    dip_depth: float = 0.0
    peak_z_mm: float = 0.0
    peak_width_mm: float = 1.0
    peak_amplitude: float = 0.0

    def __post_init__(self):
        if self.extrap_bottom_mm <= 0 or self.extrap_top_mm <= 0:
            raise ConfigError("extrapolation distances must be positive")
        if not 0.0 <= self.coupling < 1.0:
            raise ConfigError("coupling must lie in [0, 1)")
        if not 0.0 <= self.dip_depth < 1.0:
            raise ConfigError("dip depth must lie in [0, 1)")
        if self.peak_amplitude < 0:
            raise ConfigError("peak amplitude must be non-negative")


@dataclass(frozen=True)
class TrueFluxModel:
    shapes: dict  # assembly id -> AssemblyShape
    active_height_mm: float = ACTIVE_HEIGHT_MM
    n_axial: int = N_AXIAL
    bank_range_mm: tuple = BANK_RANGE_MM
    bank_travel_mm: float = BANK_TRAVEL_MM
    tip_width_mm: float = 25.0

    @property
    def z_grid(self) -> np.ndarray:
        return np.linspace(0.0, self.active_height_mm, self.n_axial)

    @property
    def dz(self) -> float:
        return self.active_height_mm / (self.n_axial - 1)

    @classmethod
    def default(cls, layout: CoreLayout, followers_featured: bool = True) -> "TrueFluxModel":
        rw = np.array([a.radial_weight for a in layout.assemblies])
        lo = rw.min()
        shapes = {}
        for i, a in enumerate(layout.assemblies):
            rel = (a.radial_weight - lo) / (1.0 - lo) if lo < 1.0 else 1.0
            coupling = 0.1 + 0.5 * rel
            kw = {}
            if a.kind == "follower":
                coupling = max(coupling, 0.5) + 0.1
                if followers_featured:
                    kw = dict(dip_z_mm=45.0, dip_width_mm=12.0, dip_depth=0.35,
                              peak_z_mm=575.0, peak_width_mm=18.0, peak_amplitude=0.3)
            # small deterministic asymmetry so assemblies are not clones
            shapes[a.id] = AssemblyShape(
                extrap_bottom_mm=80.0 + 10.0 * math.sin(1.3 * i),
                extrap_top_mm=80.0 + 10.0 * math.cos(0.7 * i),
                coupling=coupling,
                **kw,
            )
        return cls(shapes)


def true_flux(model: TrueFluxModel, assembly, bank_mm, z_mm):
    """Noise-free relative thermal flux at ``z_mm`` for a given bank position.

    ``assembly`` may be an :class:`AssemblyDescriptor` or an id.  ``z_mm`` may
    be an array; the result has its shape.
    """
    aid = assembly.id if isinstance(assembly, AssemblyDescriptor) else assembly
    try:
        s = model.shapes[aid]
    except KeyError:
        raise DomainError(f"no shape parameters for assembly {aid!r}") from None
    z = np.asarray(z_mm, dtype=float)
    h = model.active_height_mm
    if not np.all(np.isfinite(z)) or np.any(z < 0.0) or np.any(z > h):
        raise DomainError(f"z_mm outside active height [0, {h}]")
    if not (np.isfinite(bank_mm) and 0.0 <= bank_mm <= model.bank_travel_mm):
        raise DomainError(f"bank_mm={bank_mm} outside [0, {model.bank_travel_mm}]")

    h_ext = h + s.extrap_bottom_mm + s.extrap_top_mm
    center = 0.5 * (h + s.extrap_top_mm - s.extrap_bottom_mm)
    phi = np.cos(np.pi * (z - center) / h_ext)
    rod = 1.0 - s.coupling / (1.0 + np.exp(-(z - bank_mm) / model.tip_width_mm))
    phi = phi * rod
    if s.dip_depth > 0:
        phi = phi * (1.0 - s.dip_depth * np.exp(-0.5 * ((z - s.dip_z_mm) / s.dip_width_mm) ** 2))
    if s.peak_amplitude > 0:
        phi = phi * (1.0 + s.peak_amplitude * np.exp(-0.5 * ((z - s.peak_z_mm) / s.peak_width_mm) ** 2))
    return float(phi) if phi.ndim == 0 else phi


def calibrate_exposure(model: TrueFluxModel, layout: CoreLayout, target_peak_mean: float = 600.0,
                       bank_mm: float = 500.0) -> float:
    """Exposure giving the most central assembly a peak mean count of ``target_peak_mean``."""
    a = layout.most_central()
    peak = np.max(true_flux(model, a, bank_mm, model.z_grid))
    return target_peak_mean / (a.radial_weight * peak)


# -- measurement records -----------------------------------------------------


@dataclass
class AxialProfile:
    assembly: str
    z_mm: np.ndarray
    counts: np.ndarray  # decayed counts as scanned; NaN marks a missing point
    t_scan_h: float  # scan start of this wire, hours after the reference time
    # generator-side truth; not serialized
    pre_decay_counts: np.ndarray | None = field(default=None, repr=False, compare=False)
    expected_counts: np.ndarray | None = field(default=None, repr=False, compare=False)


@dataclass
class MeasurementCycle:
    cycle_id: str
    bank_mm: float
    profiles: dict  # assembly id -> AxialProfile
    t_ref_h: float = 0.0
    half_life_h: float = CU64_HALF_LIFE_H
    defect_labels: list = field(default_factory=list)

    def max_count(self) -> float:
        vals = [np.nanmax(p.counts) for p in self.profiles.values() if np.any(np.isfinite(p.counts))]
        return float(max(vals)) if vals else 0.0


@dataclass(frozen=True)
class DefectSpec:
    kind: str  # axial_shift | missing_points | under_exposure
    magnitude: float
    cycle_id: str
    assembly: str | None = None  # None: every assembly of the cycle

    KINDS = ("axial_shift", "missing_points", "under_exposure")

    def validate(self, model: TrueFluxModel) -> None:
        if self.kind not in self.KINDS:
            raise ConfigError(f"unknown defect kind {self.kind!r}")
        m = self.magnitude
        if self.kind == "axial_shift" and not abs(m) <= 0.1 * model.active_height_mm:
            raise ConfigError("axial shift must not exceed 10 % of the active height")
        if self.kind == "under_exposure" and not 0.0 < m < 1.0:
            raise ConfigError("under-exposure scale must lie in (0, 1)")
        if self.kind == "missing_points" and not (m == int(m) and 1 <= m < model.n_axial):
            raise ConfigError("missing_points magnitude must be an integer in [1, n_axial)")


def shift_profile(values: np.ndarray, k: int) -> np.ndarray:
    """Translate by ``k`` grid points toward larger z, replicating the edge value."""
    out = np.empty_like(values)
    if k > 0:
        out[k:] = values[:-k]
        out[:k] = values[0]
    elif k < 0:
        out[:k] = values[-k:]
        out[k:] = values[-1]
    else:
        out[:] = values
    return out


def _scan_schedule(n_wires: int, minutes_per_wire: float = SCAN_MINUTES_PER_WIRE) -> np.ndarray:
    return np.arange(n_wires) * minutes_per_wire / 60.0


def simulate_cycle(model: TrueFluxModel, layout: CoreLayout, bank_mm: float, exposure: float,
                   rng_seed, cycle_id: str = "C001", defects: Sequence[DefectSpec] = (),
                   noiseless: bool = False) -> MeasurementCycle:
    """One cycle of wire scans over every assembly of ``layout``.

    Counts are Poisson draws (or their means when ``noiseless``) attenuated by
    ``exp(-ln2 * t_scan / half_life)``; wires are scanned in layout order,
    five minutes apart.
    """
    if not exposure > 0:
        raise ParameterError("exposure must be positive")
    ss = rng_seed if isinstance(rng_seed, np.random.SeedSequence) else np.random.SeedSequence(int(rng_seed))
    noise_ss, defect_ss = ss.spawn(2)
    noise_rng = np.random.default_rng(noise_ss)
    defect_rng = np.random.default_rng(defect_ss)

    for d in defects:
        d.validate(model)
        if d.assembly is not None and d.assembly not in layout:
            raise ConfigError(f"defect target assembly {d.assembly!r} not in layout")

    lam = math.log(2.0) / CU64_HALF_LIFE_H
    z = model.z_grid
    t_scan = _scan_schedule(len(layout.assemblies))
    profiles = {}
    for a, t in zip(layout.assemblies, t_scan):
        scale = 1.0
        for d in defects:
            if d.kind == "under_exposure" and d.assembly in (None, a.id):
                scale *= d.magnitude
        mean = exposure * scale * a.radial_weight * true_flux(model, a, bank_mm, z)
        raw = mean.copy() if noiseless else noise_rng.poisson(mean).astype(float)
        decayed = raw * math.exp(-lam * t)
        profiles[a.id] = AxialProfile(a.id, z.copy(), decayed, float(t), pre_decay_counts=raw,
                                      expected_counts=mean)

    labels = []
    for d in defects:
        labels.append({"kind": d.kind, "magnitude": d.magnitude, "assembly": d.assembly})
        targets = layout.ids if d.assembly is None else [d.assembly]
        for aid in targets:
            p = profiles[aid]
            if d.kind == "axial_shift":
                k = int(round(d.magnitude / model.dz))
                p.counts = shift_profile(p.counts, k)
                p.pre_decay_counts = shift_profile(p.pre_decay_counts, k)
            elif d.kind == "missing_points":
                idx = defect_rng.choice(model.n_axial, size=int(d.magnitude), replace=False)
                p.counts[idx] = np.nan
                p.pre_decay_counts[idx] = np.nan

    return MeasurementCycle(cycle_id, float(bank_mm), profiles, defect_labels=labels)


def uniform_bank_sampler(lo: float = BANK_RANGE_MM[0], hi: float = BANK_RANGE_MM[1]) -> Callable:
    def sample(rng: np.random.Generator) -> float:
        return float(rng.uniform(lo, hi))
    return sample


def cycle_ids(n_cycles: int) -> list[str]:
    width = max(3, len(str(n_cycles)))
    return [f"C{i + 1:0{width}d}" for i in range(n_cycles)]


def simulate_campaign(model: TrueFluxModel, layout: CoreLayout, n_cycles: int,
                      bank_sampler: Callable | None = None, defect_specs: Iterable[DefectSpec] = (),
                      rng_seed=0, exposure: float | None = None,
                      noiseless: bool = False) -> list[MeasurementCycle]:
    """``n_cycles`` cycles with independently seeded banks and noise."""
    if n_cycles < 1:
        raise ParameterError("n_cycles must be at least 1")
    bank_sampler = bank_sampler or uniform_bank_sampler()
    exposure = exposure if exposure is not None else calibrate_exposure(model, layout)
    ids = cycle_ids(n_cycles)
    by_cycle: dict[str, list[DefectSpec]] = {}
    for d in defect_specs:
        if d.cycle_id not in ids:
            raise ConfigError(f"defect target cycle {d.cycle_id!r} not found")
        if d.assembly is not None and d.assembly not in layout:
            raise ConfigError(f"defect target assembly {d.assembly!r} not found")
        by_cycle.setdefault(d.cycle_id, []).append(d)

    cycles = []
    for cid, ss in zip(ids, np.random.SeedSequence(int(rng_seed)).spawn(n_cycles)):
        bank_ss, cycle_ss = ss.spawn(2)
        bank = bank_sampler(np.random.default_rng(bank_ss))
        cycles.append(simulate_cycle(model, layout, bank, exposure, cycle_ss, cid,
                                     by_cycle.get(cid, ()), noiseless=noiseless))
    return cycles


# -- serialization -----------------------------------------------------------


def _floats(a: np.ndarray) -> list:
    return [None if not math.isfinite(v) else float(v) for v in np.asarray(a, dtype=float)]


def campaign_to_dict(model: TrueFluxModel, layout: CoreLayout, cycles: Sequence[MeasurementCycle]) -> dict:
    return {
        "format": CAMPAIGN_FORMAT,
        "version": CAMPAIGN_VERSION,
        "layout": [asdict(a) for a in layout.assemblies],
        "model": {
            "active_height_mm": model.active_height_mm,
            "n_axial": model.n_axial,
            "bank_range_mm": list(model.bank_range_mm),
            "bank_travel_mm": model.bank_travel_mm,
            "tip_width_mm": model.tip_width_mm,
            "shapes": {k: asdict(v) for k, v in model.shapes.items()},
        },
        "cycles": [
            {
                "id": c.cycle_id,
                "bank_mm": c.bank_mm,
                "t_ref_h": c.t_ref_h,
                "half_life_h": c.half_life_h,
                "defect_labels": c.defect_labels,
                "profiles": [
                    {
                        "assembly": p.assembly,
                        "timestamps": {"scan_start_h": p.t_scan_h},
                        "z_mm": _floats(p.z_mm),
                        "counts": _floats(p.counts),
                    }
                    for p in c.profiles.values()
                ],
            }
            for c in cycles
        ],
    }


def campaign_from_dict(doc: dict):
    if doc.get("format") != CAMPAIGN_FORMAT:
        raise SchemaError("not a campaign file")
    if doc.get("version") != CAMPAIGN_VERSION:
        raise SchemaError(f"unsupported campaign version {doc.get('version')!r}")
    try:
        layout = CoreLayout(tuple(AssemblyDescriptor(**a) for a in doc["layout"]))
        m = doc["model"]
        model = TrueFluxModel(
            shapes={k: AssemblyShape(**v) for k, v in m["shapes"].items()},
            active_height_mm=m["active_height_mm"],
            n_axial=m["n_axial"],
            bank_range_mm=tuple(m["bank_range_mm"]),
            bank_travel_mm=m["bank_travel_mm"],
            tip_width_mm=m["tip_width_mm"],
        )
        cycles = []
        for c in doc["cycles"]:
            profiles = {}
            for p in c["profiles"]:
                counts = np.array([np.nan if v is None else v for v in p["counts"]], dtype=float)
                profiles[p["assembly"]] = AxialProfile(
                    p["assembly"], np.array(p["z_mm"], dtype=float), counts,
                    float(p["timestamps"]["scan_start_h"]))
            cycles.append(MeasurementCycle(c["id"], float(c["bank_mm"]), profiles,
                                           float(c["t_ref_h"]), float(c["half_life_h"]),
                                           list(c["defect_labels"])))
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"malformed campaign file: {exc}") from exc
    return model, layout, cycles


def save_campaign(path, model, layout, cycles) -> None:
    Path(path).write_text(json.dumps(campaign_to_dict(model, layout, cycles)))


def load_campaign(path):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from exc
    return campaign_from_dict(doc)


def load_defect_specs(path) -> list[DefectSpec]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read defect specs {path}: {exc}") from exc
    items = doc["defects"] if isinstance(doc, dict) else doc
    try:
        return [DefectSpec(d["kind"], float(d["magnitude"]), d["cycle_id"], d.get("assembly")) for d in items]
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed defect spec: {exc}") from exc


def check_counts(cycle: MeasurementCycle) -> None:
    for p in cycle.profiles.values():
        finite = p.counts[np.isfinite(p.counts)]
        if np.any(finite < 0):
            raise DataError(f"negative counts in {cycle.cycle_id}/{p.assembly}")
