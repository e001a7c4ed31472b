"""Config-driven pipeline: gen -> prep -> hpo -> train -> predict -> eval.

Every stage declares the files it reads and writes.  A stage is skipped
when its key (stage settings, stage seed and input digests) matches the
previous run recorded in ``manifest.json`` and its outputs still carry the
recorded digests.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .bnnvi import bnn_predict, init_bayesian, train_bnn
from .errors import ConfigError, DataError, FluxnetError
from .evalmetrics import (boxplot_summary, ci_coverage, nrmse, per_cycle_nrmse, r_squared)
from .hpo import SearchSpace, random_search, two_stage_search
from .mcd import DropoutNetwork, PredictiveDistribution, mc_predict, train_mcd
from .modelio import ModelBundle, load_model, save_model
from .nncore import NetworkSpec, TrainConfig, evaluate_loss, init_network, predict, train
from .preprocess import (normalize_splits, partition, preprocess_campaign, read_dataset, read_table,
                         write_dataset, build_dataset, zscore_apply)
from .rng import derive_seed
from .synthdata import (CoreLayout, TrueFluxModel, load_campaign, load_defect_specs, save_campaign,
                        simulate_campaign, DefectSpec, N_AXIAL, ACTIVE_HEIGHT_MM)

log = logging.getLogger(__name__)

MODES = ("dnn", "mcd", "bnn")
STAGES = ("gen", "prep", "hpo", "train", "predict", "eval")
PRED_COLUMNS = ("cycle_id", "assembly", "bank_mm", "z_mm", "mean", "epistemic_std", "aleatoric_std",
                "total_std", "ci_low", "ci_high")

DEFAULTS = {
    "seed": 0,
    "mode": "mcd",
    "workdir": "fluxnet-run",
    "gen": {"seed": None, "cycles": 20, "defects": [], "bank_range_mm": [450.0, 550.0]},
    "prep": {"seed": None, "smooth": [15, 3], "threshold": 100.0, "holdout_cycles": 4,
             "assemblies": ["E6", "H3", "E5", "F6"]},
    "hpo": {"seed": None, "enabled": False, "budget": 6, "two_stage": False, "max_epochs": 20, "space": {}},
    "train": {"seed": None, "hidden": [64, 48, 32], "activation": "relu", "loss": None, "target": None,
              "learning_rate": 2e-3, "batch_size": 64, "max_epochs": 60, "early_stop_patience": 20,
              "plateau_patience": 6, "plateau_factor": 0.5, "min_lr": 1e-5, "weight_decay": 0.0,
              "fractions": [0.64, 0.20, 0.16], "drop_rate": 0.05, "input_dropout": False,
              "scaling": "none", "prior_std": 1.0, "kl_scale": 1.0, "mc_samples": 1},
    "predict": {"seed": None, "passes": 200, "level": 0.95, "chunk_passes": 50},
    "eval": {"seed": None, "level": 0.95},
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and k not in ("space",):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {path + k!r} must be a table")
            out[k] = _merge(base[k], v, path + k + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class RunConfig:
    """Full pipeline settings.  Unset values fall back to :data:`DEFAULTS`."""

    seed: int = 0
    mode: str = "mcd"
    workdir: str = "fluxnet-run"
    gen: dict = field(default_factory=dict)
    prep: dict = field(default_factory=dict)
    hpo: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    predict: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict | None = None) -> "RunConfig":
        merged = _merge(DEFAULTS, d or {})
        cfg = cls(**merged)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError("seed must be an integer")
        if int(self.gen["cycles"]) < 1:
            raise ConfigError("gen.cycles must be >= 1")
        if int(self.predict["passes"]) < 2 and self.mode != "dnn":
            raise ConfigError("predict.passes must be >= 2")
        h = self.prep["holdout_cycles"]
        if not isinstance(h, int) or h < 1:
            raise ConfigError("prep.holdout_cycles must be a positive integer")

    def to_dict(self) -> dict:
        return {k: copy.deepcopy(getattr(self, k)) for k in DEFAULTS}

    def stage_seed(self, stage: str) -> int:
        section = getattr(self, stage)
        if section.get("seed") is not None:
            return int(section["seed"])
        return derive_seed(self.seed, stage)

    def digest(self) -> str:
        return sha256_json(self.to_dict())


def load_config(path) -> dict:
    """Read a JSON or TOML config file into a plain dict."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        try:
            return tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: invalid TOML ({exc})") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def sha256_json(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def file_digest(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# -- stage building blocks ---------------------------------------------------


def train_settings(mode: str, overrides: dict | None = None) -> dict:
    s = _merge(DEFAULTS["train"], {k: v for k, v in (overrides or {}).items() if k != "seed"})
    if s["loss"] is None:
        s["loss"] = "mae" if mode == "dnn" else "gaussian_nll"
    if s["target"] is None:
        # the uncertainty heads must see the measurement noise to learn it
        s["target"] = "processed" if mode == "dnn" else "raw"
    if s["target"] not in ("processed", "raw"):
        raise ConfigError("train.target must be 'processed' or 'raw'")
    return s


def network_spec(settings: dict, mode: str) -> NetworkSpec:
    return NetworkSpec(2, tuple(int(u) for u in settings["hidden"]), 1, settings["activation"],
                       "point" if mode == "dnn" else "gaussian")


def _train_config(settings: dict, seed: int, mode: str) -> TrainConfig:
    return TrainConfig(loss=settings["loss"], weight_decay=settings["weight_decay"] if mode == "dnn" else 0.0,
                       learning_rate=float(settings["learning_rate"]), batch_size=int(settings["batch_size"]),
                       max_epochs=int(settings["max_epochs"]), early_stop_patience=settings["early_stop_patience"],
                       plateau_factor=settings["plateau_factor"], plateau_patience=settings["plateau_patience"],
                       min_lr=settings["min_lr"], rng_seed=derive_seed(seed, "fit"))


def training_splits(ds, settings: dict, seed: int):
    """(train, test, validation), z-scored with statistics of the train split."""
    if settings["target"] == "raw":
        ds = replace(ds.denormalized(), y=ds.y_raw.copy())
    tr, te, va = partition(ds.denormalized(), tuple(settings["fractions"]), rng_seed=derive_seed(seed, "partition"))
    return normalize_splits(tr, te, va)


def train_model(ds, mode: str, settings: dict | None = None, seed: int = 0) -> ModelBundle:
    """Train one model of the given mode on a physical-unit dataset."""
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    s = train_settings(mode, settings)
    tr, te, va = training_splits(ds, s, seed)
    spec = network_spec(s, mode)
    cfg = _train_config(s, seed, mode)
    init_rng = np.random.default_rng(derive_seed(seed, "init"))
    if mode == "dnn":
        model, hist = train(init_network(spec, init_rng), tr, va, cfg)
    elif mode == "mcd":
        net = DropoutNetwork.from_drop_rate(init_network(spec, init_rng), float(s["drop_rate"]),
                                            weight_decay=float(s["weight_decay"]),
                                            input_dropout=bool(s["input_dropout"]), scaling=s["scaling"])
        model, hist = train_mcd(net, tr, va, cfg)
    else:
        net = init_bayesian(spec, len(tr), init_rng, prior_std=float(s["prior_std"]))
        model, hist = train_bnn(net, tr, va, cfg, mc_samples=int(s["mc_samples"]), kl_scale=float(s["kl_scale"]))
    bundle = ModelBundle(model, mode, tr.x_norm, tr.y_norm, ds.assembly, s, hist.digest(),
                         {"n_train": len(tr), "n_test": len(te), "n_val": len(va), "seed": int(seed)})
    return bundle


def validation_objective(ds, mode: str, settings: dict, seed: int) -> float:
    """Validation loss of a freshly trained model (used as the search objective)."""
    s = train_settings(mode, settings)
    _, _, va = training_splits(ds, s, seed)
    bundle = train_model(ds, mode, s, seed)
    base = bundle.model.base if mode == "mcd" else bundle.model
    if mode == "bnn":
        from .bnnvi import mean_network

        base = mean_network(bundle.model)
    return evaluate_loss(base, va, s["loss"])


def predict_bundle(bundle: ModelBundle, x_physical, passes: int = 200, level: float = 0.95, seed: int = 0,
                   workers=None, chunk_passes: int = 50) -> PredictiveDistribution:
    """Predictive distribution in physical units for ``(bank_mm, z_mm)`` rows."""
    x = np.asarray(x_physical, dtype=float)
    xn = zscore_apply(x, bundle.x_norm) if bundle.x_norm else x
    if bundle.mode == "dnn":
        mu = np.atleast_1d(predict(bundle.model, xn)).astype(float)
        z = np.zeros_like(mu)
        pd = PredictiveDistribution(mu, z, z.copy(), z.copy(), mu.copy(), mu.copy(), level, 1)
    elif bundle.mode == "mcd":
        pd = mc_predict(bundle.model, xn, passes, seed, level, workers, chunk_passes)
    else:
        pd = bnn_predict(bundle.model, xn, passes, seed, level, workers, chunk_passes)
    if bundle.y_norm:
        pd = pd.rescaled(bundle.y_norm.mean[0], bundle.y_norm.std[0])
    return pd


def bank_query(bank_mm: float, n_axial: int = N_AXIAL, height_mm: float = ACTIVE_HEIGHT_MM) -> np.ndarray:
    z = np.linspace(0.0, height_mm, n_axial)
    return np.column_stack([np.full(n_axial, float(bank_mm)), z])


def prediction_rows(cycle_ids, assembly: str, x_physical, pd: PredictiveDistribution) -> list:
    cols = (pd.mean, pd.epistemic_std, pd.aleatoric_std, pd.total_std, pd.ci_low, pd.ci_high)
    return [[str(cid), assembly, repr(float(b)), repr(float(z)), *(repr(float(c[i])) for c in cols)]
            for i, (cid, (b, z)) in enumerate(zip(cycle_ids, np.asarray(x_physical, dtype=float)))]


def write_predictions(path, rows) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PRED_COLUMNS)
        w.writerows(rows)


def _float_col(rows, key):
    try:
        return np.array([float(r[key]) for r in rows])
    except (KeyError, ValueError) as exc:
        raise DataError(f"bad or missing column {key!r}: {exc}") from exc


def evaluate_predictions(pred_rows: list, truth_rows: list, level: float = 0.95) -> dict:
    """Join predictions to measured values and score each assembly.

    The truth is the decay-corrected measurement (``y_raw``); rows are
    matched on (cycle_id, assembly, bank_mm, z_mm).
    """
    truth = {}
    for r in truth_rows:
        try:
            truth[(r["cycle_id"], r["assembly"], float(r["bank_mm"]), float(r["z_mm"]))] = float(r["y_raw"])
        except (KeyError, ValueError) as exc:
            raise DataError(f"malformed truth row: {exc}") from exc
    by_assembly: dict = {}
    for r in pred_rows:
        try:
            key = (r["cycle_id"], r["assembly"], float(r["bank_mm"]), float(r["z_mm"]))
        except (KeyError, ValueError) as exc:
            raise DataError(f"malformed prediction row: {exc}") from exc
        if key in truth:
            by_assembly.setdefault(r["assembly"], []).append((r, truth[key]))
    if not by_assembly:
        raise DataError("no prediction row matches a truth row")
    metrics, coverage, errors = [], [], {}
    for aid in sorted(by_assembly):
        rows = [r for r, _ in by_assembly[aid]]
        t = np.array([v for _, v in by_assembly[aid]])
        mean = _float_col(rows, "mean")
        pd = PredictiveDistribution(mean, _float_col(rows, "epistemic_std"), _float_col(rows, "aleatoric_std"),
                                    _float_col(rows, "total_std"), _float_col(rows, "ci_low"),
                                    _float_col(rows, "ci_high")).with_level(level)
        metrics.append({"assembly": aid, "n_points": int(t.size), "nrmse": nrmse(mean, t),
                        "r_squared": r_squared(mean, t)})
        for kind in ("total", "epistemic"):
            rep = ci_coverage(pd, t, level, kind).to_dict()
            coverage.append({"assembly": aid, **rep})
        errors[aid] = per_cycle_nrmse([r["cycle_id"] for r in rows], mean, t)
    scores = [s.to_dict() for s in boxplot_summary(errors)]
    return {"format": "fluxnet-report", "version": 1, "level": level, "metrics": metrics,
            "coverage": coverage, "assembly_scores": scores}


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def write_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(_json_safe(report), indent=2, sort_keys=True) + "\n")


FENCE_COLUMNS = ("assembly", "q1", "median", "q3", "whisker_low", "whisker_high", "n_outliers")


def write_fences(report: dict, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FENCE_COLUMNS)
        for s in report["assembly_scores"]:
            w.writerow([s["assembly"], *(repr(float(s[k])) for k in FENCE_COLUMNS[1:6]), len(s["outliers"])])


# -- the pipeline ------------------------------------------------------------


@dataclass
class RunManifest:
    tool_version: str
    config_hash: str
    stages: dict = field(default_factory=dict)
    failed_stage: str | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        return {"tool_version": self.tool_version, "config_hash": self.config_hash, "stages": self.stages,
                "failed_stage": self.failed_stage, "error": self.error}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


class _Layout:
    def __init__(self, root: Path):
        self.root = root
        self.campaign = root / "campaign.json"
        self.data = root / "data"
        self.holdout = self.data / "holdout.csv"
        self.hpo = root / "hpo"
        self.models = root / "models"
        self.predictions = root / "predictions.csv"
        self.report = root / "report.json"
        self.fences = root / "fences.csv"
        self.manifest = root / "manifest.json"

    def dataset(self, aid):
        return self.data / f"{aid}.csv"

    def trials(self, aid):
        return self.hpo / f"{aid}.trials.json"

    def model(self, aid):
        return self.models / f"{aid}.model"


def _stage_gen(cfg: RunConfig, lay: _Layout, seed: int):
    g = cfg.gen
    defects = g["defects"]
    if isinstance(defects, str):
        specs = load_defect_specs(defects)
    else:
        specs = [DefectSpec(d["kind"], float(d["magnitude"]), d["cycle_id"], d.get("assembly")) for d in defects]
    layout = CoreLayout.default()
    model = TrueFluxModel.default(layout)
    for s in specs:
        s.validate(model)
    lo, hi = (float(v) for v in g["bank_range_mm"])
    sampler = (lambda rng: float(rng.uniform(lo, hi)))
    cycles = simulate_campaign(model, layout, int(g["cycles"]), sampler, specs, rng_seed=seed)
    save_campaign(lay.campaign, model, layout, cycles)
    return [lay.campaign]


def prepare_campaign(campaign_path, out_dir, smooth=(15, 3), threshold: float = 100.0,
                     holdout_cycles: int = 0, assemblies=None) -> list:
    """Decay-correct, reject, and write one CSV per assembly plus ``holdout.csv``.

    The last ``holdout_cycles`` kept cycles go to the holdout file; the rest
    to the per-assembly training files.
    """
    _, layout, cycles = load_campaign(campaign_path)
    kept, rejected = preprocess_campaign(cycles, threshold)
    if rejected:
        log.info("rejected %d under-exposed cycles", len(rejected))
    if len(kept) <= holdout_cycles:
        raise DataError(f"only {len(kept)} cycles kept; cannot hold out {holdout_cycles}")
    train_c = kept[: len(kept) - holdout_cycles]
    hold_c = kept[len(kept) - holdout_cycles:]
    if assemblies in (None, "all"):
        assemblies = layout.ids
    unknown = [a for a in assemblies if a not in layout]
    if unknown:
        raise ConfigError(f"unknown assemblies {unknown}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    smooth = tuple(smooth) if smooth else None
    written = []
    for aid, ds in build_dataset(train_c, smooth, normalize=True, assemblies=assemblies).items():
        write_dataset(ds, out_dir / f"{aid}.csv")
        written += [out_dir / f"{aid}.csv", out_dir / f"{aid}.json"]
    if hold_c:
        hold = build_dataset(hold_c, smooth, assemblies=assemblies)
        _write_holdout(list(hold.values()), out_dir / "holdout.csv", smooth)
        written += [out_dir / "holdout.csv"]
    return written


def _write_holdout(datasets, path, smooth) -> None:
    tmp = []
    for ds in datasets:
        write_dataset(ds, path)
        tmp.append(Path(path).read_text().splitlines())
    lines = tmp[0][:1] + [ln for block in tmp for ln in block[1:]]
    Path(path).write_text("\n".join(lines) + "\n")
    Path(path).with_suffix(".json").unlink(missing_ok=True)


def _stage_prep(cfg: RunConfig, lay: _Layout, seed: int):
    p = cfg.prep
    return prepare_campaign(lay.campaign, lay.data, p["smooth"], float(p["threshold"]),
                            int(p["holdout_cycles"]), p["assemblies"])


def _assemblies(lay: _Layout) -> list:
    return sorted(p.stem for p in lay.data.glob("*.csv") if p.name != "holdout.csv")


def search_hyperparameters(ds, mode: str, settings: dict, hpo_cfg: dict, seed: int) -> dict:
    """Architecture search (and optionally the learning-rate / batch grid) on one dataset."""
    space = SearchSpace.from_dict(hpo_cfg.get("space") or {})
    base = dict(settings)
    base["max_epochs"] = int(hpo_cfg.get("max_epochs", base.get("max_epochs", 20)))

    def objective(hp):
        s = {**base, "hidden": list(hp["units"]), "learning_rate": hp["learning_rate"],
             "batch_size": int(hp["batch_size"])}
        return validation_objective(ds, mode, s, seed)

    budget = int(hpo_cfg.get("budget", 6))
    if hpo_cfg.get("two_stage"):
        res = two_stage_search(space, budget, None, objective, rng_seed=seed)
        best, trials = res.best, res.stage1 + res.stage2
        doc = res.to_dict()
    else:
        trials = random_search(space, budget, objective, rng_seed=seed)
        best = trials[0]
        doc = {"best": best.to_dict(), "stage1": [t.to_dict() for t in trials], "stage2": []}
    doc["trials"] = [t.to_dict() for t in trials]
    # every trial trains with the same seed so objectives compare architectures, not draws
    for t in doc["trials"] + doc["stage1"] + doc["stage2"] + [doc["best"]]:
        t["seed"] = int(seed)
    return doc


def _stage_hpo(cfg: RunConfig, lay: _Layout, seed: int):
    lay.hpo.mkdir(parents=True, exist_ok=True)
    out = []
    for aid in _assemblies(lay):
        ds = read_dataset(lay.dataset(aid))
        doc = search_hyperparameters(ds, cfg.mode, train_settings(cfg.mode, cfg.train), cfg.hpo,
                                     derive_seed(seed, aid))
        lay.trials(aid).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        out.append(lay.trials(aid))
    return out


def _stage_train(cfg: RunConfig, lay: _Layout, seed: int):
    lay.models.mkdir(parents=True, exist_ok=True)
    out = []
    for aid in _assemblies(lay):
        settings = dict(cfg.train)
        settings.pop("seed", None)
        if cfg.hpo["enabled"]:
            hp = json.loads(lay.trials(aid).read_text())["best"]["hyperparameters"]
            settings.update(hidden=list(hp["units"]), learning_rate=hp["learning_rate"],
                            batch_size=hp["batch_size"])
        bundle = train_model(read_dataset(lay.dataset(aid)), cfg.mode, settings, derive_seed(seed, aid))
        save_model(lay.model(aid), bundle)
        out.append(lay.model(aid))
    return out


def _stage_predict(cfg: RunConfig, lay: _Layout, seed: int):
    rows = []
    p = cfg.predict
    for aid in _assemblies(lay):
        bundle = load_model(lay.model(aid), expected_mode=cfg.mode)
        hold = read_dataset(lay.holdout, assembly=aid)
        pd = predict_bundle(bundle, hold.x, int(p["passes"]), float(p["level"]), derive_seed(seed, aid),
                            chunk_passes=int(p["chunk_passes"]))
        rows += prediction_rows(hold.cycle_ids, aid, hold.x, pd)
    write_predictions(lay.predictions, rows)
    return [lay.predictions]


def _stage_eval(cfg: RunConfig, lay: _Layout, seed: int):
    report = evaluate_predictions(read_table(lay.predictions), read_table(lay.holdout), float(cfg.eval["level"]))
    write_report(report, lay.report)
    write_fences(report, lay.fences)
    return [lay.report, lay.fences]


_RUNNERS = {"gen": _stage_gen, "prep": _stage_prep, "hpo": _stage_hpo, "train": _stage_train,
            "predict": _stage_predict, "eval": _stage_eval}


def _stage_inputs(stage: str, cfg: RunConfig, lay: _Layout, produced: dict) -> list:
    if stage == "gen":
        d = cfg.gen["defects"]
        return [Path(d)] if isinstance(d, str) else []
    upstream = {"prep": ["gen"], "hpo": ["prep"], "train": ["prep", "hpo"], "predict": ["prep", "train"],
                "eval": ["prep", "predict"]}[stage]
    return [Path(p) for s in upstream for p in produced.get(s, [])]


def _relative(lay: _Layout, path: Path) -> str:
    try:
        return str(Path(path).relative_to(lay.root))
    except ValueError:
        return str(path)


def run_pipeline(config: RunConfig | dict, workdir=None) -> RunManifest:
    """Run every stage in order, reusing stages whose inputs and outputs are unchanged."""
    cfg = config if isinstance(config, RunConfig) else RunConfig.from_dict(config)
    lay = _Layout(Path(workdir or cfg.workdir))
    lay.root.mkdir(parents=True, exist_ok=True)
    previous = {}
    if lay.manifest.exists():
        try:
            previous = json.loads(lay.manifest.read_text()).get("stages", {})
        except json.JSONDecodeError:
            previous = {}
    manifest = RunManifest(__version__, cfg.digest())
    produced: dict = {}
    for stage in STAGES:
        if stage == "hpo" and not cfg.hpo["enabled"]:
            manifest.stages[stage] = {"status": "disabled"}
            continue
        seed = cfg.stage_seed(stage)
        inputs = _stage_inputs(stage, cfg, lay, produced)
        missing = [str(p) for p in inputs if not p.exists()]
        if missing:
            manifest.failed_stage, manifest.error = stage, f"missing inputs {missing}"
            manifest.save(lay.manifest)
            raise DataError(f"stage {stage}: missing inputs {missing}")
        in_digests = {_relative(lay, p): file_digest(p) for p in inputs}
        section = {k: v for k, v in getattr(cfg, stage).items() if k != "seed"}
        key = sha256_json({"stage": stage, "mode": cfg.mode, "settings": section, "seed": seed,
                           "inputs": in_digests, "version": __version__})
        prev = previous.get(stage, {})
        t0 = time.perf_counter()
        if prev.get("key") == key and prev.get("outputs") and all(
                (lay.root / rel).exists() and file_digest(lay.root / rel) == dig
                for rel, dig in prev["outputs"].items()):
            outputs = [lay.root / rel for rel in prev["outputs"]]
            status = "skipped"
        else:
            try:
                outputs = _RUNNERS[stage](cfg, lay, seed)
            except FluxnetError as exc:
                manifest.failed_stage, manifest.error = stage, f"{type(exc).__name__}: {exc}"
                manifest.save(lay.manifest)
                raise
            status = "ran"
        produced[stage] = outputs
        manifest.stages[stage] = {
            "status": status, "key": key, "seed": seed, "inputs": in_digests,
            "outputs": {_relative(lay, p): file_digest(p) for p in outputs},
            "seconds": round(time.perf_counter() - t0, 3),
        }
        log.info("stage %s %s", stage, status)
    manifest.save(lay.manifest)
    return manifest
