"""Self-describing JSON model files with an integrity checksum.

Arrays are stored as nested lists of Python floats; ``repr`` of a float
round-trips exactly, so loading reproduces every parameter bit for bit.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .bnnvi import BayesianNetwork, VariationalLayer
from .errors import IncompatibleModelError, SchemaError
from .mcd import DropoutNetwork
from .nncore import Network, NetworkSpec
from .preprocess import NormalizationState

MODEL_FORMAT = "fluxnet-model"
MODEL_VERSION = 1
MODES = ("dnn", "mcd", "bnn")


@dataclass
class ModelBundle:
    model: object
    mode: str
    x_norm: NormalizationState | None = None
    y_norm: NormalizationState | None = None
    assembly: str | None = None
    train_config: dict | None = None
    history: dict | None = None
    extra: dict = field(default_factory=dict)


def mode_of(model) -> str:
    if isinstance(model, BayesianNetwork):
        return "bnn"
    if isinstance(model, DropoutNetwork):
        return "mcd"
    if isinstance(model, Network):
        return "dnn"
    raise TypeError(f"not a model: {type(model).__name__}")


def _arr(a) -> dict:
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}


def _unarr(d) -> np.ndarray:
    a = np.array(d["data"], dtype=float)
    return a.reshape(d["shape"])


def _params(model) -> dict:
    mode = mode_of(model)
    if mode == "bnn":
        return {"layers": [{k: _arr(getattr(ly, k)) for k in ("w_mu", "w_rho", "b_mu", "b_rho")}
                           for ly in model.layers],
                "prior_std": model.prior_std, "n_train": model.n_train}
    base = model.base if mode == "mcd" else model
    d = {"weights": [_arr(W) for W in base.weights], "biases": [_arr(b) for b in base.biases]}
    if mode == "mcd":
        d.update(keep_prob=model.keep_prob, drop_rate=model.drop_rate, weight_decay=model.weight_decay,
                 input_dropout=model.input_dropout, scaling=model.scaling)
    return d


def _checksum(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def model_to_dict(bundle: ModelBundle) -> dict:
    model = bundle.model
    spec = model.spec
    payload = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "tool_version": __version__,
        "mode": mode_of(model),
        "assembly": bundle.assembly,
        "spec": spec.to_dict(),
        "params": _params(model),
        "normalization": {
            "x": bundle.x_norm.to_dict() if bundle.x_norm else None,
            "y": bundle.y_norm.to_dict() if bundle.y_norm else None,
        },
        "train_config": bundle.train_config,
        "history": bundle.history,
        "extra": bundle.extra,
    }
    return {**payload, "checksum": _checksum(payload)}


def save_model(path, bundle: ModelBundle) -> None:
    Path(path).write_text(json.dumps(model_to_dict(bundle), indent=1))


def model_from_dict(doc: dict, expected_mode: str | None = None) -> ModelBundle:
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise SchemaError("not a fluxnet model file")
    if doc.get("version") != MODEL_VERSION:
        raise SchemaError(f"unsupported model file version {doc.get('version')!r}")
    payload = {k: v for k, v in doc.items() if k != "checksum"}
    if doc.get("checksum") != _checksum(payload):
        raise SchemaError("model file checksum mismatch (corrupted or edited)")
    mode = doc.get("mode")
    if mode not in MODES:
        raise SchemaError(f"unknown model mode {mode!r}")
    if expected_mode is not None and mode != expected_mode:
        raise IncompatibleModelError(f"model file holds a {mode!r} model, expected {expected_mode!r}")
    try:
        spec = NetworkSpec.from_dict(doc["spec"])
        p = doc["params"]
        if mode == "bnn":
            layers = [VariationalLayer(*(_unarr(ly[k]) for k in ("w_mu", "w_rho", "b_mu", "b_rho")),
                                       prior_std=float(p["prior_std"])) for ly in p["layers"]]
            model = BayesianNetwork(spec, layers, int(p["n_train"]))
        else:
            base = Network(spec, [_unarr(W) for W in p["weights"]], [_unarr(b) for b in p["biases"]])
            model = base if mode == "dnn" else DropoutNetwork(
                base, float(p["keep_prob"]), float(p["weight_decay"]), bool(p["input_dropout"]), p["scaling"])
        norm = doc.get("normalization") or {}
        x_norm = NormalizationState.from_dict(norm["x"]) if norm.get("x") else None
        y_norm = NormalizationState.from_dict(norm["y"]) if norm.get("y") else None
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed model file: {exc}") from exc
    return ModelBundle(model, mode, x_norm, y_norm, doc.get("assembly"), doc.get("train_config"),
                       doc.get("history"), doc.get("extra") or {})


def load_model(path, expected_mode: str | None = None) -> ModelBundle:
    try:
        doc = json.loads(Path(path).read_text())
    except UnicodeDecodeError as exc:
        raise SchemaError(f"{path}: not a text model file") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from exc
    return model_from_dict(doc, expected_mode)
