import json

import numpy as np
import pytest

from fluxnet.errors import IncompatibleModelError, SchemaError
from fluxnet.modelio import MODES, load_model, model_from_dict, model_to_dict, save_model
from fluxnet.pipeline import predict_bundle, train_model

SMALL = {"hidden": [8, 6], "max_epochs": 2, "batch_size": 64}


@pytest.fixture(scope="module")
def bundles(desk_small):
    return {m: train_model(desk_small["E6"], m, SMALL, 3) for m in MODES}


@pytest.mark.parametrize("mode", MODES)
def test_round_trip_bit_exact(tmp_path, bundles, mode):
    b = bundles[mode]
    path = tmp_path / f"{mode}.json"
    save_model(path, b)
    back = load_model(path, expected_mode=mode)
    assert back.mode == mode and back.assembly == "E6"
    params = lambda m: m.base.params if mode == "mcd" else m.params
    for p, q in zip(params(b.model), params(back.model)):
        assert p.dtype == q.dtype and np.array_equal(p, q)
    assert back.train_config == b.train_config and back.extra == b.extra
    x = np.array([[470.0, 100.0], [530.0, 900.0]])
    a, c = predict_bundle(b, x, 20, seed=1), predict_bundle(back, x, 20, seed=1)
    assert np.array_equal(a.mean, c.mean) and np.array_equal(a.total_std, c.total_std)
    # saving the loaded bundle reproduces the file byte for byte
    save_model(tmp_path / "again.json", back)
    assert (tmp_path / "again.json").read_bytes() == path.read_bytes()


def test_mode_specific_parameters_preserved(bundles):
    mcd = model_from_dict(model_to_dict(bundles["mcd"])).model
    assert mcd.keep_prob == bundles["mcd"].model.keep_prob and mcd.scaling == bundles["mcd"].model.scaling
    bnn = model_from_dict(model_to_dict(bundles["bnn"])).model
    assert bnn.prior_std == bundles["bnn"].model.prior_std and bnn.n_train == bundles["bnn"].model.n_train


def test_corrupted_byte_rejected(tmp_path, bundles):
    path = tmp_path / "m.json"
    save_model(path, bundles["dnn"])
    text = path.read_text()
    i = text.index('"data"') + 12
    digit = next(j for j in range(i, len(text)) if text[j] in "123456789")
    path.write_text(text[:digit] + ("2" if text[digit] != "2" else "3") + text[digit + 1:])
    with pytest.raises(SchemaError):
        load_model(path)


def test_wrong_mode_rejected(tmp_path, bundles):
    path = tmp_path / "m.json"
    save_model(path, bundles["bnn"])
    with pytest.raises(IncompatibleModelError):
        load_model(path, expected_mode="mcd")


@pytest.mark.parametrize("edit", [
    lambda d: d.update(format="other"),
    lambda d: d.update(version=99),
    lambda d: d.pop("checksum"),
])
def test_header_checks(bundles, edit):
    doc = model_to_dict(bundles["dnn"])
    edit(doc)
    with pytest.raises(SchemaError):
        model_from_dict(doc)


def test_not_json(tmp_path):
    path = tmp_path / "m.json"
    path.write_text("{not json")
    with pytest.raises(SchemaError):
        load_model(path)
    path.write_bytes(b"\xff\xfe\x00")
    with pytest.raises(SchemaError):
        load_model(path)


def test_file_is_plain_json(tmp_path, bundles):
    path = tmp_path / "m.json"
    save_model(path, bundles["mcd"])
    doc = json.loads(path.read_text())
    assert doc["format"] == "fluxnet-model" and doc["mode"] == "mcd"
