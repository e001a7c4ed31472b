"""Shared synthetic campaigns and desk-scale trained models.

Training is the expensive part of the suite, so every model is trained
once per session and reused by the unit and acceptance tests.
"""
import time

import pytest

from fluxnet.pipeline import train_model
from fluxnet.preprocess import build_dataset, preprocess_campaign
from fluxnet.synthdata import CoreLayout, TrueFluxModel, simulate_campaign

CENTRAL, PERIPHERAL = "E6", "H3"
DESK_SEED = 11
DESK_SETTINGS = {
    "dnn": {"hidden": [64, 48, 32], "learning_rate": 2e-3, "batch_size": 64, "max_epochs": 150},
    "mcd": {"hidden": [128, 96, 64], "learning_rate": 1e-3, "batch_size": 128, "max_epochs": 120,
            "drop_rate": 0.05},
    "bnn": {"hidden": [64, 48, 32], "learning_rate": 2e-3, "batch_size": 64, "max_epochs": 120,
            "prior_std": 0.3},
}


@pytest.fixture(scope="session")
def core():
    layout = CoreLayout.default()
    return layout, TrueFluxModel.default(layout)


@pytest.fixture(scope="session")
def desk(core):
    """86 kept cycles: the first 76 train, the last 10 are held out."""
    layout, model = core
    kept, _ = preprocess_campaign(simulate_campaign(model, layout, 86, rng_seed=7))
    train_c, hold_c = kept[:76], kept[76:]
    ids = [CENTRAL, PERIPHERAL]
    return {
        "train": build_dataset(train_c, smooth=(15, 3), assemblies=ids),
        "holdout": build_dataset(hold_c, assemblies=ids),
        "train_cycles": train_c,
    }


@pytest.fixture(scope="session")
def desk_small(core):
    layout, model = core
    kept, _ = preprocess_campaign(simulate_campaign(model, layout, 8, rng_seed=21))
    return build_dataset(kept, smooth=(15, 3), assemblies=[CENTRAL, PERIPHERAL, "E5", "F6"])


class _Models:
    def __init__(self, desk):
        self.desk = desk
        self.cache = {}
        self.seconds = {}

    def get(self, mode, assembly):
        key = (mode, assembly)
        if key not in self.cache:
            t0 = time.perf_counter()
            self.cache[key] = train_model(self.desk["train"][assembly], mode, DESK_SETTINGS[mode], DESK_SEED)
            self.seconds[key] = time.perf_counter() - t0
        return self.cache[key]


@pytest.fixture(scope="session")
def desk_models(desk):
    """Lazily trained desk-scale models, keyed by (mode, assembly)."""
    return _Models(desk)


ACCEPTANCE_LINES = {}


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(label: str, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'} {label}: {detail}"
        ACCEPTANCE_LINES[label] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for label in sorted(ACCEPTANCE_LINES, key=lambda s: int(s[1:].split()[0])):
            terminalreporter.write_line(ACCEPTANCE_LINES[label])
