"""Random search, grid search, and the two-stage combination of both.

Stage one samples the architecture (hidden-layer count and widths) with the
learning rate and batch size held fixed; stage two grids learning rate and
batch size around the stage-one winner with the architecture frozen.
"""
from __future__ import annotations

import itertools
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .errors import ParameterError, SearchError

log = logging.getLogger(__name__)

STAGE1_DEFAULTS = {"learning_rate": 1e-4, "batch_size": 16}


@dataclass(frozen=True)
class SearchSpace:
    n_hidden_layers: tuple = (1, 4)
    units_per_layer: tuple = (16, 160)
    pyramid: bool = True
    learning_rate: tuple = (1e-5, 1e-2)
    batch_size: tuple = (16, 32, 64, 128)

    def __post_init__(self):
        lo, hi = self.n_hidden_layers
        if not 1 <= lo <= hi:
            raise ParameterError("n_hidden_layers range must satisfy 1 <= lo <= hi")
        ulo, uhi = self.units_per_layer
        if not 1 <= ulo <= uhi:
            raise ParameterError("units_per_layer range must satisfy 1 <= lo <= hi")
        a, b = self.learning_rate
        if not 0 < a <= b:
            raise ParameterError("learning_rate range must be positive and ordered")
        if not self.batch_size:
            raise ParameterError("batch_size choices must be non-empty")

    def sample(self, rng: np.random.Generator, fixed: dict | None = None) -> dict:
        n = int(rng.integers(self.n_hidden_layers[0], self.n_hidden_layers[1] + 1))
        units = rng.integers(self.units_per_layer[0], self.units_per_layer[1] + 1, size=n)
        if self.pyramid:
            units = np.sort(units)[::-1]
        lr = float(np.exp(rng.uniform(math.log(self.learning_rate[0]), math.log(self.learning_rate[1]))))
        bs = int(self.batch_size[int(rng.integers(len(self.batch_size)))])
        hp = {"n_hidden_layers": n, "units": tuple(int(u) for u in units), "learning_rate": lr, "batch_size": bs}
        hp.update(fixed or {})
        return hp

    @classmethod
    def from_dict(cls, d) -> "SearchSpace":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class Trial:
    index: int
    hyperparameters: dict
    objective: float
    seed: int | None = None
    diverged: bool = False
    error: str | None = None
    history: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hyperparameters"] = {k: list(v) if isinstance(v, tuple) else v for k, v in self.hyperparameters.items()}
        d["objective"] = None if not math.isfinite(self.objective) else self.objective
        return d


def _evaluate(evaluator: Callable, index: int, hp: dict, seed) -> Trial:
    try:
        res = evaluator(hp) if seed is None else evaluator(hp, seed)
    except Exception as exc:  # quarantined: one bad trial never aborts the search
        log.warning("trial %d failed: %s", index, exc)
        return Trial(index, hp, math.inf, seed, diverged=True, error=f"{type(exc).__name__}: {exc}")
    history = {}
    if isinstance(res, tuple):
        res, history = res
    obj = float(res)
    if not math.isfinite(obj):
        return Trial(index, hp, math.inf, seed, diverged=True, error="non-finite objective", history=history)
    return Trial(index, hp, obj, seed, history=history)


def _run(evaluator, hps, seeds, workers) -> list:
    jobs = list(zip(range(len(hps)), hps, seeds))
    w = max(1, int(workers if workers is not None else os.environ.get("FLUXNET_WORKERS", "1")))
    if w == 1:
        trials = [_evaluate(evaluator, *j) for j in jobs]
    else:
        with ThreadPoolExecutor(w) as pool:
            trials = list(pool.map(lambda j: _evaluate(evaluator, *j), jobs))
    return rank(trials)


def rank(trials) -> list:
    """Ascending objective; ties keep draw / grid order."""
    ranked = sorted(trials, key=lambda t: (t.objective, t.index))
    if ranked and all(t.diverged for t in ranked):
        raise SearchError("every trial diverged or failed", trials=ranked)
    return ranked


def random_search(space: SearchSpace, budget: int, evaluator: Callable, rng_seed=0, fixed: dict | None = None,
                  workers=None, seeded: bool = False) -> list:
    """``budget`` independent draws from ``space``; returns ranked trials.

    With ``seeded`` the evaluator is called as ``evaluator(hp, seed)`` with a
    per-trial seed derived from ``rng_seed``.
    """
    if budget < 1:
        raise ParameterError("budget must be >= 1")
    rng = np.random.default_rng(rng_seed)
    hps = [space.sample(rng, fixed) for _ in range(budget)]
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(rng_seed).spawn(budget)] if seeded \
        else [None] * budget
    return _run(evaluator, hps, seeds, workers)


def grid_points(grid: dict) -> list:
    """Cartesian product in lexicographic order over the declared axes."""
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ParameterError("grid must have at least one value per axis")
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def grid_search(grid: dict, evaluator: Callable, fixed: dict | None = None, workers=None,
                seed: int | None = None) -> list:
    hps = [{**(fixed or {}), **p} for p in grid_points(grid)]
    return _run(evaluator, hps, [seed] * len(hps), workers)


def default_stage2_grid(best: dict) -> dict:
    """Learning rate one decade either side of the stage-1 value in half-decade steps; batch halved/doubled.

    Stage 1 pins the learning rate, so the refinement has to reach a full
    decade away to recover an optimum the random stage never varied.
    """
    lr = best["learning_rate"]
    bs = int(best["batch_size"])
    return {"learning_rate": [lr * 10.0**k for k in (-1.0, -0.5, 0.0, 0.5, 1.0)],
            "batch_size": sorted({max(1, bs // 2), bs, bs * 2})}


@dataclass
class TwoStageResult:
    best: Trial
    stage1: list
    stage2: list

    def to_dict(self) -> dict:
        return {"best": self.best.to_dict(),
                "stage1": [t.to_dict() for t in self.stage1],
                "stage2": [t.to_dict() for t in self.stage2]}


def two_stage_search(space: SearchSpace, stage1_budget: int, stage2_grid_builder: Callable | None,
                     evaluator: Callable, rng_seed=0, stage1_fixed: dict | None = None,
                     workers=None) -> TwoStageResult:
    """Random search over the architecture, then a grid over learning rate and batch size."""
    fixed = dict(STAGE1_DEFAULTS if stage1_fixed is None else stage1_fixed)
    stage1 = random_search(space, stage1_budget, evaluator, rng_seed, fixed=fixed, workers=workers)
    top = stage1[0]
    arch = {k: v for k, v in top.hyperparameters.items() if k not in ("learning_rate", "batch_size")}
    builder = stage2_grid_builder or default_stage2_grid
    stage2 = grid_search(builder(dict(top.hyperparameters)), evaluator, fixed=arch, workers=workers)
    best = min([stage1[0], stage2[0]], key=lambda t: (t.objective, 0 if t is stage1[0] else 1))
    return TwoStageResult(best, stage1, stage2)
