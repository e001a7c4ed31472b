"""Seed plumbing: derived per-stage seeds and reproducible sub-streams."""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master_seed: int, name: str) -> int:
    """Stable 63-bit seed from ``(master_seed, name)``.

    sha256 over ``"<master_seed>:<name>"``; independent of Python's hash
    randomization so alternate implementations can reproduce it.
    """
    digest = hashlib.sha256(f"{int(master_seed)}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def as_seed_sequence(rng) -> np.random.SeedSequence:
    """Accept an int seed, a SeedSequence or a Generator."""
    if isinstance(rng, np.random.SeedSequence):
        return rng
    if isinstance(rng, np.random.Generator):
        return np.random.SeedSequence(int(rng.integers(0, 2**63 - 1)))
    if rng is None:
        raise TypeError("an explicit seed or Generator is required")
    return np.random.SeedSequence(int(rng))


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(as_seed_sequence(rng))


def substreams(rng, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in as_seed_sequence(rng).spawn(n)]
