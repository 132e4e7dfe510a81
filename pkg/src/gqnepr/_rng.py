"""Seed handling shared by every stochastic routine in the package."""
from __future__ import annotations

import numpy as np


def make_rng(seed, *keys: int) -> np.random.Generator:
    """Return a Generator for ``seed``, optionally on a derived child stream.

    Child streams are addressed by ``keys`` (e.g. replicate index) rather than
    by draw order, so results do not depend on how work is scheduled.
    """
    if isinstance(seed, np.random.Generator):
        if keys:
            raise TypeError("derived streams need an integer seed, not a Generator")
        return seed
    if seed is None:
        raise ValueError("an explicit seed is required")
    if isinstance(seed, np.random.SeedSequence):
        ss = np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + tuple(keys))
    else:
        ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.default_rng(ss)


def derive_seed(seed, *keys: int) -> int:
    """Integer seed for a named sub-task, stable across runs and platforms."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint32)[0])
