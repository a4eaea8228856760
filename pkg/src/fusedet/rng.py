"""Seeded, splittable random streams.

Every stream is a counter-based Philox generator keyed by a root seed plus a
tuple of integers, so stream ``(seed, 7)`` is the same no matter which worker
draws it or in what order scenes finish.
"""
from __future__ import annotations

import numpy as np


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))
