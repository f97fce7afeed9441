"""Reproducible random streams.

All randomness in the package flows through `stream`, which builds a
numpy Generator on top of the Philox 4x64 counter-based bit generator.
Streams are keyed by an integer seed plus any number of integer stream
indices, mixed through numpy's SeedSequence, so the draws for, say,
replicate 7 of simulation 123 are identical across platforms, thread
schedules and evaluation orders.
"""

from __future__ import annotations

import numpy as np

# stream tags, kept distinct so a (seed, tag, ...) key never collides
FIELD = 0
NOISE = 1
OUTLIER = 2
DESIGN = 3
SIM = 4


def _flatten(seed) -> list[int]:
    if isinstance(seed, (tuple, list)):
        out = []
        for part in seed:
            out.extend(_flatten(part))
        return out
    return [int(seed)]


def stream(seed, *key: int) -> np.random.Generator:
    """Return the Generator for stream `key` of `seed`.

    `seed` may be an int or an arbitrarily nested tuple of ints (the
    experiment layers derive per-repetition seeds as (seed, index) tuples
    instead of doing arithmetic on the master seed).
    """
    entropy = tuple(_flatten(seed)) + tuple(int(k) for k in key)
    ss = np.random.SeedSequence(entropy=entropy)
    return np.random.Generator(np.random.Philox(ss))
