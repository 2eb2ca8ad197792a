"""Counter-based seed derivation.

Every random draw in this package is keyed by a 64-bit child seed computed as
``child = mix(master, stream, counter)``. ``stream`` identifies the consumer
(subset draws, weight init, trial indices, ...) and ``counter`` enumerates
draws within that stream. Because each child seed is a pure function of its
inputs, sampling campaigns produce identical results regardless of worker
count or task scheduling.

The mixer applies a splitmix64-style finalizer once per input word:

    h = master
    for part in (stream, counter):
        h = finalize((h ^ part) + GAMMA)
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15

# Stream identifiers. Keep values stable: stores record derived seeds.
SUBSET = 1
MODEL_INIT = 2
K_DRAW = 3
TRIAL = 4
NOISE = 5
SPLIT = 6


def _finalize(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def mix(master: int, *parts: int) -> int:
    """Derive a 64-bit child seed from the master and any number of stream /
    counter words; ``mix(master, stream, counter)`` is the common form."""
    h = master & _MASK
    for part in parts:
        h = _finalize((h ^ (part & _MASK)) + _GAMMA)
    return h


def rng(seed: int) -> np.random.Generator:
    """PCG64 generator for a 64-bit seed."""
    return np.random.default_rng(seed & _MASK)
