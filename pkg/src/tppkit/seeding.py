"""Deterministic RNG stream derivation.

All randomness in the package flows through generators derived from integer
key tuples via ``numpy.random.SeedSequence``, so every run is reproducible
from a single seed and independent consumers (dropout per layer application,
Monte Carlo samples per sequence, simulation per sequence) never share a
stream.
"""

from __future__ import annotations

import numpy as np


def derive_rng(*keys: int) -> np.random.Generator:
    """A fresh generator keyed by a tuple of non-negative integers."""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


class DropoutStreams:
    """Dropout mask source for one forward pass.

    Keyed by (seed, epoch, batch); successive mask requests within the pass
    (one per layer application) get their own substream, so the mask drawn
    for a given layer never depends on array shapes elsewhere.
    """

    def __init__(self, seed: int, epoch: int, batch_index: int):
        self._key = (int(seed), int(epoch), int(batch_index))
        self._calls = 0

    def next_rng(self) -> np.random.Generator:
        rng = derive_rng(*self._key, self._calls)
        self._calls += 1
        return rng
