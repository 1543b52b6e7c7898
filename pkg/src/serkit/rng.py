"""Deterministic random streams.

Every stochastic component draws from a counter-keyed Philox generator so
that runs are bitwise reproducible: the stream for (seed, epoch, batch,
site) is independent of call order and of any other stream.
"""

from __future__ import annotations

import numpy as np

# Top-level stream purposes. Keeping them distinct guarantees that, e.g.,
# parameter init and epoch shuffling never share a stream even for seed 0.
STREAM_INIT = 0
STREAM_SHUFFLE = 1
STREAM_DROPOUT = 2
STREAM_SPLIT = 3
STREAM_SYNTH = 4
STREAM_AUGMENT = 5


def derived_rng(seed: int, *key: int) -> np.random.Generator:
    """Generator for the stream identified by (seed, *key)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


class DropoutStreams:
    """Hands out one generator per dropout site within a single forward pass.

    Sites are numbered in call order, which is fixed by the network
    topology, so masks depend only on (seed, *context, site index).
    """

    def __init__(self, seed: int, *context: int):
        self._seed = int(seed)
        self._context = tuple(int(c) for c in context)
        self._site = 0

    def next(self) -> np.random.Generator:
        rng = derived_rng(self._seed, *self._context, self._site)
        self._site += 1
        return rng
