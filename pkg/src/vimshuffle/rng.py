"""Counter-based RNG streams keyed by (seed, purpose, step, layer).

Every stochastic decision in the library draws from its own Philox stream so
that a decision is reproducible from its coordinates alone, independent of
how many other draws happened elsewhere. That is what makes parallel data
workers, the p=0 no-op guarantee, and bitwise seed-fixed reruns possible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Purpose tags keep streams for different subsystems disjoint even when they
# share (seed, step, layer) coordinates.
TAG_INIT = 0
TAG_SHUFFLE = 1
TAG_DROP_PATH = 2
TAG_DATA_ORDER = 3
TAG_AUGMENT = 4
TAG_MASK = 5
TAG_SYNTH = 6
TAG_BENCH = 7


@dataclass
class Stream:
    """A seeded generator that remembers its own coordinates."""

    seed: int
    tag: int
    step: int
    layer: int
    gen: np.random.Generator = field(repr=False, default=None)

    def __post_init__(self):
        if self.gen is None:
            ss = np.random.SeedSequence(
                entropy=(self.seed, self.tag, self.step, self.layer))
            self.gen = np.random.Generator(np.random.Philox(ss))

    @property
    def coords(self) -> tuple[int, int, int]:
        return (self.seed, self.step, self.layer)


def stream(seed: int, tag: int, step: int = 0, layer: int = 0) -> Stream:
    return Stream(seed=seed, tag=tag, step=step, layer=layer)
