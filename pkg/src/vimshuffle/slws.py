"""Stochastic layer-wise shuffle (SLWS) regularization.

Each encoder layer gets a depth-dependent probability of being trained on a
permuted token sequence. When a layer's Bernoulli draw fires, one uniform
permutation is sampled, applied to every batch element, and exactly undone on
the layer's output so later layers always see the original order. Inference
never shuffles.

The permutation is shared across the batch: sampling costs O(T) (Fisher-Yates)
plus O(T log T) if the inverse is recovered by argsort, independent of batch
size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import Stream
from .tensor import Tensor, gather_rows

SCHEDULE_KINDS = ("linear", "linear_decreasing", "exponential", "constant")


@dataclass
class ShuffleSchedule:
    """Probability allocation across layers.

    ``layers`` is the depth L; probabilities are defined on the index grid
    0..L inclusive. The linear kind starts at zero, so with 0-based layer
    indexing the first layer of a network never shuffles.

    ``argsort_inverse`` selects how restoration indices are recovered: the
    O(T) direct scatter by default, or the O(T log T) sort path that the
    throughput benchmark keeps so its accounting includes the sort term.
    """

    kind: str = "linear"
    p_l: float = 0.5
    layers: int = 1
    include_cls: bool = True
    argsort_inverse: bool = False

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}; expected one of {SCHEDULE_KINDS}")
        if not 0.0 <= self.p_l <= 1.0:
            raise ValueError(f"p_l must lie in [0, 1], got {self.p_l}")
        if self.layers < 1:
            raise ValueError("layer count must be >= 1")


def shuffle_probability(schedule: ShuffleSchedule, layer: int) -> float:
    """Shuffle probability for layer index ``layer`` in 0..L."""
    depth = schedule.layers
    if not 0 <= layer <= depth:
        raise IndexError(f"layer index {layer} outside 0..{depth}")
    top = schedule.p_l
    if schedule.kind == "linear":
        return (layer / depth) * top
    if schedule.kind == "linear_decreasing":
        return ((depth - layer) / depth) * top
    if schedule.kind == "exponential":
        return top ** (depth - layer + 1)
    return top  # constant


@dataclass
class PermutationPair:
    """A permutation of 0..T-1 together with its exact inverse."""

    perm: np.ndarray
    inv: np.ndarray

    def __post_init__(self):
        self.perm = np.asarray(self.perm, dtype=np.int64)
        self.inv = np.asarray(self.inv, dtype=np.int64)
        t = self.perm.shape[0]
        if self.inv.shape != (t,):
            raise ValueError("perm and inv lengths differ")
        if not np.array_equal(np.sort(self.perm), np.arange(t)):
            raise ValueError("perm is not a bijection on 0..T-1")
        if not np.array_equal(self.inv[self.perm], np.arange(t)):
            raise ValueError("inv does not invert perm")

    def __len__(self) -> int:
        return self.perm.shape[0]


def invert_permutation(perm: np.ndarray) -> np.ndarray:
    """O(T) inverse by direct scatter: inv[perm[t]] = t."""
    perm = np.asarray(perm, dtype=np.int64)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.shape[0], dtype=np.int64)
    return inv


def invert_permutation_argsort(perm: np.ndarray) -> np.ndarray:
    """O(T log T) inverse via sorting.

    Kept as the path the throughput benchmark exercises, so the measured
    restoration cost includes the sort term.
    """
    return np.argsort(np.asarray(perm, dtype=np.int64), kind="stable")


def _fisher_yates(t: int, gen: np.random.Generator) -> np.ndarray:
    # One vectorized draw for all swap targets, then the classic swap sweep.
    perm = list(range(t))
    if t > 1:
        js = gen.integers(0, np.arange(t, 1, -1))
        for k in range(t - 1):
            i = t - 1 - k
            j = int(js[k])
            perm[i], perm[j] = perm[j], perm[i]
    return np.asarray(perm, dtype=np.int64)


def sample_permutation(t: int, stream: Stream, use_argsort_inverse: bool = False) -> PermutationPair:
    """Uniform random permutation of length t with its inverse."""
    if t < 1:
        raise ValueError("permutation length must be >= 1")
    perm = _fisher_yates(t, stream.gen)
    inv = invert_permutation_argsort(perm) if use_argsort_inverse else invert_permutation(perm)
    return PermutationPair(perm=perm, inv=inv)


@dataclass
class ShuffleDecision:
    """Outcome of one layer's Bernoulli trial, reproducible from its coords."""

    active: bool
    pair: PermutationPair | None
    seed: int
    step: int
    layer: int


def _gated_permutation(include_cls: bool, t: int, gen: np.random.Generator) -> np.ndarray:
    if include_cls or t <= 1:
        return _fisher_yates(t, gen)
    # Keep position 0 (the [CLS] slot) fixed, permute the rest.
    perm = np.empty(t, dtype=np.int64)
    perm[0] = 0
    perm[1:] = 1 + _fisher_yates(t - 1, gen)
    return perm


def sample_decision(schedule: ShuffleSchedule, layer: int, seq_len: int,
                    stream: Stream) -> ShuffleDecision:
    """One Bernoulli trial plus, when it fires, one batch-shared permutation."""
    p = shuffle_probability(schedule, layer)
    active = bool(stream.gen.random() < p)
    pair = None
    if active:
        perm = _gated_permutation(schedule.include_cls, seq_len, stream.gen)
        inv = invert_permutation_argsort(perm) if schedule.argsort_inverse \
            else invert_permutation(perm)
        pair = PermutationPair(perm=perm, inv=inv)
    return ShuffleDecision(active=active, pair=pair,
                           seed=stream.seed, step=stream.step, layer=stream.layer)


def shuffled_call(layer_fn, x: Tensor, decision: ShuffleDecision | None) -> Tensor:
    """Run ``layer_fn`` under shuffle-then-restore when the decision fired.

    Inactive decisions (or None) take the plain path, which is what makes
    inference bitwise identical to an unwrapped model.
    """
    if decision is None or not decision.active:
        return layer_fn(x)
    shuffled = gather_rows(x, decision.pair.perm)
    out = layer_fn(shuffled)
    return gather_rows(out, decision.pair.inv)


def slws_layer_forward(layer_params, x: Tensor, schedule: ShuffleSchedule | None,
                       layer: int, training: bool, stream: Stream | None = None,
                       drop_path_rate: float = 0.0, drop_path_stream: Stream | None = None,
                       decision: ShuffleDecision | None = None) -> Tensor:
    """Mamba block forward wrapped in shuffle/restore.

    A pre-sampled ``decision`` overrides sampling (used by gradient checks
    that force a shuffle). With training=False or schedule=None the block
    runs unwrapped.
    """
    from .ssm import mamba_block_forward

    def fn(tokens: Tensor) -> Tensor:
        return mamba_block_forward(layer_params, tokens, training,
                                   drop_path_rate=drop_path_rate,
                                   drop_path_stream=drop_path_stream)

    if decision is None and training and schedule is not None:
        if stream is None:
            raise ValueError("training with a schedule requires an RNG stream")
        decision = sample_decision(schedule, layer, x.shape[1], stream)
    if not training:
        decision = None
    return shuffled_call(fn, x, decision)


def migration_probability(schedule: ShuffleSchedule, layer: int, seq_len: int) -> float:
    """Chance that a token lands on any one *other* fixed position.

    A uniform permutation of T tokens puts token i at position j with
    probability 1/T, so the Bernoulli-gated move probability is p_l / T.
    (The diagonal additionally carries the no-shuffle mass 1 - p_l.)
    """
    if seq_len < 2:
        raise ValueError("migration needs at least 2 tokens")
    return shuffle_probability(schedule, layer) / seq_len


def empirical_migration_estimate(schedule: ShuffleSchedule, layer: int, seq_len: int,
                                 trials: int, stream: Stream) -> np.ndarray:
    """Monte Carlo source->destination frequency matrix; rows sum to 1."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    p = shuffle_probability(schedule, layer)
    counts = np.zeros((seq_len, seq_len), dtype=np.float64)
    positions = np.arange(seq_len)
    gen = stream.gen
    for _ in range(trials):
        if gen.random() < p:
            perm = _gated_permutation(schedule.include_cls, seq_len, gen)
            counts[perm, positions] += 1.0
        else:
            counts[positions, positions] += 1.0
    return counts / trials
