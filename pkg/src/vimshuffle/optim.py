"""Optimizer, schedules, and stochastic-depth style regularizers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .rng import Stream
from .tensor import Tensor, reduce_sum


class MissingGradError(RuntimeError):
    pass


@dataclass
class OptimizerState:
    """AdamW moment accumulators keyed by parameter name."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict, state: OptimizerState, lr: float, weight_decay: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update with decoupled weight decay.

    Decay multiplies the pre-update parameter by (1 - lr*wd) independently of
    the gradient term, so a zero-gradient step still shrinks weights.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        if p.grad is None:
            raise MissingGradError(f"parameter {name!r} has no gradient")
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay:
            update = update + weight_decay * p.data
        p.data -= lr * update.astype(p.data.dtype, copy=False)


def cosine_lr(step: int, total_steps: int, warmup_steps: int, base_lr: float,
              min_lr: float = 1e-6) -> float:
    """Linear warmup to base_lr, then cosine decay to min_lr."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return base_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    progress = min(max(progress, 0.0), 1.0)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


def label_smoothing_ce(logits: Tensor, labels: np.ndarray, smoothing: float) -> Tensor:
    """Cross-entropy against (1-eps)*one-hot + eps/K uniform targets."""
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("smoothing must lie in [0, 1)")
    b, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= k:
        raise IndexError(f"label outside 0..{k - 1}")
    # Shifting by the row max is exact for log-softmax and keeps exp finite.
    shift = logits - logits.data.max(axis=-1, keepdims=True)
    log_z = shift.exp().sum(axis=-1, keepdims=True).log()
    log_probs = shift - log_z
    targets = np.full((b, k), smoothing / k, dtype=logits.dtype)
    targets[np.arange(b), labels] += 1.0 - smoothing
    nll = -reduce_sum(log_probs * Tensor(targets))
    return nll * (1.0 / b)


def drop_path(branch: Tensor, rate: float, training: bool,
              stream: Stream | None = None) -> Tensor:
    """Zero a residual branch per sample with probability ``rate``.

    Survivors are rescaled by 1/(1-rate) so the expectation is preserved;
    at inference this is the identity.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError("drop-path rate must lie in [0, 1)")
    if not training or rate == 0.0:
        return branch
    if stream is None:
        raise ValueError("drop_path in training mode needs an RNG stream")
    b = branch.shape[0]
    keep = (stream.gen.random(b) >= rate).astype(branch.data.dtype)
    keep = keep / (1.0 - rate)
    mask = keep.reshape((b,) + (1,) * (branch.ndim - 1))
    return branch * Tensor(mask)


@dataclass
class EmaState:
    """Exponential moving average shadow of the parameters."""

    shadow: dict
    decay: float

    def __post_init__(self):
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError("EMA decay must lie in [0, 1]")


def init_ema(params: dict, decay: float) -> EmaState:
    return EmaState(shadow={k: p.data.copy() for k, p in params.items()}, decay=decay)


def ema_update(state: EmaState, params: dict) -> None:
    d = state.decay
    for name, p in params.items():
        s = state.shadow[name]
        if s.shape != p.data.shape:
            raise ValueError(f"EMA shadow shape mismatch for {name!r}")
        s *= d
        s += (1.0 - d) * p.data


class swap_in_ema:
    """Context manager that evaluates with EMA weights, then restores."""

    def __init__(self, state: EmaState, params: dict):
        self.state = state
        self.params = params
        self._saved = None

    def __enter__(self):
        self._saved = {k: p.data for k, p in self.params.items()}
        for k, p in self.params.items():
            p.data = self.state.shadow[k].astype(p.data.dtype, copy=True)
        return self

    def __exit__(self, *exc):
        for k, p in self.params.items():
            p.data = self._saved[k]
        return False
