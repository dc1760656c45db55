"""Finite-difference verification battery for every differentiable op.

All checks run in float64 with central differences; each entry perturbs one
input tensor of a small composite whose output is weighted before summation so
uniform-gradient false passes cannot slip through.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng, slws, ssm
from . import tensor as T
from .mfd import smooth_l1
from .model import VimConfig, init_vim_params, vim_forward
from .optim import label_smoothing_ce
from .tensor import Tensor, grad_check

OP_THRESHOLD = 1e-4
BLOCK_THRESHOLD = 1e-3


@dataclass
class CheckResult:
    name: str
    error: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.error < self.threshold


def _weight_for(shape) -> Tensor:
    w = np.cos(0.7 * np.arange(int(np.prod(shape)), dtype=np.float64) + 0.3)
    return Tensor(w.reshape(shape))


def _weighted(out: Tensor) -> Tensor:
    return (out * _weight_for(out.shape)).sum()


def run_battery(h: float = 1e-5, seed: int = 0) -> list[CheckResult]:
    gen = np.random.default_rng(seed)
    results: list[CheckResult] = []

    def check(name, fn, x, threshold=OP_THRESHOLD, step=h):
        err = grad_check(fn, T.parameter(x, np.float64), step)
        results.append(CheckResult(name=name, error=err, threshold=threshold))

    a34 = gen.normal(size=(3, 4))
    other = Tensor(gen.normal(size=(3, 4)), dtype=np.float64)
    mat45 = Tensor(gen.normal(size=(4, 5)), dtype=np.float64)
    check("add", lambda x: _weighted(x + other), a34)
    check("sub", lambda x: _weighted(x - other), a34)
    check("mul", lambda x: _weighted(x * other), a34)
    check("matmul", lambda x: _weighted(T.matmul(x, mat45)), a34)
    check("exp", lambda x: _weighted(x.exp()), 0.5 * a34)
    check("log", lambda x: _weighted(x.log()), 0.5 + np.abs(a34))
    check("abs", lambda x: _weighted(x.abs()), 0.5 + np.abs(a34))
    check("softplus", lambda x: _weighted(x.softplus()), a34)
    check("sigmoid", lambda x: _weighted(x.sigmoid()), a34)
    check("silu", lambda x: _weighted(x.silu()), a34)
    gamma = Tensor(gen.normal(size=4), dtype=np.float64, requires_grad=True)
    beta = Tensor(gen.normal(size=4), dtype=np.float64, requires_grad=True)
    check("layer_norm", lambda x: _weighted(T.layer_norm(x, gamma, beta)), a34)
    check("layer_norm_plain", lambda x: _weighted(T.layer_norm(x)), a34)
    check("softmax", lambda x: _weighted(T.softmax(x)), a34)
    check("sum_axis", lambda x: _weighted(x.sum(axis=0)), a34)
    check("mean", lambda x: x.mean() * 3.0, a34)
    check("reshape", lambda x: _weighted(x.reshape((4, 3))), a34)
    check("transpose", lambda x: _weighted(x.transpose((1, 0))), a34)
    check("flip", lambda x: _weighted(x.flip(1)), a34)
    check("concat", lambda x: _weighted(T.concat([x, other], axis=1)), a34)
    check("narrow", lambda x: _weighted(T.narrow(x, 1, 1, 2)), a34)
    check("broadcast_to", lambda x: _weighted(T.broadcast_to(x, (5, 3, 4))), a34)

    b243 = gen.normal(size=(2, 4, 3))
    perm = rng.stream(seed, rng.TAG_SHUFFLE, 0, 0).gen.permutation(4)
    check("gather_rows", lambda x: _weighted(T.gather_rows(x, perm)), b243)
    check("index_rows", lambda x: _weighted(T.index_rows(x, np.array([2, 0, 2]))), b243)
    check("scatter_rows", lambda x: _weighted(T.scatter_rows(x, np.array([4, 1, 0, 3]), 6)), b243)

    z = gen.normal(size=(3, 4)) * 0.5
    check("zoh_input_factor", lambda x: _weighted(ssm.zoh_input_factor(x)), z)

    delta = 0.05 + 0.3 * gen.random((2, 3, 2, 1))
    a_mat = Tensor(-0.1 - gen.random((2, 4)), dtype=np.float64)
    b_mat = Tensor(gen.normal(size=(2, 3, 1, 4)), dtype=np.float64)

    def zoh_fn(x):
        abar, bbar = ssm.zoh_discretize(x, a_mat, b_mat)
        return _weighted(abar) + _weighted(bbar)

    check("zoh_discretize", zoh_fn, delta)

    bsz, t_len, d_model, n_state = 1, 5, 2, 3
    sc = {
        "abar": 0.2 + 0.7 * gen.random((bsz, t_len, d_model, n_state)),
        "bbar": gen.normal(size=(bsz, t_len, d_model, n_state)),
        "c": gen.normal(size=(bsz, t_len, n_state)),
        "d_skip": gen.normal(size=d_model),
        "x": gen.normal(size=(bsz, t_len, d_model)),
    }
    for slot in sc:
        def scan_fn(v, slot=slot):
            args = {k: Tensor(arr, dtype=np.float64) for k, arr in sc.items()}
            args[slot] = v
            return _weighted(ssm.selective_scan(
                args["abar"], args["bbar"], args["c"], args["d_skip"], args["x"]))
        check(f"selective_scan[{slot}]", scan_fn, sc[slot].copy())

    check("smooth_l1", lambda x: smooth_l1(x, other, beta=0.7), a34)

    labels = np.array([1, 3, 0])
    check("label_smoothing_ce", lambda x: label_smoothing_ce(x, labels, 0.1), a34)

    # Shuffle-wrapped Mamba block with a forced shuffle decision.
    layer = ssm.init_mamba_layer(4, 2, 3, 4, 2, True,
                                 rng.stream(seed, rng.TAG_INIT, 0, 9), dtype=np.float64)
    sched = slws.ShuffleSchedule(kind="constant", p_l=1.0, layers=2)
    decision = slws.sample_decision(sched, 1, 6, rng.stream(seed, rng.TAG_SHUFFLE, 0, 1))
    assert decision.active
    xin = gen.normal(size=(1, 6, 4))

    def block_fn(v):
        out = slws.slws_layer_forward(layer, v, sched, 1, True, None, decision=decision)
        return _weighted(out)

    check("slws_wrapped_block", block_fn, xin, threshold=BLOCK_THRESHOLD)

    # Full toy model: depth 2, width 8, state 4, 9 patch tokens, no [CLS].
    cfg = VimConfig(depth=2, width=8, state_size=4, patch_size=4, image_size=12,
                    num_classes=3, cls_token=False)
    params = init_vim_params(cfg, seed=seed, dtype=np.float64)
    img = gen.normal(size=(1, 12, 12, 3))

    def model_fn(v):
        return _weighted(vim_forward(cfg, params, v, training=False))

    check("vim_model", model_fn, img, threshold=BLOCK_THRESHOLD)
    return results


def format_results(results) -> str:
    lines = []
    for r in results:
        flag = "ok" if r.passed else "FAIL"
        lines.append(f"{r.name:28s} {r.error:10.3e}  (< {r.threshold:g})  {flag}")
    return "\n".join(lines)
