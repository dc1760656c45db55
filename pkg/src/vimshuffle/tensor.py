"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a row-major numpy array plus an optional gradient slot.
Forward ops record closures on a dynamic tape; ``Tensor.backward`` walks the
tape once in reverse topological order. Gradients accumulate across backward
calls until ``zero_grad`` is invoked, which is what micro-batching relies on.

float32 is the training dtype; gradient checking runs in float64 because
central finite differences are unreliable in single precision.
"""

from __future__ import annotations

import numpy as np

_DEBUG_CHECKS = False

# softplus switches to the identity above this point; the error there is
# below 1e-9 and exp() can no longer overflow.
_SOFTPLUS_CUTOFF = 20.0


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf assertions after every forward op (debug builds)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


def debug_checks_enabled() -> bool:
    return _DEBUG_CHECKS


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class Tensor:
    """N-dimensional array with an optional grad slot and tape hooks."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._prev = ()
        self._backward = None
        self._op = "leaf"

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}, op={self._op})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            # Copy rather than adopt: callers may pass views of live arrays.
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def _adopt_grad(self, g: np.ndarray) -> None:
        """First-contribution fast path for freshly allocated gradient arrays.

        Only backward closures that just built ``g`` (no views of upstream
        grads) may call this; everyone else goes through accumulate_grad.
        """
        if self.grad is None:
            self.grad = g
        else:
            self.grad += g

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return absval(self)

    def softplus(self):
        return softplus(self)

    def sigmoid(self):
        return sigmoid(self)

    def silu(self):
        return silu(self)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.size if axis is None else _axis_size(self.shape, axis)
        return reduce_sum(self, axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def flip(self, axis: int):
        return flip(self, axis)

    # -- backward ------------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar loss.

        Visits each tape node exactly once in reverse topological order.
        Leaf grads accumulate; call ``zero_grad`` between optimizer steps.
        """
        if self.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {tuple(self.shape)}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.accumulate_grad(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def zero_grad(params) -> None:
    """Clear grads of an iterable (or dict) of tensors."""
    values = params.values() if isinstance(params, dict) else params
    for p in values:
        p.zero_grad()


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _axis_size(shape, axis) -> int:
    if isinstance(axis, int):
        return shape[axis]
    n = 1
    for a in axis:
        n *= shape[a]
    return n


def _make(out_data: np.ndarray, parents: tuple, backward, op: str) -> Tensor:
    """Wrap a forward result, attaching tape state only when grads can flow."""
    if _DEBUG_CHECKS and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out._op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._prev = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient back down to the pre-broadcast operand shape."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise ops ---------------------------------------------------------


def _acc_maybe_shared(t: Tensor, g_reduced: np.ndarray, g_upstream: np.ndarray) -> None:
    # Adopt only when _unbroadcast actually produced a fresh reduction.
    if g_reduced is g_upstream:
        t.accumulate_grad(g_reduced)
    else:
        t._adopt_grad(g_reduced)


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        if a.requires_grad:
            _acc_maybe_shared(a, _unbroadcast(g, a.shape), g)
        if b.requires_grad:
            _acc_maybe_shared(b, _unbroadcast(g, b.shape), g)

    return _make(out, (a, b), backward, "add")


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        if a.requires_grad:
            _acc_maybe_shared(a, _unbroadcast(g, a.shape), g)
        if b.requires_grad:
            b._adopt_grad(_unbroadcast(-g, b.shape))

    return _make(out, (a, b), backward, "sub")


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        if a.requires_grad:
            a._adopt_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._adopt_grad(_unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), backward, "mul")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        a._adopt_grad(g * out)

    return _make(out, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def backward(g):
        a._adopt_grad(g / a.data)

    return _make(out, (a,), backward, "log")


def absval(a: Tensor) -> Tensor:
    out = np.abs(a.data)

    def backward(g):
        a._adopt_grad(g * np.sign(a.data))

    return _make(out, (a,), backward, "abs")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    small = x <= _SOFTPLUS_CUTOFF
    out = np.where(small, np.log1p(np.exp(np.minimum(x, _SOFTPLUS_CUTOFF))), x)
    out = out.astype(x.dtype, copy=False)

    def backward(g):
        # sigmoid(x) recovered from the saved output: 1 - exp(-softplus(x)).
        a._adopt_grad(g * -np.expm1(-out))

    return _make(out, (a,), backward, "softplus")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # exp(-x) may overflow to inf for very negative x; 1/(1+inf) is the
    # correct 0.0, so only the warning needs suppressing.
    with np.errstate(over="ignore"):
        return (1.0 / (1.0 + np.exp(-x))).astype(x.dtype, copy=False)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)

    def backward(g):
        a._adopt_grad(g * out * (1.0 - out))

    return _make(out, (a,), backward, "sigmoid")


def silu(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)
    out = a.data * s

    def backward(g):
        a._adopt_grad(g * s * (1.0 + a.data * (1.0 - s)))

    return _make(out, (a,), backward, "silu")


# -- matmul / normalization --------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading dims broadcast, inner dims must match."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims of {a.shape} and {b.shape} do not match")
    out = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._adopt_grad(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._adopt_grad(_unbroadcast(gb, b.shape))

    return _make(out, (a, b), backward, "matmul")


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Per-token normalization over the last axis, optional affine.

    Zero-variance tokens map to zeros: eps keeps the denominator finite.
    """
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise ShapeError("layer_norm: last axis must be non-empty")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    parents = tuple(t for t in (x, gamma, beta) if t is not None)

    def backward(g):
        gh = g if gamma is None else g * gamma.data
        if x.requires_grad:
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True)
            x._adopt_grad(inv * (gh - m1 - xhat * m2))
        if gamma is not None and gamma.requires_grad:
            gamma.accumulate_grad(_unbroadcast(g * xhat, gamma.shape))
        if beta is not None and beta.requires_grad:
            beta.accumulate_grad(_unbroadcast(g, beta.shape))

    return _make(out.astype(x.dtype, copy=False), parents, backward, "layer_norm")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis (used by the distillation decoder)."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        x._adopt_grad(out * (g - inner))

    return _make(out.astype(x.dtype, copy=False), (x,), backward, "softmax")


# -- reductions / shape ops --------------------------------------------------


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=x.dtype)

    def backward(g):
        if axis is None:
            x.accumulate_grad(np.broadcast_to(g, x.shape).astype(x.dtype, copy=False))
        else:
            gg = g
            if not keepdims:
                axes = (axis,) if isinstance(axis, int) else tuple(axis)
                axes = tuple(a % x.ndim for a in axes)
                for a in sorted(axes):
                    gg = np.expand_dims(gg, a)
            x.accumulate_grad(np.broadcast_to(gg, x.shape).astype(x.dtype, copy=False))

    return _make(out, (x,), backward, "sum")


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        x.accumulate_grad(g.reshape(x.shape))

    return _make(out, (x,), backward, "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(a % x.ndim for a in axes)
    out = np.ascontiguousarray(x.data.transpose(axes))
    inverse = np.argsort(axes)

    def backward(g):
        x.accumulate_grad(g.transpose(inverse))

    return _make(out, (x,), backward, "transpose")


def flip(x: Tensor, axis: int) -> Tensor:
    out = np.ascontiguousarray(np.flip(x.data, axis=axis))

    def backward(g):
        x.accumulate_grad(np.flip(g, axis=axis))

    return _make(out, (x,), backward, "flip")


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(idx)])

    return _make(out, tuple(tensors), backward, "concat")


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = np.ascontiguousarray(x.data[idx])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        x.accumulate_grad(gx)

    return _make(out, (x,), backward, "narrow")


def broadcast_to(x: Tensor, shape) -> Tensor:
    out = np.ascontiguousarray(np.broadcast_to(x.data, shape))

    def backward(g):
        x.accumulate_grad(_unbroadcast(g, x.shape))

    return _make(out, (x,), backward, "broadcast_to")


# -- row gathers -------------------------------------------------------------


def _check_permutation(idx: np.ndarray, t: int) -> None:
    if idx.ndim != 1 or idx.shape[0] != t:
        raise ShapeError(f"gather_rows: index length {idx.shape} does not match T={t}")
    if idx.size and (idx.min() < 0 or idx.max() >= t):
        raise IndexError(f"gather_rows: indices out of range 0..{t - 1}")
    seen = np.zeros(t, dtype=bool)
    seen[idx] = True
    if not seen.all():
        raise ValueError("gather_rows: indices are not a permutation (repeats or gaps)")


def gather_rows(x: Tensor, idx) -> Tensor:
    """Reorder the token axis of [B, T, ...] by a permutation.

    out[b, t] = x[b, idx[t]]. The backward pass routes gradients to their
    source rows, i.e. applies the inverse permutation to the upstream grad.
    """
    idx = np.asarray(idx, dtype=np.int64)
    _check_permutation(idx, x.shape[1])
    out = np.ascontiguousarray(x.data[:, idx])

    def backward(g):
        gx = np.empty_like(x.data)
        gx[:, idx] = g
        x.accumulate_grad(gx)

    return _make(out, (x,), backward, "gather_rows")


def index_rows(x: Tensor, idx) -> Tensor:
    """Select a subset of token rows (not necessarily a permutation).

    Backward scatter-adds, so repeated indices are handled correctly.
    """
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise IndexError("index_rows: indices out of range")
    out = np.ascontiguousarray(x.data[:, idx])

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), idx), g)
        x.accumulate_grad(gx)

    return _make(out, (x,), backward, "index_rows")


def scatter_rows(x: Tensor, idx, length: int) -> Tensor:
    """Place token rows of [B, K, D] at positions idx of a zeroed [B, length, D]."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape[0] != x.shape[1]:
        raise ShapeError(f"scatter_rows: {idx.shape[0]} indices for {x.shape[1]} rows")
    if idx.size and (idx.min() < 0 or idx.max() >= length):
        raise IndexError("scatter_rows: indices out of range")
    if np.unique(idx).size != idx.size:
        raise ValueError("scatter_rows: duplicate destination indices")
    out = np.zeros((x.shape[0], length) + x.shape[2:], dtype=x.dtype)
    out[:, idx] = x.data

    def backward(g):
        x.accumulate_grad(np.ascontiguousarray(g[:, idx]))

    return _make(out, (x,), backward, "scatter_rows")


# -- gradient checking -------------------------------------------------------


def grad_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-FD gradients of f at x.

    f must be scalar-valued; x should be float64, since the FD truncation
    error (~h^2) swamps float32 precision.
    """
    x.zero_grad()
    out = f(x)
    if out.size != 1:
        raise ShapeError("grad_check: f must return a scalar")
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    flat = x.data.reshape(-1)
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).data)
        flat[i] = orig - h
        fm = float(f(x).data)
        flat[i] = orig
        fd[i] = (fp - fm) / (2.0 * h)
    fd = fd.reshape(x.shape)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(fd)))
    return float(np.max(np.abs(analytic - fd) / denom))
