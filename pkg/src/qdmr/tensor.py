"""Dense rank<=3 tensors with tape-based reverse-mode automatic differentiation.

Only the operations the moment-retrieval model actually needs: 2-D matmul,
elementwise arithmetic with numpy-style broadcasting, masked softmax, layer
norm, reductions, slicing and concatenation, plus a gradient tape that is
rebuilt every training step.  The default dtype is float64 (used by the
gradient-check suite); training switches to float32 through
``set_default_dtype``.

The tape lives in thread-local state, so independent model replicas may run
in parallel threads without sharing graphs.  Records are appended in
execution order and ``backward`` walks them once in reverse, which is a
valid topological order by construction.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "GradCheckReport",
    "MaskError",
    "ShapeError",
    "Tensor",
    "abs_",
    "backward",
    "clip",
    "concat",
    "cos",
    "dropout",
    "exp",
    "get_default_dtype",
    "grad_check",
    "inverse_sigmoid",
    "layer_norm",
    "log",
    "logsumexp_lastdim",
    "matmul",
    "maximum",
    "mean",
    "minimum",
    "no_grad",
    "relu",
    "reset_tape",
    "reshape",
    "set_default_dtype",
    "sigmoid",
    "sin",
    "softmax_lastdim",
    "softplus",
    "sum_",
    "take",
    "tape_scope",
    "transpose",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class MaskError(ValueError):
    """A boolean mask leaves no valid entries where at least one is required."""


_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float64


def set_default_dtype(dtype: str) -> None:
    """Set the dtype used for newly created tensors ("float32" or "float64")."""
    global _default_dtype
    if dtype not in _DTYPES:
        raise ValueError(f"unknown dtype {dtype!r}, expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[dtype]


def get_default_dtype() -> str:
    return "float32" if _default_dtype is np.float32 else "float64"


_state = threading.local()


def _tls() -> threading.local:
    if not hasattr(_state, "tape"):
        _state.tape = []
        _state.grad_enabled = True
    return _state


class Tensor:
    """A numpy array plus an optional gradient buffer.

    Leaves created with ``requires_grad=True`` accumulate into ``grad``
    additively across ``backward`` calls; ``zero_grad`` resets them.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _default_dtype)
        if arr.ndim > 3:
            raise ShapeError(f"tensors are limited to rank 3, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars and ndarrays are wrapped as constants.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis: int | None = None) -> "Tensor":
        return sum_(self, axis)

    def mean(self, axis: int | None = None) -> "Tensor":
        return mean(self, axis)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, parents: tuple[Tensor, ...], fn: Callable) -> Tensor:
    """Append a tape record if grads are enabled and any parent needs one."""
    st = _tls()
    if st.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.grad = np.zeros_like(out.data)
        st.tape.append((out, parents, fn))
    return out


def reset_tape() -> None:
    """Drop all recorded operations (call once per training step)."""
    _tls().tape.clear()


@contextlib.contextmanager
def tape_scope():
    """Run with a fresh tape, restoring the previous one afterwards."""
    st = _tls()
    saved = st.tape
    st.tape = []
    try:
        yield
    finally:
        st.tape = saved


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation mode)."""
    st = _tls()
    saved = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = saved


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf.

    Repeated calls add up.  The walk visits each tape record exactly once in
    reverse execution order; per-call gradients are kept in a scratch map so
    earlier accumulations are never double-counted.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    st = _tls()
    scratch: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for out, parents, fn in reversed(st.tape):
        g = scratch.get(id(out))
        if g is None:
            continue
        for parent, pg in zip(parents, fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in scratch:
                scratch[key] = scratch[key] + pg
            else:
                scratch[key] = pg
                holders[key] = parent
    for key, t in holders.items():
        if t.requires_grad:
            t.grad += scratch[key]


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the pre-broadcast operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data / b.data)
    return _record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs two rank-2 tensors, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data)
    return _record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a rank-2 tensor, got shape {a.shape}")
    out = Tensor(a.data.T.copy())
    return _record(out, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def getitem(a, key) -> Tensor:
    """Basic (slice/int) indexing; use ``take`` for index arrays."""
    a = _as_tensor(a)
    out = Tensor(np.array(a.data[key]))

    def fn(g):
        z = np.zeros_like(a.data)
        z[key] += g
        return (z,)

    return _record(out, (a,), fn)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather rows by an integer index array (duplicates accumulate on backward)."""
    a = _as_tensor(a)
    if axis != 0:
        raise ShapeError("take supports axis=0 only")
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor(a.data[idx])

    def fn(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return (z,)

    return _record(out, (a,), fn)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _record(out, tuple(parts), fn)


def sum_(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis))

    def fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _record(out, (a,), fn)


def mean(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis), 1.0 / n)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))
    return _record(out, (a,), lambda g: (g * (a.data > 0.0),))


def abs_(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.abs(a.data))
    return _record(out, (a,), lambda g: (g * np.sign(a.data),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.exp(a.data))
    return _record(out, (a,), lambda g: (g * out.data,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def sin(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.sin(a.data))
    return _record(out, (a,), lambda g: (g * np.cos(a.data),))


def cos(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.cos(a.data))
    return _record(out, (a,), lambda g: (-g * np.sin(a.data),))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # tanh form is stable for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(_sigmoid_np(a.data))
    return _record(out, (a,), lambda g: (g * out.data * (1.0 - out.data),))


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    a = _as_tensor(a)
    out = Tensor(np.logaddexp(0.0, a.data))
    return _record(out, (a,), lambda g: (g * _sigmoid_np(a.data),))


def minimum(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    pick_a = a.data <= b.data  # ties route to the first operand
    out = Tensor(np.where(pick_a, a.data, b.data))
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
    )


def maximum(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    pick_a = a.data >= b.data  # ties route to the first operand
    out = Tensor(np.where(pick_a, a.data, b.data))
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
    )


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; the gradient passes only inside the interval."""
    a = _as_tensor(a)
    out = Tensor(np.clip(a.data, lo, hi))
    inside = (a.data >= lo) & (a.data <= hi)
    return _record(out, (a,), lambda g: (g * inside,))


def dropout(a, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; rate 0 is the identity and draws nothing from rng."""
    a = _as_tensor(a)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return a
    keep = rng.random(a.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    out = Tensor(a.data * keep * scale)
    return _record(out, (a,), lambda g: (g * keep * scale,))


def softmax_lastdim(a, mask=None) -> Tensor:
    """Row-stable softmax over the last axis.

    ``mask`` is a boolean array broadcastable to ``a.shape``; masked entries
    get probability exactly 0.  A row with no valid entry raises MaskError.
    """
    a = _as_tensor(a)
    if mask is None:
        valid = np.ones(a.shape, dtype=bool)
    else:
        m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
        valid = np.broadcast_to(m.astype(bool), a.shape)
    if not valid.any(axis=-1).all():
        raise MaskError("softmax over a fully masked row")
    shifted = np.where(valid, a.data, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    z = np.where(valid, np.exp(shifted), 0.0)
    y = z / z.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def fn(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner),)

    return _record(out, (a,), fn)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def fn(g):
        gg = g * gamma.data
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        axes = tuple(range(g.ndim - 1))
        return (gx, (g * xhat).sum(axis=axes), g.sum(axis=axes))

    return _record(out, (x, gamma, beta), fn)


def logsumexp_lastdim(a) -> Tensor:
    """log(sum(exp(x))) over the last axis, shifted by the row max for stability."""
    a = _as_tensor(a)
    m = a.data.max(axis=-1, keepdims=True)  # constant shift, gradient unaffected
    z = exp(sub(a, m))
    return add(log(sum_(z, axis=a.ndim - 1)), np.squeeze(m, axis=-1))


def inverse_sigmoid(a, eps: float = 1e-4) -> Tensor:
    """logit(x) with the argument clamped to [eps, 1 - eps]."""
    c = clip(_as_tensor(a), eps, 1.0 - eps)
    return sub(log(c), log(sub(1.0, c)))


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: float
    tol: float
    n_checked: int
    passed: bool


def grad_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5,
               tol: float = 1e-4) -> GradCheckReport:
    """Compare the tape gradient of scalar-valued ``f`` against central differences.

    The relative error denominator is floored at 1 so near-zero gradients are
    compared absolutely.  Runs in float64 regardless of the default dtype.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64, order="C")
    xt = Tensor(base.copy(), requires_grad=True, dtype=np.float64)
    with tape_scope():
        out = f(xt)
        if out.data.size != 1:
            raise ValueError(f"grad_check expects a scalar-valued f, got shape {out.shape}")
        backward(out)
    analytic = xt.grad.reshape(-1).copy()

    numeric = np.zeros(base.size)
    probe = Tensor(base, dtype=np.float64)  # shares the buffer being perturbed
    with no_grad():
        for i in range(base.size):
            orig = base.flat[i]
            base.flat[i] = orig + step
            fp = float(f(probe).data)
            base.flat[i] = orig - step
            fm = float(f(probe).data)
            base.flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * step)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    max_err = float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0
    return GradCheckReport(max_rel_err=max_err, tol=tol, n_checked=int(base.size),
                           passed=max_err <= tol)
