"""Minimal dense tensors with reverse-mode automatic differentiation.

A `Tensor` wraps a numpy float32/float64 array. Operations record a tape
node (parents + vector-Jacobian product) whenever gradients are enabled
and at least one operand requires them; `backward` walks the tape in
reverse topological order with deterministic accumulation.

Float32 is the working precision for training; gradient checks run the
same graphs in float64 (`finite_diff_check`). The opt-in checked mode
raises on any non-finite intermediate.
"""

from __future__ import annotations

import builtins
import contextlib
import math
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

# Large negative stand-in for log(0); -inf would poison sums.
LOG_ZERO = -1.0e30


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NumericsError(FloatingPointError):
    """Checked mode found a NaN/Inf intermediate."""


_grad_enabled = True
_checked = False


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (pure inference)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def checked():
    """Assert finiteness of every op result inside the block."""
    global _checked
    prev, _checked = _checked, True
    try:
        yield
    finally:
        _checked = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, grad={self.requires_grad})"

    # operator sugar; scalars and ndarrays are wrapped as constants
    def __add__(self, other):
        return add(self, _wrap(other, self))

    def __radd__(self, other):
        return add(_wrap(other, self), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self))

    def __rmul__(self, other):
        return mul(_wrap(other, self), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def constant(data, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype))


def _node(data: np.ndarray, parents: tuple, vjp, op: str) -> Tensor:
    if _checked and not np.all(np.isfinite(data)):
        raise NumericsError(f"non-finite result from op '{op}'")
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    if _grad_enabled and builtins.any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
        t._vjp = vjp
        t._op = op
    else:
        t.requires_grad = False
        t._parents = ()
        t._vjp = None
        t._op = op
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, (g, s) in enumerate(zip(grad.shape, shape)):
        if s == 1 and g != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ----------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
                 "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
                 "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
                 "div")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scalar_mul")


def pow_const(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out = a.data ** p
    return _node(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow_const")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    return _node(out, (a,), lambda g: (g * (a.data > 0),), "relu")


# ----------------------------------------------------------------------
# linear algebra / structure


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner-dim mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return _node(out, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g),
                 "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")
    return _node(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)
    if not ts:
        raise ShapeError("concat of zero tensors")
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _node(out, tuple(ts), vjp, "concat")


def slice_axis(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    if start < 0 or length < 0 or start + length > a.shape[axis]:
        raise ShapeError(
            f"slice [{start}:{start + length}) out of range for axis {axis} of {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = a.data[idx].copy()

    def vjp(g):
        z = np.zeros_like(a.data)
        z[idx] = g
        return (z,)

    return _node(out, (a,), vjp, "slice")


def _scatter_add(n_out: int, idx: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Rows accumulated into an (n_out, ...) zero array at idx (duplicates
    sum). Sort + reduceat; deterministic and much faster than np.add.at."""
    out = np.zeros((n_out,) + rows.shape[1:], dtype=rows.dtype)
    if idx.size == 0:
        return out
    order = np.argsort(idx, kind="stable")
    sorted_idx = idx[order]
    sorted_rows = rows[order]
    starts = np.flatnonzero(np.diff(sorted_idx)) + 1
    starts = np.concatenate([[0], starts])
    out[sorted_idx[starts]] = np.add.reduceat(sorted_rows, starts, axis=0)
    return out


def take_rows(a: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    out = a.data[idx]

    def vjp(g):
        return (_scatter_add(a.shape[0], idx, g).reshape(a.shape),)

    return _node(out, (a,), vjp, "take_rows")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Row gather by integer id; gradient scatter-adds into the table."""
    return take_rows(table, ids)


def scatter_rows(rows: Tensor, indices, n_out: int) -> Tensor:
    """Accumulate `rows` into an (n_out, ...) zero tensor at `indices`."""
    idx = np.asarray(indices, dtype=np.int64)
    out = _scatter_add(n_out, idx, rows.data)
    return _node(out, (rows,), lambda g: (g[idx],), "scatter_rows")


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, np.asarray(value, dtype=a.data.dtype), a.data)
    if out.shape != a.shape:
        raise ShapeError(f"mask shape {mask.shape} does not broadcast over {a.shape}")
    keep = ~mask
    return _node(out, (a,), lambda g: (_unbroadcast(g * keep, a.shape),), "masked_fill")


# ----------------------------------------------------------------------
# reductions


def _expand_reduced(g: np.ndarray, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape).astype(g.dtype, copy=True)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).astype(g.dtype, copy=True)


def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _node(np.asarray(out, dtype=a.data.dtype), (a,),
                 lambda g: (_expand_reduced(np.asarray(g), a.shape, axis, keepdims),),
                 "sum")


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        return (_expand_reduced(np.asarray(g), a.shape, axis, keepdims) / count,)

    return _node(np.asarray(out, dtype=a.data.dtype), (a,), vjp, "mean")


def _onehot_extreme(data: np.ndarray, axis: int | None, argfn) -> np.ndarray:
    """One-hot of the first extreme along `axis` (deterministic tie-break)."""
    if axis is None:
        flat = np.zeros(data.size, dtype=data.dtype)
        flat[argfn(data)] = 1.0
        return flat.reshape(data.shape)
    onehot = np.zeros_like(data)
    idx = np.expand_dims(argfn(data, axis=axis), axis)
    np.put_along_axis(onehot, idx, 1.0, axis=axis)
    return onehot


def max(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.max(axis=axis, keepdims=keepdims)
    onehot = _onehot_extreme(a.data, axis, np.argmax)

    def vjp(g):
        return (_expand_reduced(np.asarray(g), a.shape, axis, keepdims) * onehot,)

    return _node(np.asarray(out, dtype=a.data.dtype), (a,), vjp, "max")


def min(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.min(axis=axis, keepdims=keepdims)
    onehot = _onehot_extreme(a.data, axis, np.argmin)

    def vjp(g):
        return (_expand_reduced(np.asarray(g), a.shape, axis, keepdims) * onehot,)

    return _node(np.asarray(out, dtype=a.data.dtype), (a,), vjp, "min")


# ----------------------------------------------------------------------
# normalizations


def _check_axis_nonempty(a: Tensor, axis: int, op: str):
    if a.shape[axis] == 0:
        raise ShapeError(f"{op} over empty axis {axis} of {a.shape}")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_axis_nonempty(a, axis, "softmax")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _node(out, (a,), vjp, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_axis_nonempty(a, axis, "log_softmax")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def vjp(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), vjp, "log_softmax")


def logsumexp(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    _check_axis_nonempty(a, axis, "logsumexp")
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    soft = e / s
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def vjp(g):
        return (_expand_reduced(np.asarray(g), a.shape, axis, keepdims) * soft,)

    return _node(out, (a,), vjp, "logsumexp")


def layer_norm(a: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean / unit variance along `axis` (no affine part)."""
    mu = mean(a, axis=axis, keepdims=True)
    centered = sub(a, mu)
    var = mean(mul(centered, centered), axis=axis, keepdims=True)
    inv = pow_const(add(var, constant(eps, dtype=a.data.dtype)), -0.5)
    return mul(centered, inv)


# ----------------------------------------------------------------------
# pooling


def max_pool_1d(a: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    """Max over row windows [i*stride, i*stride+kernel); trailing partial
    window allowed. Input (n, C), output (ceil(n/stride), C)."""
    if a.ndim != 2:
        raise ShapeError(f"max_pool_1d expects (n, C), got {a.shape}")
    n, c = a.shape
    if n == 0:
        raise ShapeError("max_pool_1d over zero rows")
    n_out = -(-n // stride)
    out = np.empty((n_out, c), dtype=a.data.dtype)
    arg = np.empty((n_out, c), dtype=np.int64)
    for i in range(n_out):
        lo = i * stride
        hi = builtins.min(lo + kernel, n)
        window = a.data[lo:hi]
        rel = np.argmax(window, axis=0)
        arg[i] = rel + lo
        out[i] = window[rel, np.arange(c)]

    def vjp(g):
        z = np.zeros_like(a.data)
        cols = np.tile(np.arange(c), n_out)
        np.add.at(z, (arg.ravel(), cols), g.ravel())
        return (z,)

    return _node(out, (a,), vjp, "max_pool_1d")


# ----------------------------------------------------------------------
# backward pass and the gradient oracle


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse-mode sweep from a scalar loss.

    Returns a map id(tensor) -> gradient for every requires_grad leaf, and
    stores each leaf gradient on `tensor.grad` (overwriting). Accumulation
    order is fixed by the tape, so repeated runs are bit-identical.
    """
    if loss.shape != ():
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
    leaf_grads: dict[int, np.ndarray] = {}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            leaf_grads[id(node)] = g
            node.grad = g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    return leaf_grads


def finite_diff_check(f, params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between backward grads of f(params) and central
    finite differences, coordinate by coordinate.

    Relative error uses denominator max(1, |analytic|, |numeric|) so that
    near-zero gradients are compared absolutely.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    out = f(params)
    if not np.isfinite(out.data):
        raise NumericsError("non-finite objective in finite_diff_check")
    grad_map = backward(out)
    worst = 0.0
    for p in params:
        analytic = grad_map.get(id(p))
        if analytic is None:
            analytic = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                f_plus = float(f(params).data)
            flat[i] = orig - eps
            with no_grad():
                f_minus = float(f(params).data)
            flat[i] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise NumericsError("non-finite objective during perturbation")
            fd = (f_plus - f_minus) / (2.0 * eps)
            an = float(analytic.reshape(-1)[i])
            err = abs(an - fd) / builtins.max(1.0, abs(an), abs(fd))
            worst = builtins.max(worst, err)
    return worst
