"""Differentiable numeric kernels with a reverse-mode gradient tape.

Every kernel accepts either plain ``numpy`` arrays or :class:`Var` nodes.
With plain arrays it is an ordinary numpy call (the fast path used for
evaluation); as soon as one argument is a ``Var`` the result is recorded
on that variable's :class:`Tape` so gradients can be pulled back later.

All arithmetic is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Var", "Tape", "NonFiniteError", "ParamVector", "GradientRecord",
    "add", "sub", "mul", "div", "neg", "matmul", "concat", "stack",
    "tanh", "sigmoid", "softplus", "exp", "log", "sum", "take", "reshape",
    "transpose", "softmax", "value_of",
    "evaluate_with_gradients", "finite_difference_check",
]


class NonFiniteError(FloatingPointError):
    """Raised when a kernel produces NaN or Inf."""

    def __init__(self, kernel: str, detail: str = ""):
        self.kernel = kernel
        msg = f"non-finite value produced by kernel '{kernel}'"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class Tape:
    """Creation-ordered list of nodes; creation order is a topological order."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[Var] = []

    def backward(self, root: "Var") -> None:
        if root.value.size != 1:
            raise ValueError("backward() needs a scalar root")
        root.grad = np.ones_like(root.value)
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)


class Var:
    __slots__ = ("value", "grad", "tape", "op", "_backward", "_owned")

    __array_priority__ = 1000  # make ndarray <op> Var dispatch to Var

    def __init__(self, value, tape: Tape, op: str = "leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.tape = tape
        self.op = op
        self._backward = None
        self._owned = False
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def T(self):
        return transpose(self)

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.value.shape})"

    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __neg__(self): return neg(self)
    def __getitem__(self, idx): return take(self, idx)


def _accum(node, g) -> None:
    if not isinstance(node, Var):
        return
    if node.grad is None:
        node.grad = g
        node._owned = False
    else:
        node.grad = node.grad + g
        node._owned = True


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def value_of(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _node(value, tape: Tape, op: str, backward) -> Var:
    # a finite sum implies finite entries; only scan when the sum says otherwise
    total = np.add.reduce(value, axis=None)
    if not math.isfinite(total) and not np.isfinite(value).all():
        raise NonFiniteError(op)
    out = Var(value, tape, op)
    out._backward = backward
    return out


# ---------------------------------------------------------------- kernels


def add(a, b):
    tape = _tape_of(a, b)
    va, vb = value_of(a), value_of(b)
    out = va + vb
    if tape is None:
        return out
    sa, sb = np.shape(va), np.shape(vb)
    return _node(out, tape, "add", lambda g: (
        _accum(a, _unbroadcast(g, sa)), _accum(b, _unbroadcast(g, sb))))


def sub(a, b):
    tape = _tape_of(a, b)
    va, vb = value_of(a), value_of(b)
    out = va - vb
    if tape is None:
        return out
    sa, sb = np.shape(va), np.shape(vb)
    return _node(out, tape, "sub", lambda g: (
        _accum(a, _unbroadcast(g, sa)), _accum(b, _unbroadcast(-g, sb))))


def neg(a):
    tape = _tape_of(a)
    if tape is None:
        return -a
    return _node(-a.value, tape, "neg", lambda g: _accum(a, -g))


def mul(a, b):
    """Element-wise product (numpy broadcasting)."""
    tape = _tape_of(a, b)
    va, vb = value_of(a), value_of(b)
    out = va * vb
    if tape is None:
        return out
    sa, sb = np.shape(va), np.shape(vb)

    def back(g):
        if isinstance(a, Var):
            _accum(a, _unbroadcast(g * vb, sa))
        if isinstance(b, Var):
            _accum(b, _unbroadcast(g * va, sb))
    return _node(out, tape, "mul", back)


def div(a, b):
    tape = _tape_of(a, b)
    va, vb = value_of(a), value_of(b)
    out = va / vb
    if tape is None:
        return out
    sa, sb = np.shape(va), np.shape(vb)

    def back(g):
        if isinstance(a, Var):
            _accum(a, _unbroadcast(g / vb, sa))
        if isinstance(b, Var):
            _accum(b, _unbroadcast(-g * out / vb, sb))
    return _node(out, tape, "div", back)


def matmul(a, b):
    """Matrix-vector / matrix-matrix product with ``@`` semantics (1-D or 2-D)."""
    tape = _tape_of(a, b)
    va, vb = value_of(a), value_of(b)
    out = va @ vb
    if tape is None:
        return out

    def back(g):
        if isinstance(a, Var):
            if vb.ndim == 1:
                ga = np.outer(g, vb) if va.ndim == 2 else g * vb
            else:
                ga = g @ vb.T if va.ndim == 2 else vb @ g
            _accum(a, ga)
        if isinstance(b, Var):
            if va.ndim == 1:
                gb = np.outer(va, g) if vb.ndim == 2 else g * va
            else:
                gb = va.T @ g if vb.ndim == 2 else g @ va
            _accum(b, gb)
    return _node(out, tape, "matmul", back)


def concat(xs: Sequence, axis: int = 0):
    tape = _tape_of(*xs)
    vals = [value_of(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    if tape is None:
        return out
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def back(g):
        for x, gx in zip(xs, np.split(g, bounds, axis=axis)):
            _accum(x, gx)
    return _node(out, tape, "concat", back)


def stack(xs: Sequence, axis: int = 0):
    tape = _tape_of(*xs)
    out = np.stack([value_of(x) for x in xs], axis=axis)
    if tape is None:
        return out

    def back(g):
        for k, x in enumerate(xs):
            _accum(x, np.take(g, k, axis=axis))
    return _node(out, tape, "concat", back)


def tanh(a):
    tape = _tape_of(a)
    out = np.tanh(value_of(a))
    if tape is None:
        return out
    return _node(out, tape, "tanh", lambda g: _accum(a, g * (1.0 - out * out)))


def sigmoid(a):
    tape = _tape_of(a)
    out = expit(value_of(a))
    if tape is None:
        return out
    return _node(out, tape, "sigmoid", lambda g: _accum(a, g * out * (1.0 - out)))


def softplus(a):
    """log(1 + e^x) without overflow."""
    tape = _tape_of(a)
    va = value_of(a)
    out = np.logaddexp(0.0, va)
    if tape is None:
        return out
    return _node(out, tape, "softplus", lambda g: _accum(a, g * expit(va)))


def exp(a):
    tape = _tape_of(a)
    with np.errstate(over="ignore"):
        out = np.exp(value_of(a))
    if tape is None:
        return out
    return _node(out, tape, "exp", lambda g: _accum(a, g * out))


def log(a):
    tape = _tape_of(a)
    va = value_of(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(va)
    if tape is None:
        return out
    return _node(out, tape, "log", lambda g: _accum(a, g / va))


def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    tape = _tape_of(a)
    va = value_of(a)
    out = np.sum(va, axis=axis)
    if tape is None:
        return out
    shape = va.shape

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, shape))
    return _node(out, tape, "sum", back)


def take(a, idx):
    """Basic or integer-array indexing, ``a[idx]``."""
    tape = _tape_of(a)
    va = value_of(a)
    out = va[idx]
    if tape is None:
        return out
    basic = _is_basic_index(idx)

    def back(g):
        if a.grad is None:
            a.grad = np.zeros_like(va)
            a._owned = True
        elif not a._owned:
            a.grad = a.grad.copy()
            a._owned = True
        if basic:
            a.grad[idx] += g
        else:
            np.add.at(a.grad, idx, g)
    out_node = _node(np.array(out, copy=True), tape, "take", back)
    return out_node


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis
               for i in items)


def reshape(a, shape):
    tape = _tape_of(a)
    va = value_of(a)
    out = np.reshape(va, shape)
    if tape is None:
        return out
    src = va.shape
    return _node(out, tape, "reshape", lambda g: _accum(a, np.reshape(g, src)))


def transpose(a):
    tape = _tape_of(a)
    out = value_of(a).T
    if tape is None:
        return out
    return _node(out, tape, "transpose", lambda g: _accum(a, g.T))


def softmax(scores, mask=None):
    """Softmax over the last axis, composed from exp/sum/div.

    The max-shift is treated as a constant; softmax is shift invariant so the
    gradient is unaffected. With a 0/1 ``mask`` masked entries get weight 0
    and fully masked rows come back as zeros.
    """
    v = value_of(scores)
    if mask is None:
        shift = np.max(v, axis=-1, keepdims=True)
        e = exp(sub(scores, shift))
        return div(e, reshape(sum(e, axis=-1), shift.shape))
    m = np.asarray(mask, dtype=np.float64)
    shift = np.max(np.where(m > 0, v, -np.inf), axis=-1, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    e = mul(exp(mul(sub(scores, shift), m)), m)
    empty = (m.sum(axis=-1, keepdims=True) == 0).astype(np.float64)
    return div(e, add(reshape(sum(e, axis=-1), shift.shape), empty))


# ---------------------------------------------------------------- parameters


@dataclass
class ParamVector:
    """Flat parameter vector plus a name -> shape registry.

    ``values`` may be a numpy array or, inside
    :func:`evaluate_with_gradients`, a leaf :class:`Var`.
    """

    values: object
    shapes: dict = field(default_factory=dict)

    def __post_init__(self):
        self._slices = {}
        off = 0
        for name, shape in self.shapes.items():
            n = int(np.prod(shape)) if len(shape) else 1
            self._slices[name] = slice(off, off + n)
            off += n
        if off != len(value_of(self.values)):
            raise ValueError(f"registry covers {off} values, vector has "
                             f"{len(value_of(self.values))}")
        self._cache = {}

    @classmethod
    def from_arrays(cls, arrays: dict) -> "ParamVector":
        shapes = {k: tuple(np.shape(v)) for k, v in arrays.items()}
        flat = np.concatenate([np.ravel(np.asarray(v, dtype=np.float64))
                               for v in arrays.values()]) if arrays else np.zeros(0)
        return cls(flat, shapes)

    def __len__(self):
        return len(value_of(self.values))

    def __getitem__(self, name: str):
        if name not in self._cache:
            self._cache[name] = reshape(take(self.values, self._slices[name]),
                                        self.shapes[name])
        return self._cache[name]

    def __contains__(self, name):
        return name in self.shapes

    def slice_of(self, name: str) -> slice:
        return self._slices[name]

    def names(self):
        return list(self.shapes)

    def with_values(self, values) -> "ParamVector":
        return ParamVector(values, dict(self.shapes))

    def array(self, name: str) -> np.ndarray:
        return np.reshape(value_of(self.values)[self._slices[name]], self.shapes[name])

    def set(self, name: str, value) -> None:
        """In-place overwrite of one registered parameter (numpy values only)."""
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != tuple(self.shapes[name]):
            raise ValueError(f"{name}: expected shape {self.shapes[name]}, got {arr.shape}")
        self.values[self._slices[name]] = arr.ravel()
        self._cache.pop(name, None)


@dataclass
class GradientRecord:
    loss: float
    gradient: np.ndarray


def evaluate_with_gradients(f: Callable[[ParamVector], object],
                            x: ParamVector) -> GradientRecord:
    """Run ``f`` on a fresh tape and pull back d f / d x."""
    tape = Tape()
    leaf = Var(np.array(value_of(x.values), dtype=np.float64, copy=True), tape)
    out = f(x.with_values(leaf))
    if not isinstance(out, Var):
        # f ignored its input: constant function
        return GradientRecord(float(out), np.zeros(len(x)))
    if not np.isfinite(out.value).all():
        raise NonFiniteError(out.op, "loss")
    tape.backward(out)
    grad = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
    return GradientRecord(float(out.value), np.array(grad, dtype=np.float64))


def finite_difference_check(f: Callable[[ParamVector], object], x: ParamVector,
                            step: float = 1e-5, coords=None, precision: str = "double",
                            return_details: bool = False):
    """Worst relative error between the tape gradient and central differences.

    The error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    ``coords`` restricts the probe to a subset of indices. With
    ``precision="extended"`` the probes run in ``np.longdouble``, which keeps
    cancellation noise below the tolerance for near-zero gradient entries; the
    analytic side is always float64.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if precision not in ("double", "extended"):
        raise ValueError("precision must be 'double' or 'extended'")
    dtype = np.longdouble if precision == "extended" else np.float64
    rec = evaluate_with_gradients(f, x)
    base = np.array(value_of(x.values), dtype=dtype, copy=True)
    h = dtype(step)
    idx = np.arange(len(base)) if coords is None else np.asarray(coords)
    numeric = np.empty(len(idx))
    for n, i in enumerate(idx):
        probe = base.copy()
        probe[i] = base[i] + h
        fp = dtype(np.asarray(value_of(f(x.with_values(probe)))).reshape(()))
        probe[i] = base[i] - h
        fm = dtype(np.asarray(value_of(f(x.with_values(probe)))).reshape(()))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError("finite_difference_check", f"probe at index {i}")
        numeric[n] = float((fp - fm) / ((base[i] + h) - (base[i] - h)))
    analytic = rec.gradient[idx]
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    worst = float(rel.max()) if len(rel) else 0.0
    if return_details:
        return worst, analytic, numeric
    return worst
