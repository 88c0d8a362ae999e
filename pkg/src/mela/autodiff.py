"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Operations always compute their values eagerly.  While a :class:`Tape` is
active, every operation that touches a watched tensor is appended to it, and
``tape.backward(loss)`` walks the recorded nodes in reverse to produce one
gradient per watched leaf.  Outside a tape the same functions are plain
numpy evaluations, which is what rollouts use.

Also holds the Adam optimizer (decoupled weight decay) used for all training.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError

__all__ = [
    "Tensor", "Tape", "AdamState", "adam_step", "apply", "PRIMITIVES",
    "add", "sub", "mul", "div", "neg", "matmul", "relu", "tanh", "exp", "log",
    "softplus", "square", "sqrt", "norm", "sum", "mean", "softmax", "clip",
    "minimum", "concat", "reshape", "transpose", "take", "detach", "as_tensor",
]

_ACTIVE: list["Tape"] = []


class Tensor:
    """A float64 array plus the bookkeeping needed for differentiation."""

    __slots__ = ("value", "requires_grad", "op", "__weakref__")
    __array_priority__ = 100  # make ``ndarray + Tensor`` defer to Tensor

    def __init__(self, value, requires_grad: bool = False, op: str = "const"):
        v = np.asarray(value, dtype=np.float64)
        if not np.isfinite(v).all():
            raise NumericError(f"non-finite value produced by '{op}'")
        self.value = v
        self.requires_grad = requires_grad
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Tape:
    """Records operations for a single backward pass.

    Use as a context manager; leaves are registered with :meth:`watch`.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.leaves: list[Tensor] = []
        self._consumed = False

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def watch(self, value, name: str = "leaf") -> Tensor:
        t = Tensor(value.value if isinstance(value, Tensor) else value,
                   requires_grad=True, op=name)
        self.leaves.append(t)
        return t

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        if self._consumed:
            raise ContractError("tape already consumed by a backward pass")
        if loss.value.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        for out, inputs, fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, part in zip(inputs, fn(g)):
                if part is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + part
                else:
                    grads[key] = part
        self.nodes.clear()
        return {leaf: grads.get(id(leaf), np.zeros_like(leaf.value)) for leaf in self.leaves}


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def detach(x) -> Tensor:
    return Tensor(as_tensor(x).value)


def _make(value, op: str, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(value, op=op)
    if _ACTIVE and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE[-1].nodes.append((out, tuple(inputs), backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise binary ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _make(a.value + b.value, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _make(a.value - b.value, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _make(a.value * b.value, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape),
                            _unbroadcast(g * a.value, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.value / b.value
    return _make(out, "div", (a, b),
                 lambda g: (_unbroadcast(g / b.value, a.shape),
                            _unbroadcast(-g * a.value / b.value ** 2, b.shape)))


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("minimum", a, b)
    pick_a = a.value <= b.value
    return _make(np.where(pick_a, a.value, b.value), "minimum", (a, b),
                 lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                            _unbroadcast(np.where(pick_a, 0.0, g), b.shape)))


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching; both operands need ndim >= 2."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.value, b.value)
    except ValueError:
        raise ContractError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.value, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.value, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, "matmul", (a, b), backward)


# -- elementwise unary -------------------------------------------------------

def neg(x) -> Tensor:
    x = as_tensor(x)
    return _make(-x.value, "neg", (x,), lambda g: (-g,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.value > 0
    return _make(np.maximum(x.value, 0.0), "relu", (x,), lambda g: (g * mask,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.value)
    return _make(out, "tanh", (x,), lambda g: (g * (1.0 - out * out),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.value)
    return _make(out, "exp", (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.value)
    return _make(out, "log", (x,), lambda g: (g / x.value,))


def softplus(x) -> Tensor:
    """log(1 + e^x), evaluated without overflow."""
    x = as_tensor(x)
    v = x.value
    out = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * v))
    return _make(out, "softplus", (x,), lambda g: (g * sig,))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.value * x.value, "square", (x,), lambda g: (2.0 * g * x.value,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.value)
    return _make(out, "sqrt", (x,),
                 lambda g: (np.where(out > 0, g / (2.0 * np.where(out > 0, out, 1.0)), 0.0),))


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.value >= lo) & (x.value <= hi)
    return _make(np.clip(x.value, lo, hi), "clip", (x,), lambda g: (g * inside,))


# -- reductions and structure ------------------------------------------------

def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    return _make(np.sum(x.value, axis=axis, keepdims=keepdims), "sum", (x,),
                 lambda g: (_expand(g, x.shape, axis, keepdims),))


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return _make(np.mean(x.value, axis=axis, keepdims=keepdims), "mean", (x,),
                 lambda g: (_expand(g, x.shape, axis, keepdims) / n,))


def norm(x, axis=-1) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at a zero vector is taken as 0."""
    x = as_tensor(x)
    n = np.sqrt(np.sum(x.value * x.value, axis=axis))

    def backward(g):
        safe = np.expand_dims(np.where(n > 0, n, 1.0), axis)
        scale = np.expand_dims(np.where(n > 0, g, 0.0), axis)
        return (scale * x.value / safe,)

    return _make(n, "norm", (x,), backward)


def softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    z = x.value - np.max(x.value, axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / np.sum(e, axis=axis, keepdims=True)
    return _make(s, "softmax", (x,),
                 lambda g: (s * (g - np.sum(g * s, axis=axis, keepdims=True)),))


def concat(xs: Iterable, axis=-1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError as e:
        raise ContractError(f"concat: {e}") from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(out, "concat", xs, lambda g: tuple(np.split(g, bounds, axis=axis)))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.value.reshape(shape)
    except ValueError as e:
        raise ContractError(f"reshape: {e}") from None
    return _make(out, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.value, axes), "transpose", (x,),
                 lambda g: (np.transpose(g, inverse),))


def take(x, indices, axis=-1) -> Tensor:
    """Select entries along ``axis`` (indices must be unique)."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    if len(np.unique(idx)) != len(idx):
        raise ContractError("take: indices must be unique")

    def backward(g):
        full = np.zeros_like(x.value)
        sl = [slice(None)] * x.ndim
        sl[axis] = idx
        full[tuple(sl)] = g
        return (full,)

    return _make(np.take(x.value, idx, axis=axis), "take", (x,), backward)


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg,
    "matmul": matmul, "minimum": minimum, "relu": relu, "tanh": tanh,
    "exp": exp, "log": log, "softplus": softplus, "square": square, "sqrt": sqrt,
    "clip": clip, "sum": sum, "mean": mean, "norm": norm, "softmax": softmax,
    "concat": concat, "reshape": reshape, "transpose": transpose, "take": take,
}


def apply(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ContractError(f"unknown primitive {kind!r}") from None
    if kind == "concat":
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)


# -- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 3e-4
    weight_decay: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> dict[str, np.ndarray]:
    """One Adam update with decoupled weight decay; returns new arrays."""
    if state.lr <= 0:
        raise ContractError("learning rate must be positive")
    if params.keys() != grads.keys():
        raise ContractError("params and grads have different keys")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ContractError(f"adam: grad shape {g.shape} != param shape {p.shape} for {k}")
        m = state.m.get(k)
        if m is None:
            m = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        elif m.shape != p.shape:
            raise ContractError(f"adam: accumulator shape mismatch for {k}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        state.m[k], state.v[k] = m, v
        decayed = p - state.lr * state.weight_decay * p
        out[k] = decayed - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out
