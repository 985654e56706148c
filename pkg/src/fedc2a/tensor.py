"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed inside an active :class:`Tape` whose inputs require
gradients are recorded in execution order; :meth:`Tape.backward` replays
them in reverse.  Outside a tape every op is a plain numpy computation,
which is how evaluation and inference run.

    >>> w = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w * w).sum()
    >>> tape.backward(loss)
    >>> w.grad
    array([2., 4.])
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DegenerateInputError, DimensionError, PoisonedGradientError

EPS_NORM = 1e-12
LN_EPS = 1e-5

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class _ZeroNormCounter:
    def __init__(self):
        self._lock = threading.Lock()
        self.count = 0

    def bump(self, n: int = 1):
        with self._lock:
            self.count += n


_zero_norm = _ZeroNormCounter()


def zero_norm_events() -> int:
    """Number of normalize() calls that hit a zero-norm input so far."""
    return _zero_norm.count


def reset_zero_norm_events() -> None:
    with _zero_norm._lock:
        _zero_norm.count = 0


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if any(n <= 0 for n in arr.shape):
            raise DimensionError(f"tensor extents must be positive, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops run inside it are appended in execution
    order, so the record is already topologically sorted.  A tape can be
    backpropagated exactly once.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward_fn: Callable) -> None:
        self.nodes.append((out, parents, backward_fn))

    def backward(self, loss: Tensor, retain_intermediate: bool = False) -> None:
        if self.consumed:
            raise ContractError("backward() already ran on this tape; start a new tape")
        if loss.data.size != 1:
            raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
        if not self.nodes or not any(out is loss for out, _, _ in self.nodes[::-1]):
            raise ContractError("loss was not produced on this tape")
        self.consumed = True
        loss.grad = np.ones_like(loss.data)
        for out, parents, fn in reversed(self.nodes):
            g = out.grad
            if g is None:
                continue
            grads = fn(g)
            for p, pg in zip(parents, grads):
                if pg is None or not p.requires_grad:
                    continue
                p.grad = pg if p.grad is None else p.grad + pg
            if not retain_intermediate and out is not loss:
                out.grad = None


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out = Tensor._wrap(data, requires_grad=True)
        tape.record(out, parents, backward_fn)
        return out
    return Tensor._wrap(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def back(g):
        return (
            _unbroadcast(g, sa) if a.requires_grad else None,
            _unbroadcast(g, sb) if b.requires_grad else None,
        )

    return _result(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def back(g):
        return (
            _unbroadcast(g, sa) if a.requires_grad else None,
            _unbroadcast(-g, sb) if b.requires_grad else None,
        )

    return _result(a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data

    def back(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _result(ad * bd, (a, b), back)


def gelu(x: Tensor) -> Tensor:
    """Exact GeLU, 0.5 * x * (1 + erf(x / sqrt(2)))."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))

    def back(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _result(xd * cdf, (x,), back)


# -- shape ---------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return _result(out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def gather_rows(table: Tensor, index) -> Tensor:
    """``table[index]`` along axis 0; gradient scatters back with accumulation."""
    idx = np.asarray(index, dtype=np.int64)
    n = table.shape[0]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise IndexError(f"row index out of range for table of {n} rows")
    tshape = table.shape

    def back(g):
        full = np.zeros(tshape)
        np.add.at(full, idx, g)
        return (full,)

    return _result(table.data[idx], (table,), back)


# -- reductions ----------------------------------------------------------


def tsum(x: Tensor, axis=None) -> Tensor:
    src = x.shape

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis)), (x,), back)


def tmean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis), 1.0 / n)


def pool(x: Tensor, axis: int, mode: str = "mean") -> Tensor:
    """Reduce ``axis`` by mean or max.  Max routes gradient to the first argmax."""
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"pool axis {axis} invalid for shape {x.shape}")
    if x.shape[axis] < 1:
        raise DegenerateInputError("cannot pool over an empty axis")
    if mode == "mean":
        return tmean(x, axis)
    if mode != "max":
        raise ValueError(f"unknown pool mode {mode!r}")
    xd = x.data
    arg = np.expand_dims(np.argmax(xd, axis=axis), axis)
    out = np.take_along_axis(xd, arg, axis=axis).squeeze(axis)

    def back(g):
        full = np.zeros_like(xd)
        np.put_along_axis(full, arg, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _result(out, (x,), back)


# -- linear algebra ------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, ad.shape),
            None if gb is None else _unbroadcast(gb, bd.shape),
        )

    return _result(ad @ bd, (a, b), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1]
    if d < 2:
        raise DegenerateInputError(f"layer_norm needs at least 2 features, got {d}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}, {bias.shape} vs last axis {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def back(g):
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return (
            dx,
            (g * xhat).sum(axis=lead) if gain.requires_grad else None,
            g.sum(axis=lead) if bias.requires_grad else None,
        )

    return _result(xhat * gd + bias.data, (x, gain, bias), back)


def normalize(x: Tensor, mode: str = "l2_vector") -> Tensor:
    """Scale to unit norm.

    ``l2_vector`` normalizes every vector along the last axis independently;
    ``frobenius_matrix`` normalizes the whole tensor.  Inputs whose norm is
    at most ``EPS_NORM`` pass through unchanged and are counted via
    :func:`zero_norm_events`.
    """
    xd = x.data
    if mode == "l2_vector":
        norm = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    elif mode == "frobenius_matrix":
        norm = np.sqrt((xd * xd).sum()).reshape((1,) * xd.ndim)
    else:
        raise ValueError(f"unknown normalize mode {mode!r}")
    small = norm <= EPS_NORM
    n_small = int(small.sum())
    if n_small:
        _zero_norm.bump(n_small)
    safe = np.where(small, 1.0, norm)
    out = xd / safe

    def back(g):
        if mode == "l2_vector":
            dot = (g * out).sum(axis=-1, keepdims=True)
        else:
            dot = (g * out).sum()
        gx = (g - out * dot) / safe
        if n_small:
            gx = np.where(small, g, gx)
        return (gx,)

    return _result(out, (x,), back)


def softmax(x: Tensor) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    return _result(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    if logits.ndim != 2:
        raise DimensionError(f"logits must be B x C, got {logits.shape}")
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    B, C = logits.shape
    if y.shape[0] != B:
        raise DimensionError(f"{y.shape[0]} labels for {B} logit rows")
    if y.size and (y.min() < 0 or y.max() >= C):
        raise IndexError(f"label out of range for {C} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(B)
    loss = float((logsum - z[rows, y]).mean())

    def back(g):
        p = np.exp(z - logsum[:, None])
        p[rows, y] -= 1.0
        return (p * (float(g) / B),)

    return _result(np.asarray(loss), (logits,), back)


# -- optimizer -----------------------------------------------------------


@dataclass
class AdamWState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")


def adamw_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray | None],
    state: AdamWState,
) -> None:
    """One AdamW update in place; weight decay is decoupled from the moments."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise PoisonedGradientError(f"non-finite gradient for {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data = p.data * (1.0 - state.lr * state.weight_decay) - state.lr * (m / c1) / (
            np.sqrt(v / c2) + state.eps
        )


class AdamW:
    """Convenience wrapper pulling gradients off the parameter tensors."""

    def __init__(self, params: Mapping[str, Tensor], **hyper):
        self.params = dict(params)
        self.state = AdamWState(**hyper)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        adamw_step(self.params, {k: p.grad for k, p in self.params.items()}, self.state)
