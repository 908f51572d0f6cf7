"""Dense f64 tensors with tape-based reverse-mode differentiation.

Every primitive works on whole arrays and supports optional leading batch
axes; "rows" always means the last axis. Operations are recorded only while a
:class:`Tape` is active (``with tape: ...``), so plain forward passes cost
nothing extra.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf from finite inputs."""


class Tensor:
    """Immutable-by-convention wrapper around a float64 ndarray."""

    __slots__ = ("data",)

    def __init__(self, data):
        self.data = np.asarray(data, dtype=DTYPE)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    # operator sugar, all routed through the recorded primitives
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter:
    """A learnable tensor plus its accumulated gradient."""

    def __init__(self, value, name: str):
        self.name = name
        self.value = value if isinstance(value, Tensor) else Tensor(value)
        self.grad = Tensor(np.zeros(self.value.shape))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.data.size)

    def zero_grad(self) -> None:
        self.grad = Tensor(np.zeros(self.value.shape))

    def assign(self, data) -> None:
        data = np.array(data, dtype=DTYPE)
        if data.shape != self.value.shape:
            raise ShapeError(f"{self.name}: cannot assign shape {data.shape} to {self.value.shape}")
        self.value = Tensor(data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class Tape:
    """Ordered record of primitive applications.

    Each entry holds the output tensor, the input tensors, and a function that
    maps the output adjoint to one adjoint per input (``None`` for inputs that
    receive no gradient).
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.records: list[tuple[Tensor, tuple, Callable]] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()

    @classmethod
    def active(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Parameter):
        return x.value
    return Tensor(x)


def _record(out: Tensor, inputs: tuple, vjp: Callable) -> Tensor:
    tape = Tape.active()
    if tape is not None:
        tape.records.append((out, inputs, vjp))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


# ---------------------------------------------------------------- primitives


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes (leading axes broadcast)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), vjp)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = _as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose needs at least 2 axes, got {a.shape}")
    out = Tensor(np.swapaxes(a.data, -1, -2))
    return _record(out, (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    """Element-wise product with numpy broadcasting (scalars, row vectors)."""
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), vjp)


def scale(a, c: float) -> Tensor:
    """Multiply by a constant (not differentiated with respect to ``c``)."""
    a = _as_tensor(a)
    c = float(c)
    out = Tensor(a.data * c)
    return _record(out, (a,), lambda g: (g * c,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    out = Tensor(_check_finite(y, "exp"))
    return _record(out, (a,), lambda g: (g * y,))


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.sum(a.data))
    return _record(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    out = Tensor(np.mean(a.data))
    return _record(out, (a,), lambda g: (np.full(a.shape, g / n),))


def dot(a, b) -> Tensor:
    """Inner product of two equal-length vectors, returned as a 0-d tensor."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"dot: need equal 1-d shapes, got {a.shape} and {b.shape}")
    out = Tensor(np.dot(a.data, b.data))
    return _record(out, (a, b), lambda g: (g * b.data, g * a.data))


def mean_last(a) -> Tensor:
    """Mean over the last axis (channel pooling)."""
    a = _as_tensor(a)
    n = a.shape[-1]
    out = Tensor(a.data.mean(axis=-1))
    return _record(out, (a,), lambda g: (np.repeat(g[..., None] / n, n, axis=-1),))


def concat_last(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat: leading shapes differ, {a.shape} vs {b.shape}")
    k = a.shape[-1]
    out = Tensor(np.concatenate([a.data, b.data], axis=-1))
    return _record(out, (a, b), lambda g: (g[..., :k], g[..., k:]))


def detach(a) -> Tensor:
    """Same values, but no gradient flows back through the result."""
    return Tensor(_as_tensor(a).data)


def softmax_rows(t) -> Tensor:
    """Softmax along the last axis with row-max subtraction."""
    t = _as_tensor(t)
    y = t.data - t.data.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def vjp(g):
        gx = g - np.einsum("...ij,...ij->...i", g, y)[..., None]
        gx *= y
        return (gx,)

    return _record(out, (t,), vjp)


def layer_norm(t, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Per-row standardization with population variance, then affine."""
    if eps <= 0:
        raise ValueError(f"layer_norm: eps must be > 0, got {eps}")
    t, gamma, beta = _as_tensor(t), _as_tensor(gamma), _as_tensor(beta)
    n = t.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm: gamma/beta must be ({n},), got {gamma.shape}, {beta.shape}")
    mu = t.data.mean(axis=-1, keepdims=True)
    xc = t.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def vjp(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _record(out, (t, gamma, beta), vjp)


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    out = Tensor(x * cdf)
    return _record(out, (a,), lambda g: (g * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    y = _stable_sigmoid(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * y * (1.0 - y),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def bce_with_logits(logits, target) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against ``target``.

    Computed as ``max(z,0) - z*y + log1p(exp(-|z|))`` so large logits stay finite.
    """
    logits, target = _as_tensor(logits), _as_tensor(target)
    if logits.shape != target.shape:
        raise ShapeError(f"bce: logits {logits.shape} vs target {target.shape}")
    z, y = logits.data, target.data
    n = z.size
    out = Tensor(np.mean(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))))
    return _record(out, (logits, target), lambda g: (g * (_stable_sigmoid(z) - y) / n, None))


def dropout(t, p: float, mode: str, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: active only when ``mode == "train"``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must lie in [0, 1), got {p}")
    if mode not in ("train", "eval"):
        raise ValueError(f"dropout: mode must be 'train' or 'eval', got {mode!r}")
    t = _as_tensor(t)
    if mode == "eval" or p == 0.0:
        return t
    if rng is None:
        raise ValueError("dropout in train mode needs a seeded generator")
    keep = (rng.random(t.shape) >= p) / (1.0 - p)
    out = Tensor(t.data * keep)
    return _record(out, (t,), lambda g: (g * keep,))


# ------------------------------------------------------------ differentiation


def backward(loss: Tensor, tape: Tape, params: Iterable[Parameter]) -> None:
    """Accumulate d(loss)/d(param) into every ``param.grad``.

    Adjoints are propagated through the tape in exact reverse recording order.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    adj = _adjoints(loss, tape)
    for p in params:
        g = adj.get(id(p.value))
        if g is not None:
            p.grad = Tensor(p.grad.data + g)


def _adjoints(loss: Tensor, tape: Tape) -> dict[int, np.ndarray]:
    adj: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for out, inputs, vjp in reversed(tape.records):
        g = adj.get(id(out))
        if g is None:
            continue
        for x, gx in zip(inputs, vjp(g)):
            if gx is None:
                continue
            key = id(x)
            prev = adj.get(key)
            adj[key] = gx if prev is None else prev + gx
    return adj


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def finite_diff_errors(f: Callable[[], Tensor], params: Sequence[Parameter],
                       h: float = 1e-5) -> dict[str, float]:
    """Max relative error between analytic and central-difference gradients, per parameter.

    ``f`` must read the current parameter values and be deterministic.
    The error of one element is ``|analytic - numeric| / (|numeric| + 1e-8)``.
    """
    if h <= 0:
        raise ValueError("h must be > 0")
    params = list(params)
    zero_grads(params)
    with Tape() as tape:
        loss = f()
    backward(loss, tape, params)
    errors: dict[str, float] = {}
    for p in params:
        base = p.value.data.copy()
        analytic = p.grad.data.reshape(-1)
        worst = 0.0
        for i in range(base.size):
            bumped = base.copy().reshape(-1)
            bumped[i] = base.reshape(-1)[i] + h
            p.value = Tensor(bumped.reshape(base.shape))
            f_plus = f().item()
            bumped[i] = base.reshape(-1)[i] - h
            p.value = Tensor(bumped.reshape(base.shape))
            f_minus = f().item()
            numeric = (f_plus - f_minus) / (2.0 * h)
            worst = max(worst, float(abs(analytic[i] - numeric) / (abs(numeric) + 1e-8)))
        p.value = Tensor(base)
        errors[p.name] = worst
    zero_grads(params)
    return errors


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Parameter],
                      h: float = 1e-5) -> float:
    """Worst relative gradient error over every element of every parameter."""
    errors = finite_diff_errors(f, params, h)
    return max(errors.values(), default=0.0)
