"""Dense float32 tensors, a recording tape for reverse-mode gradients, and Adam.

Every operation that touches a tensor with ``requires_grad`` appends a record
to the active :class:`Tape`. :func:`backward` walks that tape once in reverse
and then clears it, so each forward pass owns its tape.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32
_precision = [DTYPE]


def current_dtype():
    return _precision[-1]


@contextlib.contextmanager
def precision(dtype):
    """Build and compute new tensors in ``dtype``; used by the float64 gradient check."""
    _precision.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _precision.pop()


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractViolation(ValueError):
    """A precondition of an operation was not met."""


class NumericError(ArithmeticError):
    """A NaN or Inf appeared where only finite values are allowed."""


class UnreliableCheckError(RuntimeError):
    """The function under a gradient check is not deterministic."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_is_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=_precision[-1])
        if not np.isfinite(arr).all():
            raise NumericError(f"non-finite value in tensor {name or '<unnamed>'} of shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._is_node = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __radd__ = lambda self, other: add(other, self)  # noqa: E731
    __sub__ = lambda self, other: sub(self, other)  # noqa: E731
    __rsub__ = lambda self, other: sub(other, self)  # noqa: E731
    __mul__ = lambda self, other: mul(self, other)  # noqa: E731
    __rmul__ = lambda self, other: mul(other, self)  # noqa: E731
    __matmul__ = lambda self, other: matmul(self, other)  # noqa: E731
    __neg__ = lambda self: mul(self, -1.0)  # noqa: E731


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered log of executed operations; inputs always precede their consumers."""

    def __init__(self) -> None:
        self.records: list[_Record] = []

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()


_tape = Tape()
_grad_enabled = True


def active_tape() -> Tape:
    return _tape


@contextlib.contextmanager
def no_grad():
    """Run operations without recording them."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._is_node = True
        _tape.records.append(_Record(out, inputs, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``, then clear the tape."""
    if loss.data.ndim != 0:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    try:
        if not loss.requires_grad:
            return
        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
        for rec in reversed(_tape.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            for t, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                gi = np.asarray(gi, dtype=t.data.dtype)
                if t._is_node:
                    key = id(t)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
                elif t.grad is None:
                    t.grad = gi.copy()
                else:
                    t.grad += gi
    finally:
        _tape.clear()


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)
    return _result(y, (x,), lambda g: (g * (y > 0),))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1 / (1 + z), z / (1 + z)).astype(x.data.dtype)
    return _result(y, (x,), lambda g: (g * y * (1 - y),))


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape, dtype=np.float32) >= rate) * x.data.dtype.type(1.0 / (1.0 - rate))
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------- shape / reduction

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # one flat GEMM instead of a broadcast batch of small ones
        a2 = a.data.reshape(-1, a.shape[-1])

        def flat_grad(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return _result((a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],)), (a, b), flat_grad)

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(np.matmul(a.data, b.data), (a, b), grad_fn)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), grad_fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def weighted_sum(x: Tensor, coeffs: np.ndarray) -> Tensor:
    """Scalar sum(x * coeffs) with constant coefficients."""
    c = np.asarray(coeffs, dtype=x.data.dtype)
    if c.shape != x.shape:
        raise ShapeError(f"weighted_sum shapes differ: {x.shape} vs {c.shape}")
    return _result(np.sum(x.data * c), (x,), lambda g: (g * c,))


def reshape(x: Tensor, shape) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    inverse = np.argsort(axes)
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def take_rows(x: Tensor, index) -> Tensor:
    """Gather rows ``x[index]`` of a 2-D tensor."""
    idx = np.asarray(index, dtype=np.int64)

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _result(x.data[idx], (x,), grad_fn)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractViolation(f"embedding id out of range [0, {table.shape[0]})")

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _result(table.data[ids], (table,), grad_fn)


# ---------------------------------------------------------------- normalisation

def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis. ``mask`` (broadcastable bool) marks entries to exclude."""
    if np.isnan(x.data).any():
        raise NumericError("NaN input to softmax_rows")
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if mask.all(axis=-1).any():
            raise ContractViolation("softmax row with every entry masked")
        z = np.where(mask, -np.inf, z)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    y = (e / e.sum(axis=-1, keepdims=True)).astype(x.data.dtype)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), grad_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine shape {gain.shape}/{bias.shape} does not match last axis {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def grad_fn(g):
        gh = g * gain.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gain.data + bias.data, (x, gain, bias), grad_fn)


# ---------------------------------------------------------------- losses

def cross_entropy_rows(logits: Tensor, weights: np.ndarray) -> Tensor:
    """Per-row ``-sum_c w_c log softmax(logits)_c``; returns a vector of row losses."""
    w = np.asarray(weights, dtype=logits.data.dtype)
    if w.shape != logits.shape or logits.ndim != 2:
        raise ShapeError(f"cross-entropy shapes differ: logits {logits.shape}, weights {w.shape}")
    if (w < 0).any():
        raise ContractViolation("negative target weight")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    p = np.exp(logp)
    wsum = w.sum(axis=1, keepdims=True)

    def grad_fn(g):
        return (g[:, None] * (p * wsum - w),)

    return _result(-(w * logp).sum(axis=1), (logits,), grad_fn)


def weighted_cross_entropy(logits: Tensor, target_weights: np.ndarray) -> Tensor:
    """Mean over unmasked rows of the soft-target cross-entropy.

    Rows of ``target_weights`` must sum to 1, or be all zero to drop the row.
    """
    w = np.asarray(target_weights, dtype=logits.data.dtype)
    sums = w.sum(axis=1)
    live = sums > 0
    if not np.allclose(sums[live], 1.0, atol=1e-5):
        raise ContractViolation("target weight rows must sum to 1 or be all zero")
    rows = cross_entropy_rows(logits, w)
    n = int(live.sum())
    if n == 0:
        return Tensor(0.0)
    return weighted_sum(rows, live / n)


BCE_CLAMP = 1e-7


def binary_cross_entropy(probs: Tensor, labels, mask) -> Tensor:
    """Mean BCE over positions where ``mask`` is 1; zero when the mask is empty."""
    m = np.asarray(mask, dtype=probs.data.dtype)
    if m.shape != probs.shape:
        raise ShapeError(f"BCE shapes differ: probs {probs.shape}, mask {m.shape}")
    if not np.isin(m, (0.0, 1.0)).all():
        raise ContractViolation("BCE mask must be 0 or 1")
    n = m.sum()
    if n == 0:
        return Tensor(0.0)
    return bce_sum(probs, labels, m / n)


def bce_sum(probs: Tensor, labels, weights) -> Tensor:
    """``sum_i w_i * -[y_i log p_i + (1 - y_i) log(1 - p_i)]`` with p clamped to [1e-7, 1 - 1e-7]."""
    y = np.asarray(labels, dtype=probs.data.dtype)
    w = np.asarray(weights, dtype=probs.data.dtype)
    if y.shape != probs.shape or w.shape != probs.shape:
        raise ShapeError(f"BCE shapes differ: probs {probs.shape}, labels {y.shape}, weights {w.shape}")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ContractViolation("BCE labels must be 0 or 1")
    if (w < 0).any():
        raise ContractViolation("negative BCE weight")
    lo, hi = probs.data.dtype.type(BCE_CLAMP), probs.data.dtype.type(1 - BCE_CLAMP)
    p = np.clip(probs.data, lo, hi)
    inside = (probs.data >= lo) & (probs.data <= hi)
    terms = -(y * np.log(p) + (1 - y) * np.log(1 - p))

    def grad_fn(g):
        return (g * w * inside * (p - y) / (p * (1 - p)),)

    return _result(np.sum(terms * w), (probs,), grad_fn)


# ---------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Iterable[Tensor], **hyper) -> "AdamState":
        params = list(params)
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params], **hyper)


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update; gradients are zeroed afterwards."""
    if len(params) != len(state.m):
        raise ContractViolation(f"Adam state tracks {len(state.m)} tensors, got {len(params)}")
    for p in params:
        if p.grad is None:
            raise ContractViolation(f"parameter {p.name or '?'} has no gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)
        if not np.isfinite(p.data).all():
            raise NumericError(f"parameter {p.name or '?'} became non-finite at step {state.step}")
        g[...] = 0


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------- gradient check

def grad_check_finite_diff(f: Callable[[Tensor], Tensor], x: Tensor, epsilon: float = 1e-3) -> float:
    """Max relative error between the taped gradient of ``f`` at ``x`` and central differences.

    Per coordinate the error is ``|a - fd| / (|a| + |fd| + 1e-8)``.
    """
    with no_grad():
        f0 = float(f(x).data)
        if float(f(x).data) != f0:
            raise UnreliableCheckError("f returned different values for the same input")

    saved_flag, saved_grad = x.requires_grad, x.grad
    x.requires_grad, x.grad = True, None
    _tape.clear()
    out = f(x)
    if out.data.ndim != 0:
        raise ContractViolation("grad check needs a scalar-valued function")
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.requires_grad, x.grad = saved_flag, saved_grad

    flat = x.data.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi_step = float(flat[i]) - float(orig)
            f_hi = float(f(x).data)
            flat[i] = orig - epsilon
            lo_step = float(orig) - float(flat[i])
            f_lo = float(f(x).data)
            flat[i] = orig
            fd = (f_hi - f_lo) / (hi_step + lo_step)
            a = float(analytic.reshape(-1)[i])
            worst = max(worst, abs(a - fd) / (abs(a) + abs(fd) + 1e-8))
    return worst
