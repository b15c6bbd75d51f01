"""Dense-tensor engine with tape-based reverse-mode differentiation.

Tensors wrap row-major numpy arrays (float64 by default, float32 allowed for
training speed). Each operation that touches a gradient-requiring input
records its inputs and a backward rule; ``Tensor.backward`` replays the
recorded operations in reverse order to accumulate leaf gradients.

Complex arithmetic never crosses this API: state-space kernels and the FFT
convolution handle (re, im) pairs internally and return real tensors.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit as _expit

# When enabled, every forward op asserts its output is finite. Tests switch
# this on; training leaves it off and checks losses/steps instead.
CHECK_FINITE = False

# Cleared inside no_grad(): ops run value-only and record nothing.
GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class ContractError(ValueError):
    """An operation was called outside its contract (non-shape)."""


class NumericError(ArithmeticError):
    """A forward value or gradient became NaN/Inf."""


def _as_array(value, dtype=None) -> np.ndarray:
    arr = np.asarray(value, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """N-dimensional real array, optionally tracked for differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._bwd: Callable[[np.ndarray], None] | None = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
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
        """Copy of the underlying values, detached from the tape."""
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})\n{self.data!r}"

    # -- gradient plumbing ---------------------------------------------

    def _accum(self, grad: np.ndarray, owned: bool = False) -> None:
        """Accumulate a gradient. ``owned`` marks a freshly allocated array the
        caller will not reuse, letting us adopt it without a defensive copy."""
        if self.grad is None:
            if owned and grad.dtype == self.data.dtype and grad.shape == self.data.shape:
                self.grad = grad
            else:
                self.grad = np.broadcast_to(grad, self.data.shape).astype(self.data.dtype)
        else:
            self.grad += grad

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``grad`` on every gradient-requiring ancestor."""
        Tape.trace(self).backward(self, grad)

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        if isinstance(other, (int, float)):
            return add(neg(self), other)
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
        return take(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def transpose(self, axes=None):
        return transpose(self, axes)

    def swap_last2(self):
        return swap_last2(self)


def as_tensor(value, dtype=None) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value, dtype=dtype)


class TapeOp:
    """One recorded operation: output, its inputs, and a backward rule."""

    __slots__ = ("out", "parents", "bwd")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], bwd):
        self.out = out
        self.parents = parents
        self.bwd = bwd


class Tape:
    """Ordered operation record for one computation graph.

    Replaying backward rules in reverse recorded order visits every node
    after all its consumers, so each gradient-requiring leaf receives its
    full gradient exactly once.
    """

    def __init__(self, ops: list[TapeOp]):
        self.ops = ops

    @staticmethod
    def trace(root: Tensor) -> "Tape":
        """Collect the recorded ops reachable from ``root``, oldest first."""
        order: list[TapeOp] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                if node._bwd is not None:
                    order.append(TapeOp(node, node._parents, node._bwd))
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return Tape(order)

    def backward(self, root: Tensor, grad: np.ndarray | None = None) -> None:
        if grad is None:
            grad = np.ones_like(root.data)
        else:
            grad = np.asarray(grad, dtype=root.data.dtype)
            if grad.shape != root.data.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} != {root.data.shape}")
        root._accum(grad)
        for op in reversed(self.ops):
            if op.out.grad is not None:
                op.bwd(op.out.grad)


class no_grad:
    """Context manager: run ops value-only, without recording backward rules."""

    def __enter__(self):
        global GRAD_ENABLED
        self._prev = GRAD_ENABLED
        GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global GRAD_ENABLED
        GRAD_ENABLED = self._prev
        return False


def _record(out_data: np.ndarray, parents: Sequence[Tensor], bwd) -> Tensor:
    """Wrap an op result, attaching the backward rule if anything needs it."""
    if CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise NumericError("non-finite value produced by forward operation")
    out = Tensor(out_data)
    if GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._bwd = bwd
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- arithmetic ---------------------------------------------------------

# Python scalars take a dedicated path: wrapping them in float64 tensors
# would silently promote float32 graphs (and their gradients) to float64.


def add(a, b) -> Tensor:
    if isinstance(b, (int, float)) and isinstance(a, Tensor):
        def bwd_scalar(g):
            a._accum(g, owned=True)  # g is dead after this op's backward
        return _record(a.data + b, (a,), bwd_scalar)
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def bwd(g):
        # b first: if it shares the buffer it takes a copy, then a may
        # adopt g outright (nothing reads an output grad after its bwd)
        if b.requires_grad:
            red = _unbroadcast(g, b.shape)
            b._accum(red, owned=red is not g)
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape), owned=True)

    return _record(out_data, (a, b), bwd)


def sub(a, b) -> Tensor:
    if isinstance(b, (int, float)) and isinstance(a, Tensor):
        def bwd_scalar(g):
            a._accum(g, owned=True)
        return _record(a.data - b, (a,), bwd_scalar)
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            red = _unbroadcast(g, a.shape)
            a._accum(red, owned=red is not g)
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape), owned=True)

    return _record(out_data, (a, b), bwd)


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)) and isinstance(a, Tensor):
        def bwd_scalar(g):
            a._accum(g * b, owned=True)
        return _record(a.data * b, (a,), bwd_scalar)
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape), owned=True)
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape), owned=True)

    return _record(out_data, (a, b), bwd)


def div(a, b) -> Tensor:
    if isinstance(b, (int, float)) and isinstance(a, Tensor):
        def bwd_scalar(g):
            a._accum(g / b, owned=True)
        return _record(a.data / b, (a,), bwd_scalar)
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.shape), owned=True)
        if b.requires_grad:
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.shape), owned=True)

    return _record(out_data, (a, b), bwd)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        a._accum(-g, owned=True)

    return _record(-a.data, (a,), bwd)


def power_scalar(a, p: float) -> Tensor:
    """Elementwise x**p for a constant real exponent."""
    a = as_tensor(a)
    out_data = a.data ** p

    def bwd(g):
        a._accum(g * p * a.data ** (p - 1.0), owned=True)

    return _record(out_data, (a,), bwd)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def bwd(g):
        a._accum(g * out_data, owned=True)

    return _record(out_data, (a,), bwd)


def log(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        a._accum(g / a.data, owned=True)

    return _record(np.log(a.data), (a,), bwd)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def bwd(g):
        a._accum(g * 0.5 / out_data, owned=True)

    return _record(out_data, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out_data = _expit(a.data)  # stable for any finite input

    def bwd(g):
        a._accum(g * out_data * (1.0 - out_data), owned=True)

    return _record(out_data, (a,), bwd)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def bwd(g):
        a._accum(g * (1.0 - out_data * out_data), owned=True)

    return _record(out_data, (a,), bwd)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def bwd(g):
        a._accum(g * (a.data > 0.0), owned=True)

    return _record(out_data, (a,), bwd)


# -- linear algebra and shape -------------------------------------------


def _flat_matmul(lhs: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """(..., m, k) @ (k, n) as a single 2-D GEMM."""
    lead = lhs.shape[:-1]
    return (lhs.reshape(-1, lhs.shape[-1]) @ rhs).reshape(lead + (rhs.shape[1],))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul requires at least 1-D operands")
    # stacked-lhs x plain-matrix is the hot path; one GEMM beats a batch loop
    flat = a.ndim > 2 and b.ndim == 2
    out_data = _flat_matmul(a.data, b.data) if flat else a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            if b.ndim == 1:
                ga = np.expand_dims(g, -1) * b.data
            elif flat:
                ga = _flat_matmul(g, b.data.T)
            else:
                ga = g @ np.swapaxes(b.data, -1, -2)
            a._accum(_unbroadcast(ga, a.shape), owned=True)
        if b.requires_grad:
            if a.ndim == 1:
                gb = np.expand_dims(a.data, -1) * np.expand_dims(g, -2)
            elif flat:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
            b._accum(_unbroadcast(gb, b.shape), owned=True)

    return _record(out_data, (a, b), bwd)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old_shape = a.shape

    def bwd(g):
        a._accum(g.reshape(old_shape), owned=True)

    return _record(a.data.reshape(shape), (a,), bwd)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes_t = tuple(axes) if axes is not None else tuple(range(a.ndim))[::-1]
    inverse = np.argsort(axes_t)

    def bwd(g):
        a._accum(g.transpose(inverse), owned=True)

    return _record(a.data.transpose(axes_t), (a,), bwd)


def swap_last2(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeError("swap_last2 requires ndim >= 2")

    def bwd(g):
        a._accum(np.swapaxes(g, -1, -2), owned=True)

    return _record(np.swapaxes(a.data, -1, -2), (a,), bwd)


def flip_axis(a, axis: int) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        a._accum(np.flip(g, axis=axis), owned=True)

    return _record(np.flip(a.data, axis=axis), (a,), bwd)


def _is_basic_key(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(p, (slice, int, type(Ellipsis), type(None))) for p in parts)


def take(a, key) -> Tensor:
    """Indexing with scatter backward. Basic (slice/int) keys hit every
    position at most once, so the gradient is a plain assignment; fancy
    keys fall back to the accumulating scatter."""
    a = as_tensor(a)
    out_data = a.data[key]
    basic = _is_basic_key(key)

    def bwd(g):
        full = np.zeros_like(a.data)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        a._accum(full, owned=True)

    return _record(np.array(out_data, copy=True), (a,), bwd)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ContractError("concat of an empty sequence")
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if part.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                part._accum(g[tuple(idx)])

    return _record(out_data, tuple(parts), bwd)


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ContractError("stack of an empty sequence")
    out_data = np.stack([p.data for p in parts], axis=axis)

    def bwd(g):
        slabs = np.moveaxis(g, axis, 0)
        for part, slab in zip(parts, slabs):
            if part.requires_grad:
                part._accum(slab)

    return _record(out_data, tuple(parts), bwd)


# -- reductions -----------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            a._accum(np.broadcast_to(g, a.shape).copy() if np.ndim(g) else np.full(a.shape, g, dtype=a.dtype), owned=True)
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accum(np.broadcast_to(gg, a.shape).copy(), owned=True)

    return _record(out_data, (a,), bwd)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])

    def bwd(g):
        if axis is None:
            a._accum(np.full(a.shape, g / count, dtype=a.dtype), owned=True)
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accum(np.broadcast_to(gg / count, a.shape).copy(), owned=True)

    return _record(out_data, (a,), bwd)


def tmax(a, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; ties share the gradient equally (deterministic)."""
    a = as_tensor(a)
    out_data = a.data.max(axis=axis, keepdims=keepdims)

    def bwd(g):
        full = out_data if (keepdims or axis is None) else np.expand_dims(out_data, axis)
        mask = (a.data == full).astype(a.dtype.type)
        mask /= mask.sum(axis=axis, keepdims=True)
        gg = g if (keepdims or axis is None) else np.expand_dims(g, axis)
        a._accum(mask * gg, owned=True)

    return _record(out_data, (a,), bwd)


# -- fused numerics -------------------------------------------------------


def softmax_lastdim(a) -> Tensor:
    """Softmax over the last axis, max-subtracted for stability.

    Each last-axis slice of the output is nonnegative and sums to 1.
    """
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    out_data = ex / ex.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        a._accum(out_data * (g - dot), owned=True)

    return _record(out_data, (a,), bwd)


def layer_norm_lastdim(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale/shift by gamma/beta."""
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm gamma/beta must match the last axis")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gamma.data + beta.data

    def bwd(g):
        if gamma.requires_grad:
            gamma._accum((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta._accum(g.reshape(-1, d).sum(axis=0))
        if a.requires_grad:
            gx = g * gamma.data
            term = gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            a._accum(term * inv, owned=True)

    return _record(out_data, (a, gamma, beta), bwd)


def glu_gate(a) -> Tensor:
    """Gated linear unit: split the last axis in half, first * sigmoid(second)."""
    a = as_tensor(a)
    d2 = a.shape[-1]
    if d2 % 2 != 0:
        raise ShapeError(f"glu_gate needs an even last axis, got {d2}")
    d = d2 // 2
    left = a.data[..., :d]
    gate = _expit(a.data[..., d:])
    out_data = left * gate

    def bwd(g):
        full = np.empty_like(a.data)
        full[..., :d] = g * gate
        full[..., d:] = g * left * gate * (1.0 - gate)
        a._accum(full, owned=True)

    return _record(out_data, (a,), bwd)


def prune_below(a, threshold: float) -> Tensor:
    """Zero entries strictly below ``threshold``; pruned entries get no gradient."""
    a = as_tensor(a)
    keep = a.data >= threshold
    out_data = np.where(keep, a.data, 0.0)

    def bwd(g):
        a._accum(g * keep, owned=True)

    return _record(out_data, (a,), bwd)


def dropout(a, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    a = as_tensor(a)
    if not train or p <= 0.0:
        return a
    if rng is None:
        raise ContractError("dropout in training mode requires an RNG")
    mask = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)
    return mul(a, Tensor(mask))


def bce_with_logits(logits, targets) -> Tensor:
    """Mean sigmoid cross-entropy; ``targets`` in {0,1}, any matching shape."""
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"targets shape {t.shape} != logits shape {logits.shape}")
    z = logits.data
    # max(z,0) - z*t + log(1+exp(-|z|)) is exact and overflow-free
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = per.size
    out_data = np.asarray(per.mean())

    def bwd(g):
        logits._accum(g * (_expit(z) - t) / n, owned=True)

    return _record(out_data, (logits,), bwd)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy; ``labels`` are class indices of shape (B,)."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError("softmax_cross_entropy expects (batch, classes) logits")
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (logits.shape[0],):
        raise ShapeError("labels must have shape (batch,)")
    z = logits.data
    zmax = z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True)) + zmax
    per = lse[:, 0] - z[np.arange(len(y)), y]
    n = len(y)
    out_data = np.asarray(per.mean())

    def bwd(g):
        p = np.exp(z - lse)
        p[np.arange(len(y)), y] -= 1.0
        logits._accum(g * p / n, owned=True)

    return _record(out_data, (logits,), bwd)
