"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable primitive records one entry on the active
:class:`ComputationTape` when at least one input requires a gradient.
:func:`backward` replays the tape in reverse, so gradients of leaf tensors
accumulate across calls until :meth:`ComputationTape.reset` or
:func:`zero_grad`.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> backward(sum(x * x))
    >>> x.grad
    array([2., 4.])
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError, DomainError

# Additive surrogate for -inf in masked softmax.
MASK_FILL = -1e9

_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """A float64 array plus optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_is_leaf", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._is_leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self):
        return self.data.shape[0]

    # operator sugar
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return scale(self, 1.0 / other)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple
    backward: Callable


@dataclass
class ComputationTape:
    """Append-only log of primitive operations in forward order."""

    records: list = field(default_factory=list)

    def append(self, record):
        self.records.append(record)

    def reset(self):
        self.records.clear()

    def __len__(self):
        return len(self.records)


class _State(threading.local):
    def __init__(self):
        self.tape = ComputationTape()
        self.enabled = True


_state = _State()


def get_tape():
    return _state.tape


def reset_tape():
    _state.tape.reset()


@contextlib.contextmanager
def use_tape(tape):
    """Record onto ``tape`` inside the block."""
    prev = _state.tape
    _state.tape = tape
    try:
        yield tape
    finally:
        _state.tape = prev


@contextlib.contextmanager
def no_grad():
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, inputs, backward_fn):
    """Wrap ``data`` as an op output and record it if any input needs grad."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    track = _state.enabled and any(t.requires_grad for t in inputs)
    out.requires_grad = track
    out._is_leaf = not track
    if track:
        _state.tape.append(_Record(out, tuple(inputs), backward_fn))
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tracked tensor."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any tensor that requires grad")
    if loss._is_leaf:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    pending = {id(loss): seed}
    for rec in reversed(_state.tape.records):
        g = pending.pop(id(rec.out), None)
        if g is None:
            continue
        out = rec.out
        out.grad = g if out.grad is None else out.grad + g
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._is_leaf:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                pending[key] = gi if key not in pending else pending[key] + gi
    if id(loss) in pending:
        raise ContractError("loss was not recorded on the active tape")


def zero_grad(tensors):
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(ad * bd, (a, b), bw)


def scale(x, c):
    """Multiply by a Python scalar."""
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,))


def log(x):
    xd = x.data
    if np.any(xd <= 0):
        raise DomainError("log of a non-positive value")
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def exp(x):
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def clamp_min(x, lo):
    """max(x, lo); gradient passes only where x > lo."""
    keep = x.data > lo
    return _make(np.where(keep, x.data, lo), (x,), lambda g: (g * keep,))


def gelu(x):
    """Exact GELU, x * Phi(x)."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _SQRT_HALF))

    def bw(g):
        return (g * (cdf + xd * _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)),)

    return _make(xd * cdf, (x,), bw)


# ---------------------------------------------------------------------------
# shape ops and reductions


def reshape(x, shape):
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes):
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x, a1, a2):
    return _make(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),))


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x, axis=None, keepdims=False):
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def max(x, axis, keepdims=False):  # noqa: A001 - mirrors numpy
    """Max along ``axis``; the gradient goes to the first maximal entry."""
    xd = x.data
    idx = np.expand_dims(np.argmax(xd, axis=axis), axis)
    out = np.take_along_axis(xd, idx, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        gx = np.zeros_like(xd)
        np.put_along_axis(gx, idx, g, axis=axis)
        return (gx,)

    return _make(out if keepdims else np.squeeze(out, axis), (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """Batched matrix product ``a[..., p, q] @ b[..., q, r]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(
            f"matmul batch dimensions not broadcastable: {a.shape} @ {b.shape}"
        ) from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), bw)


def linear(x, weight, bias=None):
    """``x @ weight + bias`` for ``x[..., d_in]``, folding leading dims into one matmul."""
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
    out = matmul(flat, weight)
    if bias is not None:
        out = add(out, bias)
    return reshape(out, lead + (weight.shape[-1],)) if x.ndim != 2 else out


# ---------------------------------------------------------------------------
# normalisation and probabilities


def softmax_rows(x, mask=None):
    """Softmax over the last axis; ``mask`` (broadcastable bool) marks allowed entries.

    Masked entries come out exactly zero. A row with no allowed entry is a
    :class:`DomainError`.
    """
    xd = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise DomainError("softmax row is fully masked")
        xd = np.where(mask, xd, MASK_FILL)
    # each row's max is an allowed entry, so masked ones underflow to exactly 0
    p = xd - xd.max(axis=-1, keepdims=True)
    np.exp(p, out=p)
    p /= p.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (x,), bw)


def log_softmax(x):
    xd = x.data
    z = xd - xd.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), bw)


def layer_norm(x, gain, bias, eps=1e-5):
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}, {bias.shape} != ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gb = g.sum(axis=lead) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, gg, gb

    return _make(xhat * gd + bias.data, (x, gain, bias), bw)


def cross_entropy(logits, labels, reduction="mean"):
    """Negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    lp = log_softmax(logits)
    picked = take_label(lp, labels)
    total = sum(picked)
    if reduction == "sum":
        return scale(total, -1.0)
    if reduction == "mean":
        return scale(total, -1.0 / picked.size)
    raise ValueError(f"unknown reduction {reduction!r}")


def take_label(x, labels):
    """Pick ``x[..., labels]`` per row of a ``[..., c]`` tensor."""
    labels = np.asarray(labels, dtype=np.int64)
    c = x.shape[-1]
    if labels.shape != x.shape[:-1]:
        raise DimensionError(f"labels shape {labels.shape} != {x.shape[:-1]}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range for {c} classes")
    idx = labels[..., None]
    out = np.take_along_axis(x.data, idx, axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g[..., None], axis=-1)
        return (gx,)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------------------
# indexing


def dropout(x, p, rng=None, training=True):
    """Inverted dropout; the identity when ``training`` is false or ``p == 0``."""
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must be in [0, 1), got {p}")
    if rng is None:
        raise ContractError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p) * (1.0 / (1.0 - p))
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


def embed(ids, table):
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    v = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise IndexError(f"token id out of range for vocabulary of size {v}")

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(table.data[ids], (table,), bw)


def _check_rows(idx, n):
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError("row index must be one-dimensional")
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise IndexError(f"row index out of range for {n} rows")
    return idx


def gather_rows(x, idx):
    """Select rows ``x[..., idx, :]`` along the second-to-last axis."""
    n = x.shape[-2]
    idx = _check_rows(idx, n)
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape)
        np.add.at(gx, (Ellipsis, idx, slice(None)), g)
        return (gx,)

    return _make(x.data[..., idx, :], (x,), bw)


def scatter_rows(x, idx, rows):
    """Copy of ``x`` with ``x[..., idx, :]`` replaced by ``rows``; ``idx`` must be unique."""
    n = x.shape[-2]
    idx = _check_rows(idx, n)
    if len(np.unique(idx % n)) != len(idx):
        raise ContractError("scatter_rows needs distinct indices")
    if rows.shape[-2] != len(idx) or rows.shape[-1] != x.shape[-1]:
        raise DimensionError(f"scatter rows {rows.shape} do not fit {x.shape} at {len(idx)} rows")
    out = np.array(np.broadcast_to(x.data, np.broadcast_shapes(x.shape, rows.shape[:-2] + x.shape[-2:])))
    out[..., idx, :] = rows.data
    xs, rs = x.shape, rows.shape

    def bw(g):
        gx = g.copy()
        gx[..., idx, :] = 0.0
        return _unbroadcast(gx, xs), _unbroadcast(g[..., idx, :], rs)

    return _make(out, (x, rows), bw)


def take(x, key):
    """Basic (slice) indexing ``x[key]``; ``key`` must not repeat elements."""
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape)
        gx[key] = g
        return (gx,)

    return _make(x.data[key], (x,), bw)


def concat(xs, axis=-1):
    xs = [as_tensor(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), bw)


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)

