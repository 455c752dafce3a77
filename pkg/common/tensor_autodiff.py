"""
Dense tensors with reverse-mode differentiation
===============================================
A small numpy-backed engine, just large enough to train the MLP/CNN models used
here and to differentiate the soft nearest neighbor loss with respect to inputs,
weights and temperatures.

Every primitive computes its forward value with numpy.  When grad mode is on and
at least one input requires a gradient, the primitive appends a record to the
active ``Tape`` holding a closure that maps the output gradient to input
gradients.  ``backward`` replays the tape once, in reverse.

Storage is float32.  Reductions accumulate in float64 and are cast back.
Float64 tensors are accepted (the finite-difference oracle uses them) and
primitives keep the widest input dtype.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from common.errors import ContractError

DTYPE = np.float32

_state = threading.local()


def _tape_stack():
    if not hasattr(_state, "tapes"):
        _state.tapes = [Tape()]
        _state.grad_enabled = True
    return _state.tapes


def grad_enabled():
    _tape_stack()
    return _state.grad_enabled


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording anything on the tape."""
    _tape_stack()
    previous = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def current_tape():
    return _tape_stack()[-1]


class Tensor:
    """n-dimensional array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "name", "is_leaf")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = DTYPE
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self.is_leaf = True

    @classmethod
    def _from_op(cls, value, requires_grad):
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(value)
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        out.is_leaf = False
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(value, like):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, value, dtype=like.dtype), dtype=like.dtype)


@dataclass
class Record:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable


@dataclass
class Tape:
    """Ordered record of primitive applications, replayed once by ``backward``."""

    records: List[Record] = field(default_factory=list)

    def record(self, op, inputs, output, backward_fn):
        self.records.append(Record(op, tuple(inputs), output, backward_fn))

    def reset(self):
        self.records.clear()

    def __len__(self):
        return len(self.records)

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False


def emit(op, inputs, value, backward_fn):
    """Wrap ``value`` as the output of ``op``; ``backward_fn`` maps the output grad to one grad per input."""
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor._from_op(value, needs)
    if needs:
        current_tape().record(op, inputs, out, backward_fn)
    return out


def _require(condition, op, message):
    if not condition:
        raise ContractError(f"{op}: {message}")


# ---------------------------------------------------------------------------
# elementwise and linear primitives
# ---------------------------------------------------------------------------

def add(a, b):
    """a + b for equal shapes, or a (N, F) matrix plus a (F,) bias row."""
    bias = a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]
    _require(a.shape == b.shape or bias, "add", f"shapes {a.shape} and {b.shape} do not conform")

    def backward(g):
        return g, (g.sum(axis=0, dtype=np.float64).astype(g.dtype) if bias else g)

    return emit("add", (a, b), a.data + b.data, backward)


def sub(a, b):
    _require(a.shape == b.shape, "sub", f"shapes {a.shape} and {b.shape} do not conform")
    return emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a, b):
    """Elementwise product; ``b`` may also be a single-element tensor."""
    scalar = b.size == 1 and a.shape != b.shape
    _require(a.shape == b.shape or scalar, "mul", f"shapes {a.shape} and {b.shape} do not conform")
    if scalar:
        bv = b.data.reshape(())

        def backward(g):
            gb = np.sum(g * a.data, dtype=np.float64)
            return g * bv, np.full(b.shape, gb, dtype=b.dtype)

        return emit("mul", (a, b), a.data * bv, backward)
    return emit("mul", (a, b), a.data * b.data, lambda g: (g * b.data, g * a.data))


def scale(a, c):
    """Multiply by a python constant."""
    c = float(c)
    return emit("scale", (a,), a.data * a.data.dtype.type(c), lambda g: (g * g.dtype.type(c),))


def matmul(a, b):
    _require(a.ndim == 2 and b.ndim == 2 and a.shape[1] == b.shape[0], "matmul",
             f"cannot multiply {a.shape} by {b.shape}")
    return emit("matmul", (a, b), a.data @ b.data, lambda g: (g @ b.data.T, a.data.T @ g))


def relu(a):
    mask = a.data > 0
    return emit("relu", (a,), np.where(mask, a.data, 0).astype(a.dtype), lambda g: (g * mask,))


def sigmoid(a):
    x = a.data
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype)
    return emit("sigmoid", (a,), s, lambda g: (g * s * (1 - s),))


def exp(a):
    value = np.exp(a.data)
    return emit("exp", (a,), value, lambda g: (g * value,))


def log(a):
    _require(np.all(a.data > 0), "log", "input must be strictly positive")
    return emit("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def reciprocal(a):
    _require(np.all(a.data != 0), "reciprocal", "input contains zeros")
    value = 1.0 / a.data
    return emit("reciprocal", (a,), value.astype(a.dtype), lambda g: (-g * value * value,))


def softmax(a):
    """Row softmax of a (N, K) matrix, stabilised by max subtraction."""
    _require(a.ndim == 2, "softmax", f"expected a matrix, got shape {a.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return emit("softmax", (a,), s, backward)


def log_softmax(a):
    _require(a.ndim == 2, "log_softmax", f"expected a matrix, got shape {a.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    value = z - lse

    def backward(g):
        return (g - np.exp(value) * g.sum(axis=1, keepdims=True),)

    return emit("log_softmax", (a,), value, backward)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    _require(logits.ndim == 2 and labels.shape == (logits.shape[0],), "cross_entropy",
             f"logits {logits.shape} do not match labels {labels.shape}")
    _require(labels.size == 0 or (labels.min() >= 0 and labels.max() < logits.shape[1]), "cross_entropy",
             f"labels outside [0, {logits.shape[1]})")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    value = np.asarray(-np.mean(logp[rows, labels], dtype=np.float64), dtype=logits.dtype)

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1
        return (grad * (g.reshape(()) / n),)

    return emit("cross_entropy", (logits,), value, backward)


def reduce_sum(a, axis=None):
    value = np.sum(a.data, axis=axis, dtype=np.float64).astype(a.dtype)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g.reshape(()), a.shape).astype(a.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).astype(a.dtype),)

    return emit("reduce_sum", (a,), np.asarray(value), backward)


def reduce_mean(a, axis=None):
    count = a.size if axis is None else a.shape[axis]
    value = (np.sum(a.data, axis=axis, dtype=np.float64) / count).astype(a.dtype)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g.reshape(()) / count, a.shape).astype(a.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis) / count, a.shape).astype(a.dtype),)

    return emit("reduce_mean", (a,), np.asarray(value), backward)


def sqdist(x):
    """Matrix of squared Euclidean distances between the rows of ``x``."""
    _require(x.ndim == 2, "sqdist", f"expected (N, d), got {x.shape}")
    x64 = x.data.astype(np.float64)
    norms = np.einsum("ij,ij->i", x64, x64)
    d = norms[:, None] + norms[None, :] - 2.0 * (x64 @ x64.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)

    def backward(g):
        g64 = g.astype(np.float64)
        sym = g64 + g64.T
        grad = 2.0 * (sym.sum(axis=1)[:, None] * x64 - sym @ x64)
        return (grad.astype(x.dtype),)

    return emit("sqdist", (x,), d.astype(x.dtype), backward)


# ---------------------------------------------------------------------------
# structural primitives
# ---------------------------------------------------------------------------

def reshape(a, shape):
    shape = tuple(shape)
    try:
        value = a.data.reshape(shape)
    except ValueError as exc:
        raise ContractError(f"reshape: cannot reshape {a.shape} into {shape}") from exc
    return emit("reshape", (a,), value, lambda g: (g.reshape(a.shape),))


def flatten(a):
    return reshape(a, (a.shape[0], -1))


def concat(tensors, axis=0):
    tensors = list(tensors)
    _require(len(tensors) > 0, "concat", "nothing to concatenate")
    ref = tensors[0].shape
    for t in tensors[1:]:
        _require(t.ndim == len(ref) and all(t.shape[i] == ref[i] for i in range(len(ref)) if i != axis),
                 "concat", f"shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return emit("concat", tuple(tensors), np.concatenate([t.data for t in tensors], axis=axis), backward)


def take_rows(a, start, stop):
    """Rows ``start:stop`` of ``a``."""
    _require(0 <= start <= stop <= a.shape[0], "take_rows", f"slice {start}:{stop} outside {a.shape[0]} rows")

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return emit("take_rows", (a,), a.data[start:stop], backward)


def broadcast_to(a, shape):
    """Repeat ``a`` along new leading axes so it takes ``shape``."""
    shape = tuple(shape)
    lead = len(shape) - a.ndim
    _require(lead >= 0 and shape[lead:] == a.shape, "broadcast_to", f"cannot broadcast {a.shape} to {shape}")
    axes = tuple(range(lead))

    def backward(g):
        return (np.sum(g, axis=axes, dtype=np.float64).astype(a.dtype),)

    return emit("broadcast_to", (a,), np.broadcast_to(a.data, shape).copy(), backward)


def conv2d(x, w, b=None, padding="valid"):
    """2-D cross-correlation of (N, C, H, W) inputs with (F, C, k, k) kernels."""
    _require(x.ndim == 4 and w.ndim == 4, "conv2d", f"expected 4-D input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    f, ck, k, k2 = w.shape
    _require(ck == c and k == k2, "conv2d", f"kernel {w.shape} does not match {c} input channels")
    _require(padding in ("valid", "same"), "conv2d", f"unknown padding {padding!r}")
    _require(b is None or b.shape == (f,), "conv2d", f"bias shape {None if b is None else b.shape} != ({f},)")
    pad = (k - 1) // 2 if padding == "same" else 0
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, k - 1 - pad), (pad, k - 1 - pad))) if padding == "same" else x.data
    _require(xp.shape[2] >= k and xp.shape[3] >= k, "conv2d", f"input {x.shape[2:]} smaller than kernel {k}x{k}")
    ho, wo = xp.shape[2] - k + 1, xp.shape[3] - k + 1
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))  # n, c, ho, wo, k, k
    cols2d = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wmat = w.data.reshape(f, c * k * k)
    out = (cols2d @ wmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    inputs = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2d = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gw = (g2d.T @ cols2d).reshape(w.shape)
        dcols = (g2d @ wmat).reshape(n, ho, wo, c, k, k)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + ho, j:j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad:pad + h, pad:pad + wd] if padding == "same" else gxp
        grads = (gx, gw)
        if b is not None:
            grads = grads + (np.sum(g, axis=(0, 2, 3), dtype=np.float64).astype(b.dtype),)
        return grads

    return emit("conv2d", inputs, np.ascontiguousarray(out), backward)


def maxpool2d(x):
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped."""
    _require(x.ndim == 4, "maxpool2d", f"expected (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    _require(h >= 2 and w >= 2, "maxpool2d", f"spatial size {h}x{w} is below 2x2")
    ho, wo = h // 2, w // 2
    crop = x.data[:, :, :ho * 2, :wo * 2]
    windows = crop.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    arg = windows.argmax(axis=-1)
    value = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros(windows.shape, dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gcrop = gw.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * 2, wo * 2)
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, :ho * 2, :wo * 2] = gcrop
        return (gx,)

    return emit("maxpool2d", (x,), value, backward)


def dropout(x, rate, rng):
    """Inverted dropout; identity when ``rate`` is 0."""
    _require(0.0 <= rate < 1.0, "dropout", f"rate {rate} outside [0, 1)")
    if rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return mul(x, Tensor(keep, dtype=x.dtype))


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backward(loss, tape=None):
    """Fill ``grad`` on every leaf that requires it with d(loss)/d(leaf); consumes the tape."""
    if loss.size != 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    tape = tape if tape is not None else current_tape()
    if not tape.records:
        raise ContractError("backward: the tape is empty (was the loss computed under no_grad?)")
    grads = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    leaves = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if inp.is_leaf:
                leaves[key] = inp
    for rec in tape.records:
        for inp in rec.inputs:
            if inp.is_leaf and inp.requires_grad and id(inp) not in leaves:
                leaves[id(inp)] = inp
    for key, leaf in leaves.items():
        g = grads.get(key)
        leaf.grad = np.zeros(leaf.shape, dtype=leaf.dtype) if g is None else np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
    tape.reset()


@dataclass
class GradCheckResult:
    passed: bool
    max_rel_error: float
    worst_index: Optional[Tuple[int, ...]]
    analytic: np.ndarray
    numeric: np.ndarray


def numeric_gradient(f, x, h=1e-3):
    """Central differences of scalar ``f`` at ``x``, evaluated in float64."""
    base = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros(base.shape, dtype=np.float64)
    with no_grad():
        for idx in np.ndindex(base.shape):
            shifted = base.copy()
            shifted[idx] += h
            up = f(Tensor(shifted, dtype=np.float64)).item()
            shifted[idx] -= 2 * h
            down = f(Tensor(shifted, dtype=np.float64)).item()
            grad[idx] = (up - down) / (2 * h)
    return grad


def grad_check(f, x, h=1e-3, tol=1e-3, analytic=None):
    """Compare the tape gradient of ``f`` at ``x`` with central differences.

    ``analytic`` overrides the tape gradient, which lets callers check a
    gradient obtained elsewhere.
    """
    if h <= 0 or tol <= 0:
        raise ContractError(f"grad_check: step {h} and tolerance {tol} must be positive")
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)
    if analytic is None:
        leaf = Tensor(data.copy(), requires_grad=True, dtype=data.dtype)
        with Tape() as tape:
            out = f(leaf)
            backward(out, tape)
        analytic = leaf.grad
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = numeric_gradient(f, data, h)
    floor = max(1e-6, 1e-2 * float(np.max(np.abs(numeric))) if numeric.size else 0.0)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    if rel.size == 0:
        return GradCheckResult(True, 0.0, None, analytic, numeric)
    worst = tuple(int(i) for i in np.unravel_index(int(np.argmax(rel)), rel.shape))
    max_rel = float(rel[worst])
    return GradCheckResult(max_rel < tol, max_rel, worst, analytic, numeric)
