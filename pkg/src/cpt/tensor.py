"""Minimal numpy tensor with reverse-mode automatic differentiation.

Every differentiable op creates a node that stamps a monotonically increasing
sequence number. The sequence numbers form the tape: ``backward`` collects the
nodes reachable from the loss and replays them in exact reverse recording
order, which is always a valid reverse topological order.

A tape and its tensors belong to one thread. Grad mode and the debug flag are
thread-local so independent tapes may be built concurrently.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import sparse

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

_seq = itertools.count()
_state = threading.local()
_default_dtype = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class UsageError(RuntimeError):
    """Raised on misuse of the autodiff API."""


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _default_dtype = dtype.type


def get_default_dtype():
    return _default_dtype


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def debug_checks(enabled: bool = True):
    """Raise ``FloatingPointError`` as soon as an op produces NaN or Inf."""
    prev = getattr(_state, "debug", False)
    _state.debug = enabled
    try:
        yield
    finally:
        _state.debug = prev


@contextmanager
def record_branches():
    """Collect every discrete branch decision (ReLU masks, max winners, kNN
    indices) taken while the context is open; yields the list being filled."""
    prev = getattr(_state, "branches", None)
    _state.branches = []
    try:
        yield _state.branches
    finally:
        _state.branches = prev


def note_branch(decision: np.ndarray) -> None:
    rec = getattr(_state, "branches", None)
    if rec is not None:
        rec.append(np.array(decision, copy=True))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                arr = data
            else:
                arr = np.asarray(data, dtype=_default_dtype)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._seq = next(_seq)
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -----------------------------------------------------
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
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    # -- method aliases --------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def transpose(self, a: int = -2, b: int = -1):
        return swapaxes(self, a, b)

    def relu(self):
        return relu(self)

    def backward(self, seed=None):
        backward(self, seed)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _pair(a, b):
    """Coerce plain operands to the dtype of the tensor operand."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(b, dtype=a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(a, dtype=b.dtype), b
    return as_tensor(a), as_tensor(b)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if getattr(_state, "debug", False) and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {backward_fn.__qualname__.split('.')[0]}")
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def backward(loss: Tensor, seed=None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor requiring grad")
    if seed is None:
        if loss.data.size != 1:
            raise UsageError(f"backward on non-scalar of shape {loss.shape} needs an explicit seed")
        seed = np.ones_like(loss.data)
    else:
        seed = np.broadcast_to(np.asarray(seed, dtype=loss.dtype), loss.shape).copy()

    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(p for p in t._parents if p.requires_grad)

    grads = {id(loss): seed}
    for t in sorted(nodes.values(), key=lambda n: n._seq, reverse=True):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _make(a.data / b.data, (a, b), bw)


def scale(x, factor: float) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * factor, (x,), lambda g: (g * factor,))


def power(x, exponent: float) -> Tensor:
    x = as_tensor(x)
    out = x.data ** exponent
    return _make(out, (x,), lambda g: (g * exponent * x.data ** (exponent - 1),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    note_branch(mask)
    return _make(np.where(mask, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * mask,))


def dropout(x, rate: float, train: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; the identity when ``train`` is false or ``rate`` is 0."""
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise UsageError("dropout in train mode needs an explicit rng")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def permute(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(int(a) % x.ndim for a in axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return permute(x, axes)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def getitem(x, key) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return _make(x.data[key], (x,), bw)


def gather(x, index: np.ndarray) -> Tensor:
    """Batched row gather: ``out[b, ...] = x[b, index[b, ...]]``.

    ``x`` has shape (B, N, *feat) and ``index`` integer shape (B, *idx); the
    result has shape (B, *idx, *feat). The backward scatter-add is a sparse
    product, much faster than ``np.add.at`` for neighbourhood-sized indices.
    """
    x = as_tensor(x)
    index = np.asarray(index)
    if index.shape[0] != x.shape[0]:
        raise ShapeError(f"gather batch mismatch: x {x.shape} vs index {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= x.shape[1]):
        raise IndexError(f"gather index out of range [0, {x.shape[1]})")
    b, n = x.shape[:2]
    feat = x.shape[2:]
    batch = np.arange(b).reshape((-1,) + (1,) * (index.ndim - 1))

    def bw(g):
        flat = (index + batch * n).reshape(-1)
        scatter = sparse.csr_matrix(
            (np.ones(flat.size, dtype=g.dtype), (flat, np.arange(flat.size))), shape=(b * n, flat.size)
        )
        gx = scatter @ g.reshape(flat.size, -1)
        return (np.asarray(gx).reshape((b, n) + feat),)

    return _make(x.data[batch, index], (x,), bw)


def broadcast_to(x, shape) -> Tensor:
    """Differentiable ``np.broadcast_to``; the result is a fresh array."""
    x = as_tensor(x)
    return _make(np.array(np.broadcast_to(x.data, shape)), (x,), lambda g: (_unbroadcast(g, x.shape),))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        for a in sorted(ax % len(shape) for ax in axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        return (_expand_reduced(g, x.shape, axis, keepdims).copy(),)

    return _make(out, (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    count = x.data.size // max(out.size, 1)

    def bw(g):
        return (_expand_reduced(g, x.shape, axis, keepdims) / count,)

    return _make(out, (x,), bw)


def max_(x, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    """Max-reduce; the subgradient goes to the first (lowest-index) maximiser."""
    x = as_tensor(x)
    if axis is None:
        flat = reshape(x, (-1,))
        return max_(flat, 0, keepdims=False) if not keepdims else reshape(max_(flat, 0), (1,) * x.ndim)
    axis = axis % x.ndim
    arg = np.argmax(x.data, axis=axis)
    note_branch(arg)
    idx = np.expand_dims(arg, axis)
    out = np.take_along_axis(x.data, idx, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g if keepdims else np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make(out, (x,), bw)


def argmax_max(x, axis: int):
    """Return ``(max_tensor, argmax_indices)`` with lowest-index tie-break."""
    x = as_tensor(x)
    return max_(x, axis), np.argmax(x.data, axis=axis)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dims not broadcastable: {a.shape} @ {b.shape}") from None

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; weight is (out, in).

    The forward keeps every leading axis as a stacked matmul axis (a 2-D input
    is contracted row by row), so a row's result does not depend on which
    other rows share the batch. The weight gradient folds all rows into a
    single GEMM.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear shape mismatch: x {x.shape} with weight {weight.shape}")
    lead = x.shape[:-1]
    stacked = x.data.reshape(lead + (1, x.shape[-1])) if x.ndim == 2 else x.data
    out = np.matmul(stacked, weight.data.T).reshape(lead + (weight.shape[0],))
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
        parents += (bias,)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x.data.reshape(-1, x.shape[-1]) if weight.requires_grad else None
        grads = (gx, gw)
        if bias is not None:
            grads += (g2.sum(axis=0),)
        return grads

    return _make(out, parents, bw)


# ---------------------------------------------------------------------------
# normalisation / probabilities
# ---------------------------------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def bw(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw)


def nll_loss(log_probs, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood; ``log_probs`` is (M, C), targets (M,)."""
    log_probs = as_tensor(log_probs)
    targets = np.asarray(targets)
    if log_probs.ndim != 2 or targets.shape != log_probs.shape[:1]:
        raise ShapeError(f"nll_loss expects (M, C) and (M,), got {log_probs.shape} and {targets.shape}")
    m, c = log_probs.shape
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise ValueError(f"target ids must lie in [0, {c})")
    rows = np.arange(m)
    out = np.asarray(-log_probs.data[rows, targets].mean())

    def bw(g):
        gx = np.zeros_like(log_probs.data)
        gx[rows, targets] = -g / m
        return (gx,)

    return _make(out, (log_probs,), bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the affine ``gamma * xhat + beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm affine must have shape {x.shape[-1:]}, got {gamma.shape}, {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    def bw(g):
        gg = g * gamma.data
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv_grouped(x, weight, bias=None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 1-D cross-correlation.

    x: (B, C, L); weight: (C_out, C // groups, kernel); bias: (C_out,).
    ``groups == C`` is depthwise, ``kernel == 1 and groups == 1`` pointwise.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 3:
        raise ShapeError(f"conv_grouped expects x (B,C,L) and weight (O,C/g,k), got {x.shape}, {weight.shape}")
    b, c, length = x.shape
    c_out, cg, k = weight.shape
    if groups < 1 or c % groups or c_out % groups or cg != c // groups:
        raise ShapeError(f"invalid grouping: C={c}, C_out={c_out}, groups={groups}, weight {weight.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    padded = length + 2 * padding
    if k > padded:
        raise ShapeError(f"kernel {k} wider than padded length {padded}")
    l_out = (padded - k) // stride + 1
    og = c_out // groups

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)[:, :, ::stride]  # B,C,L_out,k
    depthwise = cg == 1 and og == 1
    if depthwise:
        w_dw = weight.data[:, 0, :]  # C,k
        out = (win * w_dw[None, :, None, :]).sum(axis=-1)
    else:
        # (B, G, L_out, Cg*k) @ (G, Cg*k, Og): batch stays a stacked axis of matmul
        cols = np.ascontiguousarray(
            win.reshape(b, groups, cg, l_out, k).transpose(0, 1, 3, 2, 4)
        ).reshape(b, groups, l_out, cg * k)
        w_mat = weight.data.reshape(groups, og, cg * k)
        out = np.matmul(cols, w_mat.transpose(0, 2, 1)).transpose(0, 1, 3, 2).reshape(b, c_out, l_out)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None]

    def bw(g):
        gw = gx = None
        if depthwise:
            if weight.requires_grad:
                gw = np.matmul(g.transpose(1, 0, 2).reshape(c, 1, b * l_out),
                               win.transpose(1, 0, 2, 3).reshape(c, b * l_out, k))
            gwin = g[..., None] * w_dw[None, :, None, :] if x.requires_grad else None
        else:
            g4 = g.reshape(b, groups, og, l_out).transpose(0, 1, 3, 2)  # B,G,L_out,Og
            if weight.requires_grad:
                gw = np.matmul(
                    g4.transpose(1, 3, 0, 2).reshape(groups, og, b * l_out),
                    cols.transpose(1, 0, 2, 3).reshape(groups, b * l_out, cg * k),
                ).reshape(weight.shape)
            gwin = None
            if x.requires_grad:
                gcols = np.matmul(g4, w_mat)  # B,G,L_out,Cg*k
                gwin = gcols.reshape(b, groups, l_out, cg, k).transpose(0, 1, 3, 2, 4).reshape(b, c, l_out, k)
        if gwin is not None:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, :, j:j + stride * (l_out - 1) + 1:stride] += gwin[:, :, :, j]
            gx = gxp[:, :, padding:padding + length] if padding else gxp
        grads = (gx, gw)
        if bias is not None:
            grads += (g.sum(axis=(0, 2)),)
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw)

