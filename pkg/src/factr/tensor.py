"""Reverse-mode autodiff over numpy arrays.

A ``Tensor`` wraps an ndarray and records the op that produced it. Calling
``backward()`` on a scalar walks the recorded graph in reverse topological
order and accumulates gradients into every reachable tensor that has
``requires_grad=True``. The graph references are dropped afterwards, so a
fresh forward pass is needed per backward pass; leaf ``.grad`` buffers
survive and accumulate across passes until ``zero_grad()``.

Float32 is the working dtype for training; the same graph runs in float64
for gradient checking (dtype follows the arrays passed in).
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32

# Module-level switch: inside no_grad() nothing is taped.
_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (eval-time forward)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_grad_alias")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrapping a Tensor in a Tensor; use .detach() or pass .data")
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        # True while .grad may alias another tensor's buffer; the first
        # in-place accumulation reallocates instead of writing through.
        self._grad_alias = False

    # ---- bookkeeping ------------------------------------------------------

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

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # ---- graph construction ----------------------------------------------

    def _accumulate(self, contribution: np.ndarray):
        if self.grad is None:
            self.grad = contribution
            self._grad_alias = True
        elif self._grad_alias:
            self.grad = self.grad + contribution
            self._grad_alias = False
        else:
            self.grad += contribution

    def backward(self):
        """Backprop from a scalar. Accumulates into .grad additively."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.data.shape}")
        # Iterative topological order; recursion depth would explode on long
        # training graphs.
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                for parent, contrib in zip(node._parents, node._backward(node.grad)):
                    # Constants with no history sink their gradient.
                    if contrib is not None and (parent.requires_grad or parent._parents):
                        parent._accumulate(contrib)
            # Free the tape; leaves keep their grads for the optimizer.
            if node._parents:
                node._parents = ()
                node._backward = None
                if not node.requires_grad:
                    node.grad = None

    # ---- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return _reduce(self, axis, keepdims, mean=False)

    def mean(self, axis=None, keepdims=False):
        return _reduce(self, axis, keepdims, mean=True)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)

    def abs(self):
        return abs_(self)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor],
          backward: Callable[[np.ndarray], tuple]) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
        out.requires_grad = False  # interior node; grads flow through, not stored
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---- elementwise ------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _make(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _make(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _make(a.data * b.data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb
    return _make(a.data / b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def abs_(a: Tensor) -> Tensor:
    # Subgradient 0 at the kink.
    def backward(g):
        return (g * np.sign(a.data),)
    return _make(np.abs(a.data), (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # Split by sign so exp never overflows.
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = out.astype(x.dtype, copy=False)

    def backward(g):
        return (g * out * (1.0 - out),)
    return _make(out, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """x * Phi(x) with the exact Gaussian CDF (erf form, not tanh)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0, dtype=x.dtype)))
    out = (x * cdf).astype(x.dtype, copy=False)

    def backward(g):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi, dtype=x.dtype)
        return ((g * (cdf + x * pdf)).astype(x.dtype, copy=False),)
    return _make(out, (a,), backward)


# ---- shape ------------------------------------------------------------------


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return _make(a.data.swapaxes(ax1, ax2), (a,),
                 lambda g: (g.swapaxes(ax1, ax2),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))
    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), backward)


# ---- reductions --------------------------------------------------------------


def _reduce(a: Tensor, axis, keepdims: bool, mean: bool) -> Tensor:
    if mean:
        data = a.data.mean(axis=axis, keepdims=keepdims)
    else:
        data = a.data.sum(axis=axis, keepdims=keepdims)
    data = np.asarray(data)
    in_shape = a.shape
    if axis is None:
        axes = tuple(range(len(in_shape)))
    elif isinstance(axis, int):
        axes = (axis % len(in_shape),)
    else:
        axes = tuple(ax % len(in_shape) for ax in axis)
    count = 1
    for ax in axes:
        count *= in_shape[ax]

    def backward(g):
        g = np.asarray(g)
        if not keepdims:
            expand = list(g.shape)
            for ax in sorted(axes):
                expand.insert(ax, 1)
            g = g.reshape(expand)
        g = np.broadcast_to(g, in_shape)
        if mean:
            g = g / np.asarray(count, dtype=g.dtype)
        else:
            g = np.ascontiguousarray(g)
        return (g.astype(a.dtype, copy=False),)
    return _make(data, (a,), backward)


# ---- matmul ------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        ad, bd = a.data, b.data
        if bd.ndim == 1:
            raise NotImplementedError("vector right operands are not used here")
        ga = np.matmul(g, bd.swapaxes(-1, -2))
        gb = np.matmul(ad.swapaxes(-1, -2), g)
        # Batched dims may have been broadcast; fold them back down.
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _make(np.matmul(a.data, b.data), (a, b), backward)


# ---- fused primitives --------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)
    return _make(out, (a,), backward)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis (biased variance), then affine."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = (x - mu) * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        reduce_axes = tuple(range(g.ndim - 1))
        dgamma = _unbroadcast((g * xhat).sum(axis=reduce_axes), gamma.shape)
        dbeta = _unbroadcast(g.sum(axis=reduce_axes), beta.shape)
        return dx.astype(x.dtype, copy=False), dgamma, dbeta
    return _make(out.astype(x.dtype, copy=False), (a, gamma, beta), backward)


def standardize(a: Tensor, eps: float = 1e-5) -> Tensor:
    """layer_norm without learnable affine (parameter-free pre-norm)."""
    one = Tensor(np.ones((1,), dtype=a.dtype))
    zero = Tensor(np.zeros((1,), dtype=a.dtype))
    return layer_norm(a, one, zero, eps)


# ---- gather / scatter --------------------------------------------------------


def gather_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Embedding lookup: out[..., :] = table[index[...], :].

    index is a plain integer ndarray (codes never need gradients); the
    backward scatters with np.add.at so repeated codes accumulate.
    """
    index = np.asarray(index)
    if not np.issubdtype(index.dtype, np.integer):
        raise TypeError(f"integer index required, got {index.dtype}")
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexError(
            f"code out of range [0, {table.shape[0]}): min={index.min()} max={index.max()}")

    def backward(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, index, g)
        return (dt,)
    return _make(table.data[index], (table,), backward)


def unfold_last(a: Tensor, patch_len: int, stride: int) -> Tensor:
    """Slide windows of `patch_len` over the last axis: [..., L] -> [..., N, P]."""
    length = a.shape[-1]
    if patch_len > length:
        raise ValueError(f"patch_len {patch_len} exceeds axis length {length}")
    n = (length - patch_len) // stride + 1
    starts = np.arange(n) * stride
    if stride == patch_len and n * patch_len == length:
        # Contiguous non-overlapping cover: a pure reshape, cheapest path.
        return reshape(a, a.shape[:-1] + (n, patch_len))
    idx = starts[:, None] + np.arange(patch_len)[None, :]  # [N, P]

    def backward(g):
        dx = np.zeros(a.shape, dtype=g.dtype)
        # Column p of every patch lands at distinct positions (stride >= 1),
        # so a vectorized += per column is safe and avoids np.add.at.
        for p in range(patch_len):
            dx[..., starts + p] += g[..., :, p]
        return (dx,)
    return _make(a.data[..., idx], (a,), backward)


# ---- dropout -----------------------------------------------------------------


def dropout(a: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p == 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    keep = (rng.random(a.shape) >= p)
    scale = np.asarray(1.0 / (1.0 - p), dtype=a.dtype)
    mask = keep.astype(a.dtype) * scale

    def backward(g):
        return (g * mask,)
    return _make(a.data * mask, (a,), backward)


# ---- gradient checking --------------------------------------------------------


def grad_check(fn: Callable[[Tensor], Tensor], x: Tensor, h: float | None = None) -> float:
    """Compare analytic grads of a scalar fn against central differences.

    Returns max over components of |analytic - numeric| / max(1, |analytic|).
    Run in float64; float32 round-off swamps the difference quotient.
    """
    if h is None:
        h = 1e-5 if x.dtype == np.float64 else 1e-2
    if not x.data.flags["C_CONTIGUOUS"]:
        x.data = np.ascontiguousarray(x.data)
    x.zero_grad()
    out = fn(x)
    if out.size != 1:
        raise ValueError("grad_check needs a scalar-valued fn")
    out.backward()
    if x.grad is None:
        analytic = np.zeros_like(x.data)
    else:
        analytic = np.array(x.grad, dtype=np.float64)
    numeric = np.zeros(x.data.shape, dtype=np.float64)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        with no_grad():
            f_plus = float(fn(x).data)
        flat[i] = orig - h
        with no_grad():
            f_minus = float(fn(x).data)
        flat[i] = orig
        nflat[i] = (f_plus - f_minus) / (2.0 * h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    if np.isnan(err).any():
        where = int(np.argmax(np.isnan(err.reshape(-1))))
        raise FloatingPointError(f"NaN in gradient comparison at flat component {where}")
    x.zero_grad()
    return float(err.max())
