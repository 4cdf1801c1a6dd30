"""Dense tensors with a reverse-mode gradient tape.

Only the operations needed by the encoders, the contrastive objective and the
relevance explainer are provided. Every node records its parents and a
closure mapping the output gradient to parent gradients; ``backward`` replays
those closures in reverse creation order, which makes gradients bit-stable
for a fixed seed.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_seq = itertools.count()
_grad_enabled = True

DEFAULT_DTYPE = np.float64


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "_retain", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._seq = next(_seq)
        self._retain = False

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._seq = next(_seq)
        out._retain = False
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

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

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def retain_grad(self) -> "Tensor":
        """Keep the gradient of this (non-leaf) node after ``backward``."""
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})\n{self.data!r}"

    def __len__(self) -> int:
        return len(self.data)

    # -- backward -------------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.data.shape)

        nodes = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in nodes:
                continue
            nodes[id(node)] = node
            for p in node._parents:
                if p.requires_grad and id(p) not in nodes:
                    stack.append(p)
        order = sorted(nodes.values(), key=lambda t: t._seq, reverse=True)

        pending = {id(self): grad}
        for node in order:
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if node._retain:
                node.grad = g.copy() if node.grad is None else node.grad + g
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # -- operators ------------------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not isinstance(a, Tensor):
        a, b = as_tensor(a), as_tensor(b)
    return a, b


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise ----------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return Tensor._make(
        ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return Tensor._make(out, (a, b), back)


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return Tensor._make(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._make(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return Tensor._make(np.where(pos, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * pos,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return Tensor._make(out, (a,), back)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant (no gradient there)."""
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data.dtype.type(value), a.data)
    keep = ~mask
    return Tensor._make(out, (a,), lambda g: (_unbroadcast(g * keep, a.shape),))


# -- reductions -----------------------------------------------------------------
def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(np.asarray(out), (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


# -- shape ----------------------------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._make(
        np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),)
    )


def getitem(a: Tensor, idx) -> Tensor:
    """Indexing; the result is always a copy (no aliasing on the tape)."""
    src_shape = a.shape
    out = np.array(a.data[idx], copy=True)

    basic = all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def back(g):
        full = np.zeros(src_shape, dtype=g.dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return Tensor._make(out, (a,), back)


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-D table (embedding lookup)."""
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return Tensor._make(table.data[ids], (table,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


# -- linear algebra -------------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._make(ad @ bd, (a, b), back)


# -- normalised exponentials ----------------------------------------------------
def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax. NaN inputs propagate to NaN outputs."""
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (a,), back)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def back(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (a,), back)


# -- normalisation layers -------------------------------------------------------
def layer_norm(x: Tensor, gamma: Optional[Tensor], beta: Optional[Tensor], eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data if gamma is not None else None
    out = xhat * gd if gd is not None else xhat
    if beta is not None:
        out = out + beta.data
    n = xd.shape[-1]

    def back(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead) if gamma is not None else None
        gbeta = g.sum(axis=lead) if beta is not None else None
        gx_hat = g * gd if gd is not None else g
        gx = inv / n * (n * gx_hat - gx_hat.sum(-1, keepdims=True) - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        return gx, ggamma, gbeta

    parents = (x, gamma if gamma is not None else _NONE, beta if beta is not None else _NONE)
    return Tensor._make(out, parents, back)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    channel_axis: int = 1,
) -> Tensor:
    """Batch normalisation over every axis except ``channel_axis``.

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance, as torch does); in eval mode the
    running buffers are used and nothing is updated.
    """
    xd = x.data
    ax = channel_axis % xd.ndim
    red = tuple(i for i in range(xd.ndim) if i != ax)
    bshape = [1] * xd.ndim
    bshape[ax] = xd.shape[ax]
    gd = gamma.data.reshape(bshape)
    bd = beta.data.reshape(bshape)

    if not training:
        inv = 1.0 / np.sqrt(running_var.reshape(bshape) + eps)
        xhat = (xd - running_mean.reshape(bshape)) * inv
        out = xhat * gd + bd

        def back_eval(g):
            return g * gd * inv, (g * xhat).sum(axis=red), g.sum(axis=red)

        return Tensor._make(out, (x, gamma, beta), back_eval)

    n = int(np.prod([xd.shape[i] for i in red]))
    mu = xd.mean(axis=red, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=red, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gd + bd
    unbiased = var.reshape(-1) * (n / max(n - 1, 1))
    running_mean *= 1.0 - momentum
    running_mean += momentum * mu.reshape(-1)
    running_var *= 1.0 - momentum
    running_var += momentum * unbiased

    def back(g):
        gxhat = g * gd
        gx = inv / n * (n * gxhat - gxhat.sum(axis=red, keepdims=True) - xhat * (gxhat * xhat).sum(axis=red, keepdims=True))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return Tensor._make(out, (x, gamma, beta), back)


# -- convolution ----------------------------------------------------------------
def conv1d(x: Tensor, kernels: Tensor, bias: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    """1-D cross-correlation.

    ``x`` is ``[C_in, L]`` or ``[B, C_in, L]``; ``kernels`` is ``[C_out, C_in, K]``.
    Output length is ``floor((L - K) / stride) + 1``.
    """
    unbatched = x.ndim == 2
    xd = x.data[None] if unbatched else x.data
    wd = kernels.data
    B, C, L = xd.shape
    Co, Ci, K = wd.shape
    if Ci != C:
        raise DimensionError(f"conv1d channel mismatch: input {C}, kernels {Ci}")
    if K > L:
        raise DimensionError(f"conv1d kernel ({K}) larger than input ({L})")
    Lout = (L - K) // stride + 1
    # cols[b, t, c, k] = x[b, c, t*stride + k]
    s = xd.strides
    cols = np.lib.stride_tricks.as_strided(xd, shape=(B, Lout, C, K), strides=(s[0], s[2] * stride, s[1], s[2]))
    cols2 = cols.reshape(B * Lout, C * K)
    w2 = wd.reshape(Co, C * K)
    out = (cols2 @ w2.T).reshape(B, Lout, Co).transpose(0, 2, 1)
    if bias is not None:
        out = out + bias.data[None, :, None]
    out = np.ascontiguousarray(out)
    if unbatched:
        out = out[0]

    def back(g):
        g3 = g[None] if unbatched else g
        gt = g3.transpose(0, 2, 1).reshape(B * Lout, Co)
        gw = (gt.T @ cols2).reshape(Co, C, K)
        gcols = (gt @ w2).reshape(B, Lout, C, K)
        gx = np.zeros_like(xd)
        end = stride * (Lout - 1) + 1
        for k in range(K):
            gx[:, :, k : k + end : stride] += gcols[:, :, :, k].transpose(0, 2, 1)
        if unbatched:
            gx = gx[0]
        gb = g3.sum(axis=(0, 2)) if bias is not None else None
        return gx, gw, gb

    parents = (x, kernels, bias if bias is not None else _NONE)
    return Tensor._make(out, parents, back)


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 0.0) -> Tensor:
    norm = sqrt(tsum(a * a, axis=axis, keepdims=True))
    if eps:
        norm = norm + eps
    return a / norm


_NONE = Tensor(np.zeros(()))


# -- gradient check ---------------------------------------------------------------
def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    indices: Optional[Iterable] = None,
    floor: float = 1e-6,
) -> float:
    """Compare tape gradients of scalar ``f`` at ``x`` with central differences.

    Returns the maximum over checked entries of
    ``|tape - numeric| / max(|tape|, |numeric|, floor)``. The step actually
    taken is ``(x + eps) - (x - eps)`` as represented, so linear functions of
    dyadic inputs give an error of exactly zero. ``indices`` restricts the
    check to a subset of flat positions.
    """
    if x.grad is not None:
        x.grad = None
    was = x.requires_grad
    x.requires_grad = True
    out = f(x)
    out.backward()
    tape = x.grad.reshape(-1).copy()
    x.grad = None
    x.requires_grad = was

    flat = x.data.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    worst = 0.0
    with no_grad():
        for i in indices:
            orig = flat[i]
            hi = orig + eps
            lo = orig - eps
            flat[i] = hi
            fp = float(f(x).data)
            flat[i] = lo
            fm = float(f(x).data)
            flat[i] = orig
            num = (fp - fm) / (hi - lo)
            a = tape[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst
