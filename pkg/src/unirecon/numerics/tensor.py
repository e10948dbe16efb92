"""Dense tensors with tape-free reverse-mode differentiation.

Every op output keeps references to its parents and a closure mapping the
upstream gradient to per-parent gradients. ``Tensor.backward`` walks the graph
in reverse topological order. Storage is float32 unless a
:func:`precision` context says otherwise; matmuls and reductions accumulate in
float64. Any op that produces NaN/Inf raises :class:`NumericError` on the spot.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import DimensionError, DomainError, NumericError

_STATE = {"dtype": np.dtype(np.float32), "grad": True}

MASK_VALUE = -1e9


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the storage dtype of newly created tensors."""
    old = _STATE["dtype"]
    _STATE["dtype"] = np.dtype(dtype)
    try:
        yield
    finally:
        _STATE["dtype"] = old


@contextlib.contextmanager
def no_grad():
    old = _STATE["grad"]
    _STATE["grad"] = False
    try:
        yield
    finally:
        _STATE["grad"] = old


def default_dtype() -> np.dtype:
    return _STATE["dtype"]


def grad_enabled() -> bool:
    return _STATE["grad"]


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.integer, np.floating)) and not isinstance(x, bool)


def _as_tensor(x) -> "Tensor":
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class Tensor:
    """A dense array plus an optional gradient accumulator."""

    __array_priority__ = 100
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or _STATE["dtype"])
        if not np.all(np.isfinite(self.data)):
            raise NumericError("tensor constructed from non-finite values")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self._op = "leaf"

    @classmethod
    def _make(cls, arr: np.ndarray, parents: tuple, backward: Callable, op: str) -> "Tensor":
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values produced by {op}")
        t = object.__new__(cls)
        t.data = arr
        t.grad = None
        track = _STATE["grad"] and any(p.requires_grad for p in parents)
        t.requires_grad = track
        t._parents = parents if track else ()
        t._backward = backward if track else None
        t._op = op
        return t

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

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __float__(self):
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    # -- autodiff --------------------------------------------------------
    def backward(self, grad=None):
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without grad needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, gp in zip(node._parents, node._backward(g)):
                if gp is None or not p.requires_grad:
                    continue
                gp = _unbroadcast(np.asarray(gp), p.shape).astype(p.data.dtype, copy=False)
                if not np.all(np.isfinite(gp)):
                    raise NumericError(f"non-finite gradient flowing out of {node._op}")
                prev = grads.get(id(p))
                grads[id(p)] = gp if prev is None else prev + gp

    # -- arithmetic --------------------------------------------------------
    def __add__(self, other):
        if _is_scalar(other):
            c = float(other)
            return Tensor._make(self.data + c, (self,), lambda g: (g,), "add")
        other = _as_tensor(other)
        return Tensor._make(self.data + other.data, (self, other), lambda g: (g, g), "add")

    __radd__ = __add__

    def __sub__(self, other):
        if _is_scalar(other):
            return self + (-float(other))
        other = _as_tensor(other)
        return Tensor._make(self.data - other.data, (self, other), lambda g: (g, -g), "sub")

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if _is_scalar(other):
            c = float(other)
            return Tensor._make(self.data * c, (self,), lambda g: (g * c,), "mul")
        other = _as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(a * b, (self, other), lambda g: (g * b, g * a), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        if _is_scalar(other):
            return self * (1.0 / float(other))
        other = _as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(a / b, (self, other), lambda g: (g / b, -g * a / (b * b)), "div")

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, p: float):
        a = self.data
        return Tensor._make(a**p, (self,), lambda g: (g * p * a ** (p - 1),), "pow")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        a = self.data
        out = a[idx]

        def bw(g):
            full = np.zeros_like(a)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._make(out, (self,), bw, "getitem")

    # -- shape -----------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),), "reshape")

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),), "transpose")

    def swapaxes(self, a1: int, a2: int):
        return Tensor._make(
            np.swapaxes(self.data, a1, a2), (self,), lambda g: (np.swapaxes(g, a1, a2),), "swapaxes"
        )

    # -- reductions --------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False, dtype=None):
        """Sum in float64. Full reductions stay float64; partial ones return
        the input dtype unless ``dtype`` is given."""
        a = self.data
        out = np.sum(a, axis=axis, keepdims=keepdims, dtype=np.float64)
        if dtype is not None:
            out = out.astype(dtype)
        elif axis is not None:
            out = out.astype(a.dtype)
        shape = a.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return Tensor._make(np.asarray(out), (self,), bw, "sum")

    def mean(self, axis=None, keepdims: bool = False, dtype=None):
        n = self.data.size if axis is None else np.prod([self.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims, dtype=dtype) * (1.0 / float(n))

    def max(self, axis=None, keepdims=False):
        a = self.data
        out = a.max(axis=axis, keepdims=keepdims)

        def bw(g):
            m = a.max(axis=axis, keepdims=True)
            mask = (a == m).astype(a.dtype)
            mask /= mask.sum(axis=axis, keepdims=True)
            gg = g if (axis is None or keepdims) else np.expand_dims(g, axis)
            return (mask * gg,)

        return Tensor._make(np.asarray(out), (self,), bw, "max")

    # -- elementwise -----------------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,), "exp")

    def log(self):
        a = self.data
        if np.any(a <= 0):
            raise DomainError("log of non-positive value")
        return Tensor._make(np.log(a), (self,), lambda g: (g / a,), "log")

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: (0.5 * g / out,), "sqrt")

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: (g * (1.0 - out * out),), "tanh")

    def sigmoid(self):
        out = _stable_sigmoid(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out * (1.0 - out),), "sigmoid")

    def silu(self):
        a = self.data
        s = _stable_sigmoid(a)
        return Tensor._make(a * s, (self,), lambda g: (g * (s + a * s * (1.0 - s)),), "silu")

    def gelu(self):
        """tanh approximation; smooth everywhere, which keeps gradient checks honest."""
        a = self.data
        c = np.sqrt(2.0 / np.pi).astype(a.dtype)
        inner = c * (a + 0.044715 * (a * a * a))
        th = np.tanh(inner)
        out = 0.5 * a * (1.0 + th)

        def bw(g):
            dinner = c * (1.0 + 3 * 0.044715 * a * a)
            return (g * (0.5 * (1.0 + th) + 0.5 * a * (1.0 - th * th) * dinner),)

        return Tensor._make(out, (self,), bw, "gelu")

    def relu(self):
        a = self.data
        return Tensor._make(np.maximum(a, 0), (self,), lambda g: (g * (a > 0),), "relu")

    def clip(self, lo: float, hi: float):
        a = self.data
        inside = (a >= lo) & (a <= hi)
        return Tensor._make(np.clip(a, lo, hi), (self,), lambda g: (g * inside,), "clip")


def _stable_sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def tensor(data, requires_grad=False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a @ b`` accumulated in float64.

    ``a`` is (..., m, k); ``b`` is (k, n) or (..., k, n).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    A, B = a.data, b.data
    if A.ndim < 2 or B.ndim < 2 or A.shape[-1] != B.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {A.shape} @ {B.shape}")
    out_dtype = np.result_type(A, B)
    if B.ndim == 2:
        k, n = B.shape
        B64 = B.astype(np.float64)
        A2 = A.reshape(-1, k).astype(np.float64)
        out = (A2 @ B64).reshape(A.shape[:-1] + (n,)).astype(out_dtype)

        def bw(g):
            g2 = g.reshape(-1, n).astype(np.float64)
            ga = (g2 @ B64.T).reshape(A.shape)
            return ga, A2.T @ g2

        return Tensor._make(out, (a, b), bw, "matmul")
    out = np.matmul(A.astype(np.float64), B.astype(np.float64)).astype(out_dtype)

    def bw(g):
        g64 = g.astype(np.float64)
        ga = np.matmul(g64, np.swapaxes(B, -1, -2).astype(np.float64))
        gb = np.matmul(np.swapaxes(A, -1, -2).astype(np.float64), g64)
        return ga, gb

    return Tensor._make(out, (a, b), bw, "matmul")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor._make(out, tuple(tensors), bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._make(out, tuple(tensors), bw, "stack")


def embedding(weight: Tensor, ids) -> Tensor:
    """Row gather ``weight[ids]`` with scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise DimensionError("embedding index out of range")
    W = weight.data

    def bw(g):
        gw = np.zeros_like(W)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, W.shape[1]))
        return (gw,)

    return Tensor._make(W[ids], (weight,), bw, "embedding")


def minimum(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    pick_a = a.data <= b.data
    return Tensor._make(
        np.minimum(a.data, b.data), (a, b), lambda g: (g * pick_a, g * ~pick_a), "minimum"
    )


def where(cond, a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    return Tensor._make(
        np.where(cond, a.data, b.data), (a, b), lambda g: (g * cond, g * ~cond), "where"
    )


def softmax(logits: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Temperature softmax with max subtraction."""
    if temperature <= 0:
        raise DomainError("softmax temperature must be positive")
    x = _as_tensor(logits)
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax of non-finite logits")
    z = (x.data - x.data.max(axis=axis, keepdims=True)) / temperature
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True, dtype=np.float64).astype(e.dtype)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)) / temperature,)

    return Tensor._make(y, (x,), bw, "softmax")


def log_softmax(logits: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    if temperature <= 0:
        raise DomainError("softmax temperature must be positive")
    x = _as_tensor(logits)
    z = (x.data - x.data.max(axis=axis, keepdims=True)) / temperature
    lse = np.log(np.exp(z.astype(np.float64)).sum(axis=axis, keepdims=True))
    out = (z - lse).astype(x.data.dtype)

    def bw(g):
        p = np.exp(out)
        return ((g - p * g.sum(axis=axis, keepdims=True)) / temperature,)

    return Tensor._make(out, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    a = x.data
    mu = a.mean(axis=-1, keepdims=True, dtype=np.float64)
    var = ((a - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((a - mu) * inv).astype(a.dtype)
    G, B = gain.data, bias.data
    out = xhat * G + B
    n = a.shape[-1]

    def bw(g):
        gx_hat = g * G
        gx = (inv / n) * (
            n * gx_hat - gx_hat.sum(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True)
        )
        red = tuple(range(a.ndim - 1))
        return gx.astype(a.dtype), (g * xhat).sum(axis=red), g.sum(axis=red)

    return Tensor._make(out, (x, gain, bias), bw, "layer_norm")


def gaussian_log_density(x, mean, variance: float, axis=None) -> Tensor:
    """Isotropic Gaussian log-density, summed over ``axis`` (all axes by default).

    Returns ``sum(-(x - mean)^2 / (2 var) - 0.5 log(2 pi var))`` in float64.
    """
    variance = float(variance)
    if not variance > 0:
        raise DomainError(f"variance must be positive, got {variance}")
    x, mean = _as_tensor(x), _as_tensor(mean)
    diff = x.data.astype(np.float64) - mean.data.astype(np.float64)
    n = diff.size if axis is None else diff.shape[axis]
    out = np.sum(diff * diff, axis=axis) * (-0.5 / variance) - 0.5 * n * np.log(2.0 * np.pi * variance)

    def bw(g):
        g = g if axis is None else np.expand_dims(g, axis)
        gx = -g * diff / variance
        return gx, -gx

    return Tensor._make(np.asarray(out), (x, mean), bw, "gaussian_log_density")


def global_norm(arrays: Iterable[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(a, dtype=np.float64))) for a in arrays)))
