"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op records its parents and a closure mapping the output gradient to
one gradient per parent. ``Tensor.backward`` walks the graph in reverse
topological order and accumulates into the ``grad`` buffers of leaves.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "matmul",
    "softmax_rows",
    "log_softmax_rows",
    "layer_norm",
    "activation",
    "relu",
    "gelu",
    "depthwise_conv1d",
    "context_gather",
    "reduce_mean_std",
    "l2_normalize",
    "concat",
    "broadcast_to",
    "finite_diff_grad",
]

LN_EPS = 1e-5
STD_EPS = 1e-5

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- autodiff ---------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other) -> Tensor:
        other = _as_tensor(other)
        a, b = self, other

        def bw(g):
            ga = _unbroadcast(g, a.shape) if a.requires_grad else None
            gb = _unbroadcast(g, b.shape) if b.requires_grad else None
            return ga, gb

        return Tensor._from_op(a.data + b.data, (a, b), bw)

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        other = _as_tensor(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return Tensor._from_op(a.data - b.data, (a, b), bw)

    def __rsub__(self, other) -> Tensor:
        return _as_tensor(other) - self

    def __mul__(self, other) -> Tensor:
        other = _as_tensor(other)
        a, b = self, other

        def bw(g):
            ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
            gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
            return ga, gb

        return Tensor._from_op(a.data * b.data, (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        other = _as_tensor(other)
        a, b = self, other

        def bw(g):
            return (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            )

        return Tensor._from_op(a.data / b.data, (a, b), bw)

    def __rtruediv__(self, other) -> Tensor:
        return _as_tensor(other) / self

    def __neg__(self) -> Tensor:
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float) -> Tensor:
        a = self

        def bw(g):
            return (g * exponent * a.data ** (exponent - 1),)

        return Tensor._from_op(a.data**exponent, (a,), bw)

    def __matmul__(self, other) -> Tensor:
        return matmul(self, other)

    # -- shape ops --------------------------------------------------------
    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        return Tensor._from_op(self.data.reshape(shape), (self,), lambda g: (g.reshape(src),))

    def transpose(self) -> Tensor:
        """Swap the last two axes."""
        return Tensor._from_op(
            np.swapaxes(self.data, -1, -2), (self,), lambda g: (np.swapaxes(g, -1, -2),)
        )

    @property
    def T(self) -> Tensor:
        return self.transpose()

    def __getitem__(self, idx) -> Tensor:
        src = self.shape

        basic = _is_basic_index(idx)

        def bw(g):
            out = np.zeros(src)
            if basic:
                out[idx] = g
            else:
                np.add.at(out, idx, g)
            return (out,)

        return Tensor._from_op(self.data[idx], (self,), bw)

    # -- reductions / elementwise ----------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        src = self.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, src).copy(),)

        return Tensor._from_op(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), bw)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        if axis is None:
            n = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def exp(self) -> Tensor:
        y = np.exp(self.data)
        return Tensor._from_op(y, (self,), lambda g: (g * y,))

    def log(self) -> Tensor:
        x = self.data
        return Tensor._from_op(np.log(x), (self,), lambda g: (g / x,))

    def sqrt(self) -> Tensor:
        y = np.sqrt(self.data)
        return Tensor._from_op(y, (self,), lambda g: (g * 0.5 / y,))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(Ellipsis), type(None))) for i in items)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


# ---------------------------------------------------------------------------
# primitive ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (numpy broadcasting)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    # fold leading axes of a when b is a plain matrix: one GEMM instead of many
    if b.ndim == 2 and a.ndim > 2:
        lead = a.shape[:-1]
        flat = a.data.reshape(-1, a.shape[-1])
        out = (flat @ b.data).reshape(*lead, b.shape[-1])

        def bw_fold(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = flat.T @ g2 if b.requires_grad else None
            return ga, gb

        return Tensor._from_op(out, (a, b), bw_fold)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor._from_op(a.data @ b.data, (a, b), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(out, tuple(tensors), bw)


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape
    return Tensor._from_op(
        np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, src),)
    )


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis with max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(y, (x,), bw)


def log_softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return Tensor._from_op(y, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis with population variance, then affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm affine shape mismatch: x {x.shape}, gamma {gamma.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gxhat = g * gamma.data
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._from_op(out, (x, gamma, beta), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
    return Tensor._from_op(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "gelu":
        return gelu(x)
    raise ValueError(f"unknown activation {kind!r}")


def depthwise_conv1d(x: Tensor, kernel: Tensor) -> Tensor:
    """Same-length depthwise cross-correlation over the time axis.

    ``x`` is ``(..., L, d)``, ``kernel`` is ``(k, d)`` with ``k`` odd; each
    channel is zero-padded by ``(k - 1) // 2`` on both sides.
    """
    k, d = kernel.shape
    if k % 2 == 0:
        raise ValueError(f"depthwise_conv1d kernel size must be odd, got {k}")
    if x.shape[-1] != d:
        raise ValueError(f"channel mismatch: x {x.shape}, kernel {kernel.shape}")
    L = x.shape[-2]
    r = (k - 1) // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(r, r), (0, 0)]
    xp = np.pad(x.data, pad)
    w = kernel.data
    out = np.zeros(x.shape)
    for j in range(k):
        out = out + xp[..., j : j + L, :] * w[j]

    def bw(g):
        gxp = np.zeros(xp.shape)
        gw = np.zeros((k, d))
        lead = tuple(range(g.ndim - 1))
        for j in range(k):
            gxp[..., j : j + L, :] += g * w[j]
            gw[j] = (g * xp[..., j : j + L, :]).sum(axis=lead)
        return gxp[..., r : r + L, :], gw

    return Tensor._from_op(out, (x, kernel), bw)


def context_gather(x: Tensor, offsets: Sequence[int]) -> Tensor:
    """Stack frames ``t + c`` for each offset ``c`` along the feature axis.

    Frames outside ``[0, T)`` read as zeros, so ``T`` is preserved.
    """
    T, F = x.shape[-2], x.shape[-1]
    r = max(abs(c) for c in offsets)
    pad = [(0, 0)] * (x.ndim - 2) + [(r, r), (0, 0)]
    xp = np.pad(x.data, pad)
    out = np.concatenate([xp[..., r + c : r + c + T, :] for c in offsets], axis=-1)

    def bw(g):
        gxp = np.zeros(xp.shape)
        for i, c in enumerate(offsets):
            gxp[..., r + c : r + c + T, :] += g[..., i * F : (i + 1) * F]
        return (gxp[..., r : r + T, :],)

    return Tensor._from_op(out, (x,), bw)


def reduce_mean_std(x: Tensor, eps: float = STD_EPS) -> tuple[Tensor, Tensor]:
    """Population mean and standard deviation over the time axis (-2).

    The forward std is exact; its backward divides by ``max(std, sqrt(eps))``
    so the gradient stays finite when a channel is constant.
    """
    L = x.shape[-2]
    if L < 1:
        raise ValueError("reduce_mean_std needs at least one frame")
    mean_arr = x.data.sum(axis=-2) / L
    xc = x.data - mean_arr[..., None, :]
    var = (xc * xc).sum(axis=-2) / L
    std_arr = np.sqrt(var)
    denom = np.maximum(std_arr, math.sqrt(eps))

    mean = Tensor._from_op(
        mean_arr, (x,), lambda g: (np.broadcast_to(g[..., None, :] / L, x.shape).copy(),)
    )

    def bw_std(g):
        return ((g / denom)[..., None, :] * xc / L,)

    std = Tensor._from_op(std_arr, (x,), bw_std)
    return mean, std


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale rows (last axis) to unit norm; norms below ``eps`` are clamped to ``eps``."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    clamped = norm < eps
    n = np.maximum(norm, eps)
    y = x.data / n

    def bw(g):
        gx = (g - y * (g * y).sum(axis=-1, keepdims=True)) / n
        return (np.where(clamped, g / eps, gx),)

    return Tensor._from_op(y, (x,), bw)


# ---------------------------------------------------------------------------
# test oracle


def finite_diff_grad(f: Callable[[], float], params: Sequence[Tensor], h: float = 1e-5):
    """Central-difference gradient of ``f`` w.r.t. each tensor in ``params``.

    ``f`` takes no arguments and reads the parameters' current data, which
    is perturbed in place and restored coordinate by coordinate.
    """
    out = []
    with no_grad():
        for p in params:
            g = np.zeros(p.shape)
            flat = p.data.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f())
                flat[i] = orig - h
                fm = float(f())
                flat[i] = orig
                gflat[i] = (fp - fm) / (2.0 * h)
            out.append(g)
    return out
