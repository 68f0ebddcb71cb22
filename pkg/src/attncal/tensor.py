"""Float64 tensors with a dynamically recorded reverse-mode autodiff graph.

Only the operations the toy transformer needs are differentiable. Data is a
C-contiguous ``numpy.ndarray`` so the row-major layout is fixed for
serialization.
"""

from __future__ import annotations

import contextlib
import struct
import threading
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

_state = threading.local()

MAGIC = b"ACTN"
FORMAT_VERSION = 1


def is_grad_enabled() -> bool:
    return getattr(_state, "grad", True)


def is_row_stable() -> bool:
    return getattr(_state, "row_stable", False)


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


@contextlib.contextmanager
def row_stable(enabled: bool = True):
    """Select matmul kernels whose per-element summation order is fixed.

    Under this mode each output row of ``a @ b`` is bit-identical no matter
    how many other rows ``a`` has, and trailing zero columns of ``a`` (with
    matching rows of ``b``) leave results unchanged. BLAS gives neither
    guarantee, which breaks bitwise causality checks.
    """
    prev = is_row_stable()
    _state.row_stable = enabled
    try:
        yield
    finally:
        _state.row_stable = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        name: str | None = None,
    ):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
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
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
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
                grads[key] = pg if key not in grads else grads[key] + pg

    # arithmetic -----------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return _make(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return self + (-as_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) + (-self)

    def __neg__(self) -> "Tensor":
        return _make(-self.data, (self,), lambda g: (-g,))

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        return _make(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return self * other**-1.0
        return self * (1.0 / float(other))

    def __pow__(self, exponent: float) -> "Tensor":
        x = self.data
        p = float(exponent)
        return _make(x**p, (self,), lambda g: (g * p * x ** (p - 1.0),))

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    # reductions and shape -------------------------------------------------

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _make(self.data.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return _make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes) -> "Tensor":
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return _make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),))

    def swap_last(self) -> "Tensor":
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return self.transpose(*axes)

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return _make(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        x = self.data
        return _make(np.log(x), (self,), lambda g: (g / x,))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data, parents: tuple[Tensor, ...], backward) -> Tensor:
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(data)


# kernels -------------------------------------------------------------------


def _stable_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if b.ndim == 2:
        # one gemv-shaped product per row: identical kernel whatever the row count
        return np.matmul(a[..., None, :], b)[..., 0, :]
    shape = np.broadcast_shapes(a.shape[:-2], b.shape[:-2]) + (a.shape[-2], b.shape[-1])
    out = np.zeros(shape)
    for k in range(a.shape[-1]):
        out += a[..., :, k : k + 1] * b[..., k : k + 1, :]
    return out


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if is_row_stable():
        return _stable_matmul(a, b)
    if b.ndim == 2 and a.ndim > 2:
        return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + (b.shape[-1],))
    return np.matmul(a, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batching over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(
            f"matmul shape mismatch: {a.shape} @ {b.shape} "
            f"(inner extents {a.shape[-1] if a.ndim else None} vs "
            f"{b.shape[-2] if b.ndim >= 2 else None})"
        )
    ad, bd = a.data, b.data

    def back(g):
        if bd.ndim == 2:
            ga = (g.reshape(-1, g.shape[-1]) @ bd.T).reshape(ad.shape)
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _make(_mm(ad, bd), (a, b), back)


def softmax_last_axis(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction.

    Entries equal to ``-inf`` receive probability exactly 0. The normalizer is
    a left-to-right cumulative sum so trailing zeros never change a row.
    """
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise ValueError("softmax input contains NaN")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / np.cumsum(e, axis=-1)[..., -1:]

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (x,), back)


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    keep = ~np.broadcast_to(mask, x.shape)
    return _make(np.where(keep, x.data, value), (x,), lambda g: (g * keep,))


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    shape = weight.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (out,)

    return _make(weight.data[ids], (weight,), back)


def rotary(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate adjacent pairs ``(x[2j], x[2j+1])`` by the given angles.

    ``cos`` and ``sin`` broadcast against ``x[..., ::2]``.
    """
    xe, xo = x.data[..., 0::2], x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos

    def back(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = go * cos - ge * sin
        return (gx,)

    return _make(out, (x,), back)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    t = np.tanh(_GELU_C * (v + 0.044715 * v * v * v))

    def back(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * dt),)

    return _make(0.5 * v * (1.0 + t), (x,), back)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    ms = (x * x).mean(axis=-1, keepdims=True)
    return x * (ms + eps) ** -0.5 * gain


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Weighted mean negative log-likelihood over the leading positions.

    ``logits`` is ``[..., vocab]``; ``targets`` and ``weights`` match the
    leading shape. Zero-weight positions contribute nothing.
    """
    logits = as_tensor(logits)
    z = logits.data.reshape(-1, logits.shape[-1])
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    w = np.ones(len(tgt)) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy needs at least one positively weighted position")
    shifted = z - z.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=-1))
    rows = np.arange(len(tgt))
    nll = logsum - shifted[rows, tgt]
    loss = float((w * nll).sum() / total)

    def back(g):
        p = np.exp(shifted - logsum[:, None])
        p[rows, tgt] -= 1.0
        return ((p * (w / total)[:, None] * g).reshape(logits.shape),)

    return _make(np.array(loss), (logits,), back)


# serialization -------------------------------------------------------------


def tensor_to_bytes(data: np.ndarray | Tensor) -> bytes:
    arr = data.data if isinstance(data, Tensor) else np.asarray(data, dtype=np.float64)
    header = MAGIC + bytes([FORMAT_VERSION]) + struct.pack("<Q", arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise ValueError("not a tensor payload (bad magic)")
    if blob[4] != FORMAT_VERSION:
        raise ValueError(f"unsupported tensor format version {blob[4]}")
    (ndim,) = struct.unpack_from("<Q", blob, 5)
    shape = struct.unpack_from(f"<{ndim}Q", blob, 13)
    offset = 13 + 8 * ndim
    count = int(np.prod(shape, dtype=np.int64))
    if len(blob) - offset != 8 * count:
        raise ValueError(f"payload size {len(blob) - offset} does not match shape {shape}")
    return np.frombuffer(blob, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)


def save_tensor(path: str | Path, data: np.ndarray | Tensor) -> None:
    Path(path).write_bytes(tensor_to_bytes(data))


def load_tensor(path: str | Path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    return float(np.sqrt(sum(float((p.grad**2).sum()) for p in params if p.grad is not None)))
