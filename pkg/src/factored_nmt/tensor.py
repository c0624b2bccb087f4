"""Dense tensors with reverse-mode automatic differentiation.

Everything the models compute runs through the ops in this module. A
``Tensor`` wraps a numpy array plus an optional gradient buffer; ops record
their inputs and a backward closure, and ``Tensor.backward`` replays the
implicit graph in reverse topological order. Training runs in float32,
gradient checking in float64 (see ``gradcheck``).

A graph and its intermediate tensors belong to one thread. Parameter
tensors are never mutated by forward/backward except for gradient
accumulation into ``.grad``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

# Additive pre-softmax bias for masked attention positions. Large enough
# that exp() underflows to exactly 0.0 after max-subtraction, so masked
# positions get exactly zero attention weight.
NEG_INF = -1e9


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference / evaluation paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional float array with optional gradient accumulation."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable[[], None]] = None

    # -- introspection -----------------------------------------------------

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

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{req}{nm})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- autodiff core -----------------------------------------------------

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Backpropagate from this tensor through the recorded graph.

        Scalar outputs are seeded with 1.0; non-scalar outputs need an
        explicit seed gradient of the same shape.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() on non-scalar output requires a seed gradient")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} != output shape {self.data.shape}")
        self._accumulate(grad)
        for node in reversed(_toposort(self)):
            if node._backward is not None:
                node._backward()

    def __hash__(self):  # identity-based; tensors live in sets/dicts during toposort
        return id(self)

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_coerce(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_coerce(other, self.dtype), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        return div(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape / reduction sugar --------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)


def _toposort(root: Tensor) -> list:
    order: list = []
    seen: set = set()
    stack: list = [(root, False)]
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
    return order


def _coerce(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[], None]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gs, ts) in enumerate(zip(g.shape, shape)):
        if ts == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise ops --------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a.dtype)
    data = a.data + b.data
    out = _make(data, (a, b), lambda: None)

    def backward():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad, b.shape))

    out._backward = backward if out.requires_grad else None
    return out


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a.dtype)
    data = a.data * b.data
    out = _make(data, (a, b), lambda: None)

    def backward():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad * a.data, b.shape))

    out._backward = backward if out.requires_grad else None
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    b = _coerce(b, a.dtype)
    data = a.data / b.data
    out = _make(data, (a, b), lambda: None)

    def backward():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-out.grad * a.data / (b.data * b.data), b.shape))

    out._backward = backward if out.requires_grad else None
    return out


def power(a: Tensor, exponent: float) -> Tensor:
    data = a.data ** exponent
    out = _make(data, (a,), lambda: None)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * exponent * a.data ** (exponent - 1))

    out._backward = backward if out.requires_grad else None
    return out


def texp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    out = _make(data, (a,), lambda: None)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * data)

    out._backward = backward if out.requires_grad else None
    return out


def tlog(a: Tensor) -> Tensor:
    data = np.log(a.data)
    out = _make(data, (a,), lambda: None)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad / a.data)

    out._backward = backward if out.requires_grad else None
    return out


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)
    out = _make(data, (a,), lambda: None)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * (a.data > 0))

    out._backward = backward if out.requires_grad else None
    return out


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout: scales kept units by 1/(1-p) so inference is a no-op.

    ``rng=None`` or ``p=0`` means evaluation mode (identity).
    """
    if rng is None or p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / np.asarray(1.0 - p, dtype=x.dtype)
    return mul(x, Tensor(keep))


# -- shape ops ---------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)
    out = _make(data, (a,), lambda: None)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad.reshape(a.shape))

    out._backward = backward if out.requires_grad else None
    return out


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    data = np.swapaxes(a.data, ax1, ax2)
    out = _make(data, (a,), lambda: None)

    def backward():
        if a.requires_grad:
            a._accumulate(np.swapaxes(out.grad, ax1, ax2))

    out._backward = backward if out.requires_grad else None
    return out


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ValueError("concat requires at least one tensor")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    out = _make(data, tuple(tensors), lambda: None)
    sizes = [t.shape[axis] for t in tensors]

    def backward():
        offset = 0
        for t, size in zip(tensors, sizes):
            if t.requires_grad:
                index = [slice(None)] * out.grad.ndim
                index[axis] = slice(offset, offset + size)
                t._accumulate(out.grad[tuple(index)])
            offset += size

    out._backward = backward if out.requires_grad else None
    return out


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)
    out = _make(data, (a,), lambda: None)

    def backward():
        if a.requires_grad:
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape).copy() if g.shape != a.shape else g)

    out._backward = backward if out.requires_grad else None
    return out


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, batched over leading dimensions like numpy ``@``.

    Backward follows dA = dC·Bᵀ, dB = Aᵀ·dC (transposing the last two
    axes), with broadcast leading dimensions summed out.
    """
    b = _coerce(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.shape} @ {b.shape}")
    data = a.data @ b.data
    out = _make(data, (a, b), lambda: None)

    def backward():
        if a.requires_grad:
            ga = out.grad @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ out.grad
            b._accumulate(_unbroadcast(gb, b.shape))

    out._backward = backward if out.requires_grad else None
    return out


# -- fused neural ops ---------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along ``axis`` (max-subtraction)."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _make(y, (x,), lambda: None)

    def backward():
        if x.requires_grad:
            g = out.grad
            x._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    out._backward = backward if out.requires_grad else None
    return out


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    logp = shifted - lse
    out = _make(logp, (x,), lambda: None)

    def backward():
        if x.requires_grad:
            g = out.grad
            x._accumulate(g - np.exp(logp) * g.sum(axis=axis, keepdims=True))

    out._backward = backward if out.requires_grad else None
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta shape {gamma.shape}/{beta.shape} != ({d},)")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = centered * inv_std
    out = _make(xhat * gamma.data + beta.data, (x, gamma, beta), lambda: None)

    def backward():
        g = out.grad
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=tuple(range(g.ndim - 1))))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=tuple(range(g.ndim - 1))))
        if x.requires_grad:
            gx_hat = g * gamma.data
            # d/dx of (x - mean) * inv_std, jointly over mean and variance
            x._accumulate(inv_std * (
                gx_hat
                - gx_hat.mean(axis=-1, keepdims=True)
                - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
            ))

    out._backward = backward if out.requires_grad else None
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; backward scatter-adds into the table."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embedding ids out of range [0, {table.shape[0]}): min={ids.min()}, max={ids.max()}"
        )
    data = table.data[ids]
    out = _make(data, (table,), lambda: None)

    def backward():
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            flat_g = out.grad.reshape(-1, table.shape[-1])
            np.add.at(table.grad, ids.reshape(-1), flat_g)

    out._backward = backward if out.requires_grad else None
    return out


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """Select one entry along the last axis per position: ``x[..., index]``."""
    index = np.asarray(index)
    if index.shape != x.shape[:-1]:
        raise ShapeError(f"pick: index shape {index.shape} != {x.shape[:-1]}")
    expanded = index[..., None]
    data = np.take_along_axis(x.data, expanded, axis=-1)[..., 0]
    out = _make(data, (x,), lambda: None)

    def backward():
        if x.requires_grad:
            g = np.zeros_like(x.data)
            np.put_along_axis(g, expanded, out.grad[..., None], axis=-1)
            x._accumulate(g)

    out._backward = backward if out.requires_grad else None
    return out


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    num_heads: int,
    mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Scaled dot-product attention over ``num_heads`` heads.

    ``q``/``k``/``v`` are already-projected activations of shape
    ``(..., len, d)`` with ``d`` divisible by ``num_heads``. ``mask`` is an
    additive bias broadcastable to ``(..., heads, len_q, len_k)``; masked
    positions carry ``NEG_INF`` and end up with exactly zero weight.
    """
    d = q.shape[-1]
    if d % num_heads != 0:
        raise ShapeError(f"model width {d} not divisible by {num_heads} heads")
    if k.shape[-1] != d or v.shape[-1] != d:
        raise ShapeError(f"attention q/k/v widths differ: {q.shape[-1]}/{k.shape[-1]}/{v.shape[-1]}")
    head_dim = d // num_heads

    def split(t: Tensor) -> Tensor:
        return swapaxes(reshape(t, t.shape[:-1] + (num_heads, head_dim)), -2, -3)

    qh, kh, vh = split(q), split(k), split(v)  # (..., heads, len, head_dim)
    scores = mul(matmul(qh, swapaxes(kh, -1, -2)), 1.0 / np.sqrt(head_dim))
    if mask is not None:
        scores = add(scores, Tensor(np.asarray(mask, dtype=q.dtype)))
    weights = softmax(scores, axis=-1)
    ctx = matmul(weights, vh)  # (..., heads, len_q, head_dim)
    merged = swapaxes(ctx, -2, -3)
    return reshape(merged, merged.shape[:-2] + (d,))
