"""Reverse-mode automatic differentiation over dense numpy arrays.

The graph is built eagerly: every op returns a Tensor holding its value,
references to its parent Tensors, and a closure that pushes adjoints back
into the parents. ``backward(loss)`` topologically orders the graph and runs
the closures once each, so multi-path contributions accumulate by summation.

Storage defaults to float32; reductions accumulate in float64 and cast back.
Graph construction and backward are single-threaded per graph instance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible, with a dimension report."""


class Tensor:
    """A node in the computation graph.

    value lives in ``data``; the adjoint accumulates in ``grad`` (same shape,
    zero-initialized). Leaves have no parents and no backward rule.
    """

    __slots__ = ("data", "grad", "parents", "_backward")

    def __init__(self, data, parents=(), backward=None):
        self.data = data
        self.grad = np.zeros_like(data)
        self.parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    def item(self) -> float:
        return float(self.data)


def tensor(data, dtype=None) -> Tensor:
    """Create a leaf tensor. Python scalars/lists default to float32; float
    ndarrays keep their dtype."""
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype.kind != "f":
        arr = arr.astype(DEFAULT_DTYPE)
    elif dtype is None and not isinstance(data, np.ndarray):
        arr = arr.astype(DEFAULT_DTYPE)
    return Tensor(arr)


def constant(data, dtype=None) -> np.ndarray:
    """Coerce raw values to a float ndarray without entering the graph."""
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype.kind != "f":
        arr = arr.astype(DEFAULT_DTYPE)
    return arr


def detach(a: Tensor) -> Tensor:
    """A new leaf sharing ``a``'s value; gradient flow stops here."""
    return Tensor(a.data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` along broadcast axes."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.astype(grad.dtype, copy=False)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data, (a, b))

    def backward():
        a.grad += _unbroadcast(out.grad, a.data.shape)
        b.grad += _unbroadcast(out.grad, b.data.shape)

    out._backward = backward
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data, (a, b))

    def backward():
        a.grad += _unbroadcast(out.grad, a.data.shape)
        b.grad -= _unbroadcast(out.grad, b.data.shape)

    out._backward = backward
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data, (a, b))

    def backward():
        a.grad += _unbroadcast(out.grad * b.data, a.data.shape)
        b.grad += _unbroadcast(out.grad * a.data, b.data.shape)

    out._backward = backward
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, (a,))

    def backward():
        a.grad -= out.grad

    out._backward = backward
    return out


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python constant (not a graph node)."""
    s = float(s)
    out = Tensor(a.data * np.asarray(s, dtype=a.data.dtype), (a,))

    def backward():
        a.grad += out.grad * s

    out._backward = backward
    return out


def add_const(a: Tensor, c) -> Tensor:
    out = Tensor(a.data + np.asarray(c, dtype=a.data.dtype), (a,))

    def backward():
        a.grad += out.grad

    out._backward = backward
    return out


def maximum_const(a: Tensor, c: float) -> Tensor:
    """Elementwise max(a, c); gradient passes only where a > c."""
    c = float(c)
    mask = a.data > c
    out = Tensor(np.where(mask, a.data, np.asarray(c, dtype=a.data.dtype)), (a,))

    def backward():
        a.grad += out.grad * mask

    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# nonlinearities


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y, (a,))

    def backward():
        a.grad += out.grad * (1.0 - y * y)

    out._backward = backward
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = sigmoid_np(a.data)
    out = Tensor(y, (a,))

    def backward():
        a.grad += out.grad * (y * (1.0 - y))

    out._backward = backward
    return out


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = Tensor(y, (a,))

    def backward():
        a.grad += out.grad * y

    out._backward = backward
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data), (a,))

    def backward():
        a.grad += out.grad / a.data

    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim not in (1, 2) or b.data.ndim != 2:
        raise ShapeError(f"matmul expects (n,)|(B,n) @ (n,m); got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data, (a, b))

    def backward():
        g = out.grad
        if a.data.ndim == 1:
            a.grad += g @ b.data.T
            b.grad += np.outer(a.data, g)
        else:
            a.grad += g @ b.data.T
            b.grad += a.data.T @ g

    out._backward = backward
    return out


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b for x of shape (n,) or (B, n), w (n, m), b (m,)."""
    if x.data.shape[-1] != w.data.shape[0] or w.data.shape[1] != b.data.shape[-1]:
        raise ShapeError(
            f"affine dims incompatible: x{x.data.shape} @ w{w.data.shape} + b{b.data.shape}"
        )
    out = Tensor(x.data @ w.data + b.data, (x, w, b))

    def backward():
        g = out.grad
        x.grad += g @ w.data.T
        if x.data.ndim == 1:
            w.grad += np.outer(x.data, g)
            b.grad += g
        else:
            w.grad += x.data.T @ g
            b.grad += g.sum(axis=0, dtype=np.float64).astype(b.data.dtype)

    out._backward = backward
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), (a,))

    def backward():
        a.grad += out.grad.reshape(a.data.shape)

    out._backward = backward
    return out


def concat(parts: list[Tensor], axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis), tuple(parts))
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward():
        for p, g in zip(parts, np.split(out.grad, splits, axis=axis)):
            p.grad += g

    out._backward = backward
    return out


def broadcast_rows(a: Tensor, n: int) -> Tensor:
    """Tile a (D,) or (1, D) tensor to (n, D); backward sums over rows."""
    row = a.data.reshape(1, -1) if a.data.ndim == 1 else a.data
    out = Tensor(np.repeat(row, n, axis=0), (a,))

    def backward():
        a.grad += out.grad.sum(axis=0, dtype=np.float64).astype(a.data.dtype).reshape(a.data.shape)

    out._backward = backward
    return out


def sum_(a: Tensor, axis=None) -> Tensor:
    out_data = np.sum(a.data, axis=axis, dtype=np.float64).astype(a.data.dtype)
    out = Tensor(out_data, (a,))

    def backward():
        g = out.grad
        if axis is not None:
            g = np.expand_dims(g, axis)
        a.grad += np.broadcast_to(g, a.data.shape)

    out._backward = backward
    return out


def mean(a: Tensor, axis=None) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    return scale(sum_(a, axis=axis), 1.0 / count)


# ---------------------------------------------------------------------------
# stable fused losses


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise Bernoulli negative log-likelihood, numerically stable.

    ``targets`` is a constant array in [0, 1]; callers reduce the result.
    """
    t = constant(targets)
    x = logits.data
    loss = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    out = Tensor(loss.astype(x.dtype), (logits,))

    def backward():
        logits.grad += out.grad * (sigmoid_np(x) - t)

    out._backward = backward
    return out


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = np.max(a.data, axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True, dtype=np.float64)).astype(
        a.data.dtype
    )
    y = shifted - lse
    out = Tensor(y, (a,))

    def backward():
        g = out.grad
        p = np.exp(y)
        a.grad += g - p * g.sum(axis=axis, keepdims=True)

    out._backward = backward
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    p = softmax_np(a.data, axis=axis)
    out = Tensor(p, (a,))

    def backward():
        g = out.grad
        a.grad += p * (g - (g * p).sum(axis=axis, keepdims=True))

    out._backward = backward
    return out


def softmax_np(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(logits, axis=axis, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every node reachable from ``loss``.

    The loss must be scalar (size 1). Grads are reset first, so repeated
    calls do not accumulate across passes.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar loss; got shape {loss.data.shape}")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))

    for node in order:
        node.grad[...] = 0.0
    loss.grad[...] = 1.0
    for node in reversed(order):
        if node._backward is not None:
            node._backward()


def grad_norm(tensors) -> float:
    total = 0.0
    for t in tensors:
        total += float(np.sum(np.square(t.grad, dtype=np.float64)))
    return float(np.sqrt(total))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """First/second moment estimates plus the shared step counter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    skipped: int = 0


def adam_update(
    params: dict[str, Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected adaptive update applied in place to ``params``.

    Arrays with non-finite gradients are skipped for this step and the
    incident is logged; their moments still decay.
    """
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        finite = np.all(np.isfinite(g))
        if not finite:
            state.skipped += 1
            logger.warning("adam_update: non-finite gradient for %s; update skipped", name)
            g = np.zeros_like(g)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        if finite:
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
