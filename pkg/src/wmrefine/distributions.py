"""Grouped categorical distributions with straight-through sampling.

Logits are shaped ``(..., groups, classes)``. Divergence and entropy reduce
over both the class and group axes, leaving any batch axes intact; an
unbatched input therefore yields a scalar.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, softmax_np

PROB_FLOOR = 1e-8  # probabilities are clamped here before any log


@dataclass
class Categorical:
    """A set of independent categorical groups parameterized by logits."""

    logits: Tensor

    def __post_init__(self):
        if self.logits.data.ndim < 2:
            raise ShapeError(f"categorical logits need (..., G, C); got {self.logits.data.shape}")
        if self.logits.data.shape[-1] < 2:
            raise ShapeError(f"categorical needs >= 2 classes; got {self.logits.data.shape}")

    @property
    def groups(self) -> int:
        return self.logits.data.shape[-2]

    @property
    def classes(self) -> int:
        return self.logits.data.shape[-1]

    def probs(self) -> np.ndarray:
        return softmax_np(self.logits.data)


def _clamped_log(p: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(p, PROB_FLOOR))


def categorical_mode(dist: Categorical) -> np.ndarray:
    """One-hot at the argmax logit per group; ties break to the lowest index."""
    logits = dist.logits.data
    idx = np.argmax(logits, axis=-1)
    out = np.zeros_like(logits)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def categorical_sample_st(dist: Categorical, rng: np.random.Generator) -> Tensor:
    """One-hot sample per group with a straight-through backward rule.

    Forward value is the sampled one-hot; the backward rule propagates into
    the logits as if the output had been the softmax probabilities.
    """
    logits = dist.logits
    p = softmax_np(logits.data)
    u = rng.random(p.shape[:-1])
    cum = np.cumsum(p, axis=-1)
    idx = np.minimum((u[..., None] > cum).sum(axis=-1), p.shape[-1] - 1)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    out = Tensor(onehot, (logits,))

    def backward():
        g = out.grad
        logits.grad += p * (g - (g * p).sum(axis=-1, keepdims=True))

    out._backward = backward
    return out


def kl_categorical_per_group(q: Categorical, p: Categorical) -> Tensor:
    """KL(q || p) per group, shape (..., G); see kl_categorical.

    Probabilities are clamped to PROB_FLOOR before logs, so degenerate
    distributions stay finite.
    """
    if q.logits.data.shape != p.logits.data.shape:
        raise ShapeError(
            f"kl_categorical shape mismatch: q{q.logits.data.shape} vs p{p.logits.data.shape}"
        )
    ql, pl = q.logits, p.logits
    qp = softmax_np(ql.data)
    pp = softmax_np(pl.data)
    diff = _clamped_log(qp) - _clamped_log(pp)
    per_group = np.sum(qp * diff, axis=-1, dtype=np.float64).astype(ql.data.dtype)
    out = Tensor(per_group, (ql, pl))

    def backward():
        g = np.asarray(out.grad)[..., None]
        ql.grad += g * qp * (diff - per_group[..., None])
        pl.grad += g * (pp - qp)

    out._backward = backward
    return out


def kl_categorical(q: Categorical, p: Categorical) -> Tensor:
    """KL(q || p) summed over groups and classes; batch axes survive."""
    from .autodiff import sum_

    return sum_(kl_categorical_per_group(q, p), axis=-1)


def entropy_categorical(dist: Categorical) -> Tensor:
    """Shannon entropy in nats, summed over groups; lies in [0, G ln C]."""
    logits = dist.logits
    p = softmax_np(logits.data)
    lp = _clamped_log(p)
    per_group = -np.sum(p * lp, axis=-1, dtype=np.float64)
    value = per_group.sum(axis=-1).astype(logits.data.dtype)
    out = Tensor(np.asarray(value), (logits,))

    def backward():
        g = np.asarray(out.grad)[..., None, None]
        logits.grad += g * (-p) * (lp + per_group[..., None].astype(logits.data.dtype))

    out._backward = backward
    return out
