"""Shared test oracles: central-difference gradient checking."""

import numpy as np

from wmrefine.autodiff import Tensor, backward


def finite_diff(fn, leaves, h=1e-5):
    """Central-difference gradients of scalar fn(*leaf arrays) per leaf."""
    grads = []
    for leaf in leaves:
        g = np.zeros_like(leaf)
        it = np.nditer(leaf, flags=["multi_index"])
        while not it.finished:
            i = it.multi_index
            orig = leaf[i]
            leaf[i] = orig + h
            up = fn(*leaves)
            leaf[i] = orig - h
            dn = fn(*leaves)
            leaf[i] = orig
            g[i] = (up - dn) / (2 * h)
            it.iternext()
        grads.append(g)
    return grads


def check_grads(build, arrays, rtol=1e-5, atol=1e-7):
    """Compare analytic grads of build(*tensors) against central differences."""
    leaves = [Tensor(a) for a in arrays]
    loss = build(*leaves)
    backward(loss)

    def numeric(*raw):
        return float(build(*[Tensor(r) for r in raw]).data)

    fd = finite_diff(numeric, [a.copy() for a in arrays])
    for leaf, g in zip(leaves, fd):
        np.testing.assert_allclose(leaf.grad, g, rtol=rtol, atol=atol)
