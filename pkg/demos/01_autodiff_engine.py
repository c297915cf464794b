"""A tour of the reverse-mode autodiff core.

Builds a small computation graph by hand, checks its gradients against
central finite differences, and fits a two-layer network to a toy function
with the Adam optimizer. Run: python3 demos/01_autodiff_engine.py
"""

import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

import numpy as np

from wmrefine import autodiff as ad
from wmrefine.autodiff import AdamState, Tensor, adam_update, backward

rng = np.random.default_rng(0)

# --- 1. a graph, forward and backward ---------------------------------------
x = Tensor(np.array([[0.5, -1.0, 2.0]], dtype=np.float64))
w = Tensor(rng.standard_normal((3, 2)))
b = Tensor(np.zeros(2))
loss = ad.mean(ad.mul(ad.tanh(ad.affine(x, w, b)), ad.sigmoid(ad.affine(x, w, b))))
backward(loss)
print("loss value:", float(loss.data))
print("dloss/dw:\n", w.grad)

# --- 2. gradients agree with finite differences ------------------------------
def loss_value(w_raw):
    wt = Tensor(w_raw)
    out = ad.mean(ad.mul(ad.tanh(ad.affine(x, wt, b)), ad.sigmoid(ad.affine(x, wt, b))))
    return float(out.data)

h = 1e-6
fd = np.zeros_like(w.data)
for i in range(3):
    for j in range(2):
        up, dn = w.data.copy(), w.data.copy()
        up[i, j] += h
        dn[i, j] -= h
        fd[i, j] = (loss_value(up) - loss_value(dn)) / (2 * h)
print("max |analytic - finite difference|:", np.abs(w.grad - fd).max())

# --- 3. Adam fits a tiny regression ------------------------------------------
inputs = rng.standard_normal((64, 4)).astype(np.float32)
targets = np.sin(inputs.sum(axis=1, keepdims=True)).astype(np.float32)
params = {
    "w0": Tensor(rng.standard_normal((4, 16)).astype(np.float32) * 0.5),
    "b0": Tensor(np.zeros(16, dtype=np.float32)),
    "w1": Tensor(rng.standard_normal((16, 1)).astype(np.float32) * 0.5),
    "b1": Tensor(np.zeros(1, dtype=np.float32)),
}
state = AdamState()
for step in range(400):
    pred = ad.affine(ad.tanh(ad.affine(Tensor(inputs), params["w0"], params["b0"])),
                     params["w1"], params["b1"])
    err = ad.sub(pred, Tensor(targets))
    fit = ad.mean(ad.mul(err, err))
    backward(fit)
    adam_update(params, state, lr=1e-2)
    if step % 100 == 0 or step == 399:
        print(f"step {step:3d}  mse {float(fit.data):.5f}")
print("the optimizer drives the regression error toward zero")
