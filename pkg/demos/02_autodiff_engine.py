"""The reverse-mode engine underneath everything: build a small expression,
backpropagate, and cross-check the gradients with central differences."""

import numpy as np

from mvxseg import tensor as T
from mvxseg.gradcheck import check_gradients

rng = np.random.default_rng(1)

# a two-layer perceptron with a softmax head, all in float64 for sharp checks
x = T.constant(rng.normal(size=(8, 5)))
w1 = T.parameter(rng.normal(size=(5, 6)), dtype=np.float64)
b1 = T.parameter(np.zeros(6), dtype=np.float64)
w2 = T.parameter(rng.normal(size=(6, 3)), dtype=np.float64)


def loss_fn():
    h = T.leaky_relu(T.linear(x, w1, b1))
    p = T.softmax_rows(T.matmul(h, w2))
    return T.mean_all(T.mul(p, p))


loss = loss_fn()
grads = T.backward(loss, {"w1": w1, "b1": b1, "w2": w2})
print("loss:", float(loss.data))
print("dL/db1:", grads["b1"].round(5))

errors = check_gradients(loss_fn, {"w1": w1, "b1": b1, "w2": w2})
print("max relative error vs central differences:",
      max(errors.values()))

# the optimizer: a few AdamW steps shrink the loss
state = T.AdamWState()
for i in range(25):
    grads = T.backward(loss_fn(), {"w1": w1, "b1": b1, "w2": w2})
    T.adamw_step({"w1": w1, "b1": b1, "w2": w2}, grads, state, lr=0.05)
print("loss after 25 AdamW steps:", float(loss_fn().data))

# no_grad turns recording off: useful for warmup rollouts
with T.no_grad():
    detached = T.mul(T.linear(x, w1, b1), 2.0)
print("recorded a graph inside no_grad?", detached._parents != ())
