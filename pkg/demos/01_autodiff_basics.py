"""
Reverse-mode gradients on numpy arrays
======================================

A short tour of the tensor layer every model component is built on.
"""

import numpy as np

from evroute import tensor as T
from evroute.nn import param
from evroute.tensor import numeric_grad

rng = np.random.default_rng(0)

# leaves that should receive gradients are created with param()
W = param(rng.normal(size=(4, 3)))
x = T.as_tensor(rng.normal(size=(5, 4)))

# a small graph: matmul, smooth nonlinearity, log-sum-exp pooling
loss = T.logsumexp(T.gelu(x @ W), axis=1).mean()
loss.backward()
print("loss", loss.item())
print("dL/dW\n", W.grad)

# the finite-difference check used throughout the test suite
W.zero_grad()
loss_fn = lambda: T.logsumexp(T.gelu(x @ W), axis=1).mean()
loss_fn().backward()
num = numeric_grad(loss_fn, W, 1e-6)
print("max |analytic - numeric| =", np.abs(W.grad - num).max())

# broadcasting works one way: a row vector against a matrix
b = param(np.zeros(3))
y = (x @ W + b).sum()
y.backward()
print("bias grad equals the batch size:", b.grad)
