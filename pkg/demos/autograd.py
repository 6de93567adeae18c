"""
Reverse-mode autodiff on numpy arrays
=====================================

Every op records its parents and a backward closure; ``backward`` walks the
tape in reverse topological order.
"""

import numpy as np

from roiattn import tensor as T
from roiattn.gradcheck import check_gradients
from roiattn.tensor import Tensor

rng = np.random.default_rng(0)

# a small two-layer expression
x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
b = Tensor(np.zeros(2), requires_grad=True)
loss = T.sum_all(T.relu(T.linear(x, w, b)))
loss.backward()
print("loss", float(loss.values))
print("dL/dw\n", w.grad)

# float32 is the working precision; gradient checks run in float64
x64 = Tensor(rng.normal(size=(4, 3)), requires_grad=True, dtype=np.float64)
w64 = Tensor(rng.normal(size=(3, 2)), requires_grad=True, dtype=np.float64)
print("softmax(x @ w) gradient check:", check_gradients(lambda x, w: T.softmax_dim(T.matmul(x, w), 1), [x64, w64]))

# no_grad skips the tape entirely
with T.no_grad():
    y = T.matmul(x, w)
print("recorded parents under no_grad:", len(y._parents))

# NaN or Inf anywhere in a forward value is an error, not a silent pass-through
try:
    T.scale(Tensor([1.0, np.inf]), 2.0)
except T.NonFiniteError as err:
    print("caught:", err)
