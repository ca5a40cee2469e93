"""
Reverse-mode gradients and group isolation
==========================================

The network is built on a small tensor type with a tape.  A grouped
convolution never lets one channel group see another, so the gradient of
a loss on group 0's outputs is zero on every other group's weights.
"""

import numpy as np

from ecmrnet import tensor as T
from ecmrnet.tensor import Tensor, finite_diff_check

rng = np.random.default_rng(0)

# central differences against the tape, on a conv + norm + GELU chain
x = rng.normal(size=(1, 4, 5, 5))
w = rng.normal(size=(4, 2, 3, 3)) * 0.3
gamma, beta = np.ones(4), np.zeros(4)


def chain(x, w, gamma, beta):
    h = T.group_norm(x, 2, gamma, beta)
    h = T.gelu(T.conv2d(h, w, groups=2, padding=1))
    return T.mean(T.mul(h, h))


print("max relative error:", finite_diff_check(chain, [x, w, gamma, beta]))

# a loss on the first two output channels only touches group 0's filters
xt = Tensor(x)
wt = Tensor(w, requires_grad=True)
loss = T.mean(T.channel_slice(T.conv2d(xt, wt, groups=2, padding=1), 0, 2))
T.backward(loss)
print("grad norm, group 0 filters:", np.abs(wt.grad[:2]).sum())
print("grad norm, group 1 filters:", np.abs(wt.grad[2:]).sum())
