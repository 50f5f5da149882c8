"""
A small reverse-mode tape
=========================

The neural parts are trained with a hand-written autodiff tape over numpy
arrays. This script checks it against finite differences and takes a few Adam
steps on a toy regression.
"""

import numpy as np

from nebpcl import autodiff as ad
from nebpcl.neural import AdamState, Mlp, adam_step, mlp_forward, mlp_gradients

rng = np.random.default_rng(0)
net = Mlp.init([3, 16, 1], "identity", rng)
x = rng.standard_normal((64, 3))
y = np.sin(x[:, :1]) + 0.5 * x[:, 1:2] * x[:, 2:3]


def loss_of(network):
    return float(np.mean((mlp_forward(network, x) - y) ** 2))


def grads_of(network):
    tape = ad.Tape()
    out = mlp_forward(network, x, tape)
    diff = out - y
    loss = ad.sum(diff * diff) / len(x)
    return mlp_gradients(network, tape, ad.backward(tape, loss))


# Compare one weight's adjoint with a central difference.
g = grads_of(net)[0][1, 4]
w = net.params[0]
old = w[1, 4]
w[1, 4] = old + 1e-6
up = loss_of(net)
w[1, 4] = old - 1e-6
down = loss_of(net)
w[1, 4] = old
print("tape %.8f   finite difference %.8f" % (g, (up - down) / 2e-6))

# A few hundred Adam steps fit the toy target.
opt = AdamState(lr=1e-2)
print("initial loss %.4f" % loss_of(net))
for it in range(300):
    params, opt = adam_step(opt, net.params, grads_of(net))
    net = net.with_params(params)
print("loss after %d steps %.4f" % (opt.step, loss_of(net)))
