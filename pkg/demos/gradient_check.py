"""Finite-difference check of a tiny U-Net trained with the Generalized Dice Loss.

Run: python demos/gradient_check.py
"""
import numpy as np

from leishseg import tensor as T
from leishseg.data import one_hot
from leishseg.losses import generalized_dice_loss
from leishseg.unet import UNetConfig, backward, build_unet, forward

rng = np.random.default_rng(0)
params = build_unet(UNetConfig(depth=1, base_filters=2, seed=0))
for layer in params.layers:
    layer.bias.value[:] = rng.normal(0.0, 0.1, layer.bias.value.shape)
x = rng.random((1, 3, 8, 8))
r = one_hot(rng.integers(0, 7, (1, 8, 8)))

probs, cache = forward(params, x)
loss, grad = generalized_dice_loss(probs, r)
backward(params, cache, grad)
print(f"GDL at init: {loss:.6f}")

for name, p in params.tensors():
    def f(v, p=p):
        old = p.value.copy()
        p.value[...] = v
        try:
            return generalized_dice_loss(forward(params, x, training=False)[0], r)[0]
        finally:
            p.value[...] = old
    err = T.finite_difference_check(f, p.value.copy(), p.grad)
    print(f"{name:<14} max relative error {err:.2e}")
