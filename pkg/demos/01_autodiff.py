"""Reverse-mode autodiff on a small tape.

Builds a two-layer network with the primitives in ``dirforge.autodiff``,
runs one backward pass and compares every gradient with central finite
differences.  Then takes a few AdamW steps on a toy regression.
"""

import numpy as np

from dirforge import autodiff as ad
from dirforge import nn

rng = np.random.default_rng(0)
x = rng.standard_normal((8, 5))
y = rng.standard_normal((8, 1))
params = {"w0": rng.standard_normal((5, 16)) * 0.3, "b0": np.zeros(16),
          "w1": rng.standard_normal((16, 1)) * 0.3, "b1": np.zeros(1)}


def loss_of(p):
    h = ad.nonlinearity("silu", ad.linear(ad.Tensor._wrap(x, False), p["w0"], p["b0"]))
    out = ad.linear(h, p["w1"], p["b1"])
    return ad.scale(ad.sq_l2_norm(ad.sub(out, y)), 1.0 / len(x))


tp = nn.trainable(params)
loss = loss_of(tp)
ad.backward(loss)
print(f"loss {loss.item():.5f}")

h = 1e-6
for name, value in params.items():
    fd = np.zeros_like(value)
    for idx in np.ndindex(value.shape):
        up, dn = {k: v.copy() for k, v in params.items()}, {k: v.copy() for k, v in params.items()}
        up[name][idx] += h
        dn[name][idx] -= h
        fd[idx] = (loss_of(up).item() - loss_of(dn).item()) / (2 * h)
    err = np.max(np.abs(tp[name].grad - fd)) / (np.max(np.abs(fd)) + 1e-12)
    print(f"{name:3s} grad shape {value.shape!s:8s} relative error vs finite differences {err:.1e}")

opt = nn.AdamW(params, lr=0.05, weight_decay=0.0)
for step in range(200):
    tp = nn.trainable(params)
    loss = loss_of(tp)
    ad.backward(loss)
    params = opt.step(params, {k: v.grad for k, v in tp.items()})
    if step % 50 == 0:
        print(f"step {step:3d} loss {loss.item():.4f}")
print(f"final loss {loss_of(params).item():.4f}")
