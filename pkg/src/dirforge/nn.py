"""Small MLP building blocks on top of :mod:`dirforge.autodiff`.

Parameters live in plain ``dict[str, np.ndarray]`` containers.  A forward pass
receives either those arrays (wrapped as constants, so nothing is recorded) or
gradient-tracking tensors built by :func:`trainable`.  Optimizer updates return
new arrays, which keeps tensors immutable.
"""

from __future__ import annotations

import hashlib
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

Params = dict[str, np.ndarray]


def init_mlp(rng: np.random.Generator, sizes: list[int], prefix: str = "") -> Params:
    """He-style normal init for weights, zeros for biases."""
    params: Params = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"{prefix}w{i}"] = rng.standard_normal((fan_in, fan_out)) * np.sqrt(1.0 / fan_in)
        params[f"{prefix}b{i}"] = np.zeros(fan_out)
    return params


def mlp_forward(
    params: Mapping[str, np.ndarray | Tensor],
    x,
    n_layers: int,
    activation: str = "silu",
    prefix: str = "",
) -> Tensor:
    h = ad.as_tensor(x)
    for i in range(n_layers):
        h = ad.linear(h, params[f"{prefix}w{i}"], params[f"{prefix}b{i}"])
        if i < n_layers - 1:
            h = ad.nonlinearity(activation, h)
    return h


def trainable(params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=True) for k, v in params.items()}


def constants(params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor._wrap(v, False) for k, v in params.items()}


def checksum(params: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k], dtype=np.float64).tobytes())
    return h.hexdigest()


def quantize_f32(params: Mapping[str, np.ndarray]) -> Params:
    """Round parameters through float32, the on-disk precision."""
    return {k: np.asarray(v, dtype=np.float32).astype(np.float64) for k, v in params.items()}


class AdamW:
    """Stateful wrapper around :func:`autodiff.adamw_step` for a parameter dict."""

    def __init__(self, params: Params, lr: float, betas=(0.9, 0.999), weight_decay=0.01):
        self.keys = sorted(params)
        self.lr = lr
        self.betas = betas
        self.weight_decay = weight_decay
        self.state = ad.AdamState.zeros_like([params[k] for k in self.keys])

    def step(self, params: Params, grads: Mapping[str, np.ndarray]) -> Params:
        new, self.state = ad.adamw_step(
            [params[k] for k in self.keys],
            [grads[k] for k in self.keys],
            self.state,
            lr=self.lr,
            betas=self.betas,
            weight_decay=self.weight_decay,
        )
        return dict(zip(self.keys, new))
