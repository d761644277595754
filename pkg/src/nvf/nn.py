"""Dense layers on top of the autodiff tape.

Parameters live in plain ``dict[str, ndarray]`` containers; a forward pass binds
them onto a tape with :func:`bind` and reads the resulting vars by name.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

SOFTPLUS_BETA = 100.0

ACTIVATIONS = {
    "softplus": lambda x: ad.softplus(x, SOFTPLUS_BETA),
    "relu": ad.relu,
}


def init_mlp(rng: np.random.Generator, prefix: str, sizes, out_scale: float = 1.0) -> dict:
    """Glorot-uniform weights and zero biases for ``len(sizes) - 1`` layers."""
    params = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        lim = np.sqrt(6.0 / (a + b))
        w = rng.uniform(-lim, lim, size=(a, b))
        if i == len(sizes) - 2:
            w *= out_scale
        params[f"{prefix}.w{i}"] = w
        params[f"{prefix}.b{i}"] = np.zeros(b)
    return params


def mlp(P: dict, prefix: str, x, n_layers: int, activation: str = "softplus"):
    act = ACTIVATIONS[activation]
    for i in range(n_layers):
        x = ad.matmul(x, P[f"{prefix}.w{i}"]) + P[f"{prefix}.b{i}"]
        if i < n_layers - 1:
            x = act(x)
    return x


def bind(tape: ad.Tape, params: dict, trainable: bool = True) -> dict:
    make = tape.leaf if trainable else tape.const
    return {k: make(v) for k, v in params.items()}
