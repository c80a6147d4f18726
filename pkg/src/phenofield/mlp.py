"""Fully-connected ReLU network with an explicit backward pass."""

from __future__ import annotations

import numpy as np


def init_mlp(widths, rng, dtype=np.float64, out_scale=1.0, hidden_bias=0.1):
    """He-uniform weights; hidden biases U(-hidden_bias, hidden_bias), output bias zero.

    ``widths`` = [in, hidden..., out]. Nonzero hidden biases keep pre-activations away from
    the ReLU kink when the inputs are tiny (fresh hash tables are ~1e-4).
    """
    params = []
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        bound = np.sqrt(6.0 / fan_in)
        if i == len(widths) - 2:
            bound *= out_scale
        W = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
        if i < len(widths) - 2 and hidden_bias > 0:
            b = rng.uniform(-hidden_bias, hidden_bias, size=fan_out).astype(dtype)
        else:
            b = np.zeros(fan_out, dtype=dtype)
        params.append((W, b))
    return params


def mlp_forward(params, x, keep=True):
    """Returns output and a cache of (input, preactivation) per layer."""
    cache = []
    h = x
    last = len(params) - 1
    for i, (W, b) in enumerate(params):
        z = h @ W
        z += b
        if keep:
            cache.append(h)
        h = np.maximum(z, 0.0) if i < last else z
    return h, cache


def mlp_backward(params, cache, grad_out, need_input_grad=False):
    """Parameter grads [(dW, db), ...] and optionally d(input)."""
    grads = [None] * len(params)
    g = grad_out
    for i in range(len(params) - 1, -1, -1):
        W, _ = params[i]
        h_in = cache[i]
        grads[i] = (h_in.T @ g, g.sum(axis=0))
        if i == 0 and not need_input_grad:
            return grads, None
        g = g @ W.T
        if i > 0:
            g *= cache[i] > 0.0
    return grads, g
