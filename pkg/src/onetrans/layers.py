"""Affine / two-layer MLP helpers over a flat ``{name: array}`` parameter dict."""

import numpy as np

from .numerics import default_dtype, matmul, silu, silu_grad


def init_weight(rng, fan_in, fan_out, dtype=None):
    w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
    return w.astype(dtype or default_dtype())


def init_mlp(params, prefix, rng, d_in, d_out, hidden):
    """Affine -> SiLU -> affine when ``hidden`` is truthy, else a single affine map."""
    dt = default_dtype()
    if hidden:
        params[f"{prefix}.w1"] = init_weight(rng, d_in, hidden)
        params[f"{prefix}.b1"] = np.zeros(hidden, dtype=dt)
        params[f"{prefix}.w2"] = init_weight(rng, hidden, d_out)
        params[f"{prefix}.b2"] = np.zeros(d_out, dtype=dt)
    else:
        params[f"{prefix}.w"] = init_weight(rng, d_in, d_out)
        params[f"{prefix}.b"] = np.zeros(d_out, dtype=dt)


def mlp_forward(params, prefix, x):
    if f"{prefix}.w" in params:
        return matmul(x, params[f"{prefix}.w"]) + params[f"{prefix}.b"], (x,)
    pre = matmul(x, params[f"{prefix}.w1"]) + params[f"{prefix}.b1"]
    act = silu(pre)
    return matmul(act, params[f"{prefix}.w2"]) + params[f"{prefix}.b2"], (x, pre, act)


def _acc(grads, name, g):
    if name in grads:
        grads[name] += g
    else:
        grads[name] = g


def mlp_backward(params, prefix, dy, saved, grads):
    """Accumulate parameter grads into ``grads``; return grad w.r.t. the input."""
    d_out = dy.shape[-1]
    dy2 = dy.reshape(-1, d_out)
    if len(saved) == 1:
        (x,) = saved
        x2 = x.reshape(-1, x.shape[-1])
        _acc(grads, f"{prefix}.w", matmul(x2.T, dy2))
        _acc(grads, f"{prefix}.b", dy2.sum(axis=0))
        return matmul(dy, params[f"{prefix}.w"].T)
    x, pre, act = saved
    act2 = act.reshape(-1, act.shape[-1])
    _acc(grads, f"{prefix}.w2", matmul(act2.T, dy2))
    _acc(grads, f"{prefix}.b2", dy2.sum(axis=0))
    dpre = matmul(dy, params[f"{prefix}.w2"].T) * silu_grad(pre)
    dpre2 = dpre.reshape(-1, dpre.shape[-1])
    x2 = x.reshape(-1, x.shape[-1])
    _acc(grads, f"{prefix}.w1", matmul(x2.T, dpre2))
    _acc(grads, f"{prefix}.b1", dpre2.sum(axis=0))
    return matmul(dpre, params[f"{prefix}.w1"].T)


def mlp_flops(d_in, d_out, hidden):
    if hidden:
        return d_in * hidden + hidden * d_out
    return d_in * d_out
