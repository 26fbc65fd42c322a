"""One pre-norm causal block with mixed (shared / token-specific) weights.

Row ``i`` of a block input uses the shared weights when it is an S-token and
its own token-specific weights when it is one of the trailing ``n_ns``
NS-tokens. Weights are stored row-vector style: ``y = x @ W``.
"""

import numpy as np

from .layers import init_weight
from .numerics import (default_dtype, matmul, phase, rms_norm, rms_norm_backward,
                       silu, silu_grad, softmax_backward, softmax_masked)

ATTN_WEIGHTS = ("wq", "wk", "wv", "wo")
FFN_WEIGHTS = ("w1", "b1", "w2", "b2")


def init_block(params, prefix, rng, d, n_ns, ffn_hidden, shared_only=False):
    dt = default_dtype()
    params[f"{prefix}.g1"] = np.ones(d, dtype=dt)
    params[f"{prefix}.g2"] = np.ones(d, dtype=dt)
    for name in ATTN_WEIGHTS:
        params[f"{prefix}.{name}"] = init_weight(rng, d, d)
    params[f"{prefix}.w1"] = init_weight(rng, d, ffn_hidden)
    params[f"{prefix}.b1"] = np.zeros(ffn_hidden, dtype=dt)
    params[f"{prefix}.w2"] = init_weight(rng, ffn_hidden, d)
    params[f"{prefix}.b2"] = np.zeros(d, dtype=dt)
    if shared_only:
        return
    for name in ATTN_WEIGHTS:
        params[f"{prefix}.{name}_ns"] = np.stack([init_weight(rng, d, d) for _ in range(n_ns)])
    params[f"{prefix}.w1_ns"] = np.stack([init_weight(rng, d, ffn_hidden) for _ in range(n_ns)])
    params[f"{prefix}.b1_ns"] = np.zeros((n_ns, ffn_hidden), dtype=dt)
    params[f"{prefix}.w2_ns"] = np.stack([init_weight(rng, ffn_hidden, d) for _ in range(n_ns)])
    params[f"{prefix}.b2_ns"] = np.zeros((n_ns, d), dtype=dt)


def tie_token_specific(params, prefix, n_ns):
    """Overwrite every token-specific set with a copy of the shared set."""
    for name in ATTN_WEIGHTS + FFN_WEIGHTS:
        if f"{prefix}.{name}_ns" in params:
            params[f"{prefix}.{name}_ns"] = np.stack([params[f"{prefix}.{name}"]] * n_ns).copy()


def mixed_linear(x, w, w_ns=None, n_ns=0, b=None, b_ns=None):
    """Shared projection for the leading rows, per-token ones for the last ``n_ns``."""
    R = x.shape[-2]
    if w_ns is None or n_ns == 0:
        y = matmul(x, w)
        return y + b if b is not None else y
    if w_ns.shape[0] != n_ns:
        raise ValueError(f"expected {n_ns} token-specific sets, got {w_ns.shape[0]}")
    if R < n_ns:
        raise ValueError(f"{R} rows cannot hold {n_ns} NS-tokens")
    xs, xns = x[..., : R - n_ns, :], x[..., R - n_ns:, :]
    ys = matmul(xs, w)
    # (n, P, din) @ (n, din, dout) with P = flattened leading batch dims
    xt = np.moveaxis(xns, -2, 0)
    lead = xt.shape[1:-1]
    yt = matmul(xt.reshape(n_ns, -1, xt.shape[-1]), w_ns)
    yns = np.moveaxis(yt.reshape(n_ns, *lead, w_ns.shape[-1]), 0, -2)
    if b is not None:
        ys = ys + b
        yns = yns + b_ns
    return np.concatenate([ys, yns], axis=-2)


def mixed_linear_backward(dy, x, w, w_ns=None, n_ns=0, has_bias=False):
    """Returns ``(dx, dw, dw_ns, db, db_ns)`` (unused entries are None)."""
    R = x.shape[-2]
    if w_ns is None or n_ns == 0:
        x2, dy2 = x.reshape(-1, x.shape[-1]), dy.reshape(-1, dy.shape[-1])
        db = dy2.sum(axis=0) if has_bias else None
        return matmul(dy, w.T), matmul(x2.T, dy2), None, db, None
    ns = R - n_ns
    xs, xns = x[..., :ns, :], x[..., ns:, :]
    dys, dyns = dy[..., :ns, :], dy[..., ns:, :]
    xs2, dys2 = xs.reshape(-1, x.shape[-1]), dys.reshape(-1, dy.shape[-1])
    dw = matmul(xs2.T, dys2)
    dxs = matmul(dys, w.T)
    xt = np.moveaxis(xns, -2, 0)
    lead = xt.shape[1:-1]
    xt = xt.reshape(n_ns, -1, x.shape[-1])
    dyt = np.moveaxis(dyns, -2, 0).reshape(n_ns, -1, dy.shape[-1])
    dw_ns = matmul(np.swapaxes(xt, -1, -2), dyt)
    dxt = matmul(dyt, np.swapaxes(w_ns, -1, -2))
    dxns = np.moveaxis(dxt.reshape(n_ns, *lead, x.shape[-1]), 0, -2)
    db = dbn = None
    if has_bias:
        db = dys2.sum(axis=0)
        dbn = dyt.sum(axis=1)
    return np.concatenate([dxs, dxns], axis=-2), dw, dw_ns, db, dbn


def causal_mask(q_pos, k_pos, causal=True):
    q_pos, k_pos = np.asarray(q_pos), np.asarray(k_pos)
    if not causal:
        return np.ones((len(q_pos), len(k_pos)), dtype=bool)
    return k_pos[None, :] <= q_pos[:, None]


def split_heads(x, H):
    *lead, L, d = x.shape
    return np.swapaxes(x.reshape(*lead, L, H, d // H), -2, -3)


def merge_heads(x):
    *lead, H, L, dh = x.shape
    return np.swapaxes(x, -2, -3).reshape(*lead, L, H * dh)


def attention(q, k, v, mask, H):
    """Multi-head attention core; returns ``(context, probs)`` before W^O."""
    d = q.shape[-1]
    if d % H:
        raise ValueError(f"d={d} not divisible by H={H}")
    qh, kh, vh = split_heads(q, H), split_heads(k, H), split_heads(v, H)
    scores = matmul(qh, np.swapaxes(kh, -1, -2)) * (1.0 / np.sqrt(d // H))
    probs = softmax_masked(scores, mask)
    return merge_heads(matmul(probs, vh)), probs


def _w(params, prefix, name):
    return params[f"{prefix}.{name}"], params.get(f"{prefix}.{name}_ns")


def mixed_qkv(params, prefix, xn, n_ns, which="qkv"):
    out = []
    for c in which:
        w, w_ns = _w(params, prefix, f"w{c}")
        out.append(mixed_linear(xn, w, w_ns, n_ns))
    return tuple(out)


def mixed_ffn(params, prefix, zn, n_ns):
    w1, w1n = _w(params, prefix, "w1")
    b1, b1n = _w(params, prefix, "b1")
    w2, w2n = _w(params, prefix, "w2")
    b2, b2n = _w(params, prefix, "b2")
    hpre = mixed_linear(zn, w1, w1n, n_ns, b1, b1n)
    hact = silu(hpre)
    return mixed_linear(hact, w2, w2n, n_ns, b2, b2n), (hpre, hact)


def causal_attention(params, prefix, q, k, v, mask, H, n_ns):
    """Attention followed by the mixed output projection on the query rows."""
    ctx, probs = attention(q, k, v, mask, H)
    wo, wo_ns = _w(params, prefix, "wo")
    return mixed_linear(ctx, wo, wo_ns, n_ns), (ctx, probs)


def block_forward(params, prefix, x, n_ns, n_keep, H, causal=True):
    """Run one block keeping only the last ``n_keep`` rows as queries.

    Returns ``(y, saved, (k, v))`` where ``y`` has ``n_keep`` rows and
    ``k``/``v`` cover all input rows.
    """
    B, L, d = x.shape
    if not n_ns <= n_keep <= L:
        raise ValueError(f"retained count {n_keep} outside [{n_ns}, {L}]")
    start = L - n_keep
    xn = rms_norm(x, params[f"{prefix}.g1"])
    with phase("attention"):
        k, v = mixed_qkv(params, prefix, xn, n_ns, "kv")
        (q,) = mixed_qkv(params, prefix, xn[:, start:], n_ns, "q")
        mask = causal_mask(np.arange(start, L), np.arange(L), causal)
        attn, (ctx, probs) = causal_attention(params, prefix, q, k, v, mask, H, n_ns)
    z = x[:, start:] + attn
    zn = rms_norm(z, params[f"{prefix}.g2"])
    with phase("ffn"):
        f, (hpre, hact) = mixed_ffn(params, prefix, zn, n_ns)
    y = z + f
    saved = dict(x=x, xn=xn, q=q, k=k, v=v, ctx=ctx, probs=probs, z=z, zn=zn,
                 hpre=hpre, hact=hact, start=start, n_ns=n_ns, H=H)
    return y, saved, (k, v)


def _acc(grads, name, g):
    if g is None:
        return
    if name in grads:
        grads[name] += g
    else:
        grads[name] = g


def block_backward(dy, saved, params, prefix, grads):
    """Exact gradient of :func:`block_forward`; accumulates into ``grads``."""
    if saved is None:
        raise ValueError("block_backward needs the activations saved by block_forward")
    n_ns, H, start = saved["n_ns"], saved["H"], saved["start"]
    x = saved["x"]
    p = params

    def lin_back(dout, inp, name, has_bias=False):
        w, w_ns = _w(p, prefix, name)
        dx, dw, dwn, db, dbn = mixed_linear_backward(dout, inp, w, w_ns, n_ns, has_bias)
        _acc(grads, f"{prefix}.{name}", dw)
        _acc(grads, f"{prefix}.{name}_ns", dwn)
        if has_bias:
            bname = "b" + name[1:]
            _acc(grads, f"{prefix}.{bname}", db)
            _acc(grads, f"{prefix}.{bname}_ns", dbn)
        return dx

    # FFN + second residual
    dz = dy.copy()
    dhact = lin_back(dy, saved["hact"], "w2", has_bias=True)
    dhpre = dhact * silu_grad(saved["hpre"])
    dzn = lin_back(dhpre, saved["zn"], "w1", has_bias=True)
    dz_norm, dg2 = rms_norm_backward(dzn, saved["z"], p[f"{prefix}.g2"])
    _acc(grads, f"{prefix}.g2", dg2)
    dz += dz_norm

    # attention + first residual
    dx = np.zeros_like(x)
    dx[:, start:] += dz
    dctx = lin_back(dz, saved["ctx"], "wo")
    probs = saved["probs"]
    d = x.shape[-1]
    scale = 1.0 / np.sqrt(d // H)
    qh, kh, vh = split_heads(saved["q"], H), split_heads(saved["k"], H), split_heads(saved["v"], H)
    dctxh = split_heads(dctx, H)
    dprobs = matmul(dctxh, np.swapaxes(vh, -1, -2))
    dvh = matmul(np.swapaxes(probs, -1, -2), dctxh)
    dscores = softmax_backward(dprobs, probs) * scale
    dqh = matmul(dscores, kh)
    dkh = matmul(np.swapaxes(dscores, -1, -2), qh)
    dq, dk, dv = merge_heads(dqh), merge_heads(dkh), merge_heads(dvh)
    xn = saved["xn"]
    dxn = lin_back(dk, xn, "wk") + lin_back(dv, xn, "wv")
    dxn[:, start:] += lin_back(dq, xn[:, start:], "wq")
    dx_norm, dg1 = rms_norm_backward(dxn, x, p[f"{prefix}.g1"])
    _acc(grads, f"{prefix}.g1", dg1)
    return dx + dx_norm


def block_param_count(d, n_ns, ffn_hidden, shared_only=False):
    shared = 2 * d + 4 * d * d + d * ffn_hidden + ffn_hidden + ffn_hidden * d + d
    if shared_only:
        return shared
    return shared + n_ns * (4 * d * d + d * ffn_hidden + ffn_hidden + ffn_hidden * d + d)
