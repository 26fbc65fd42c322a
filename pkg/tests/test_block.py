import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from onetrans import block
from onetrans.numerics import finite_diff_grad, precision

from oracles import block_oracle, standard_block_oracle


def make_params(d=8, n_ns=3, seed=0, H=2, shared_only=False):
    rng = np.random.default_rng(seed)
    p = {}
    with precision(np.float64):
        block.init_block(p, "b", rng, d, n_ns, 2 * d, shared_only=shared_only)
    # non-trivial gains and biases so the oracles see every term
    for k in list(p):
        if k.endswith(("g1", "g2")):
            p[k] = 1.0 + 0.1 * rng.standard_normal(p[k].shape)
        elif ".b" in k:
            p[k] = 0.1 * rng.standard_normal(p[k].shape)
    return p


def test_mixed_qkv_tied_equals_shared():
    p = make_params()
    block.tie_token_specific(p, "b", 3)
    x = np.random.default_rng(1).standard_normal((2, 7, 8))
    q, k, v = block.mixed_qkv(p, "b", x, 3)
    for got, name in zip((q, k, v), ("wq", "wk", "wv")):
        np.testing.assert_allclose(got, x @ p[f"b.{name}"], atol=1e-12)


def test_mixed_qkv_ns_only_and_row_oracle():
    p = make_params()
    x = np.random.default_rng(2).standard_normal((1, 3, 8))
    (q,) = block.mixed_qkv(p, "b", x, 3, "q")
    for i in range(3):
        np.testing.assert_allclose(q[0, i], x[0, i] @ p["b.wq_ns"][i], atol=1e-12)
    x = np.random.default_rng(3).standard_normal((1, 6, 8))
    (k,) = block.mixed_qkv(p, "b", x, 3, "k")
    for i in range(6):
        w = p["b.wk"] if i < 3 else p["b.wk_ns"][i - 3]
        np.testing.assert_allclose(k[0, i], x[0, i] @ w, atol=1e-6)


def test_mixed_linear_count_mismatch():
    p = make_params()
    with pytest.raises(ValueError):
        block.mixed_linear(np.ones((1, 5, 8)), p["b.wq"], p["b.wq_ns"], n_ns=2)
    with pytest.raises(ValueError):
        block.mixed_linear(np.ones((1, 2, 8)), p["b.wq"], p["b.wq_ns"], n_ns=3)


def test_attention_single_token_and_constant_values():
    p = make_params()
    rng = np.random.default_rng(4)
    q, k, v = (rng.standard_normal((1, 1, 8)) for _ in range(3))
    out, _ = block.causal_attention(p, "b", q, k, v, block.causal_mask([0], [0]), 2, 0)
    np.testing.assert_allclose(out[0, 0], v[0, 0] @ p["b.wo"], atol=1e-12)
    q, k = rng.standard_normal((1, 5, 8)), rng.standard_normal((1, 5, 8))
    vrow = rng.standard_normal(8)
    v = np.broadcast_to(vrow, (1, 5, 8))
    out, _ = block.causal_attention(p, "b", q, k, v, block.causal_mask(range(5), range(5)), 2, 0)
    np.testing.assert_allclose(out[0], np.tile(vrow @ p["b.wo"], (5, 1)), atol=1e-12)


def test_attention_per_head_oracle():
    rng = np.random.default_rng(5)
    q, k, v = (rng.standard_normal((1, 5, 8)) for _ in range(3))
    ctx, _ = block.attention(q, k, v, block.causal_mask(range(5), range(5)), 2)
    for i in range(5):
        for h in range(2):
            sl = slice(4 * h, 4 * h + 4)
            s = np.array([q[0, i, sl] @ k[0, j, sl] / 2.0 for j in range(i + 1)])
            w = np.exp(s - s.max())
            w /= w.sum()
            np.testing.assert_allclose(ctx[0, i, sl], w @ v[0, : i + 1, sl], atol=1e-5)


def test_ffn_zero_and_row_oracle():
    p = make_params()
    for k in ("b.b1", "b.b2", "b.b1_ns", "b.b2_ns"):
        p[k] = np.zeros_like(p[k])
    out, _ = block.mixed_ffn(p, "b", np.zeros((1, 5, 8)), 3)
    np.testing.assert_array_equal(out, 0.0)
    p = make_params()
    x = np.random.default_rng(6).standard_normal((1, 5, 8))
    out, _ = block.mixed_ffn(p, "b", x, 3)
    for i in range(5):
        sfx = "" if i < 2 else "_ns"
        pick = (lambda n: p[f"b.{n}"]) if i < 2 else (lambda n: p[f"b.{n}_ns"][i - 2])
        h = x[0, i] @ pick("w1") + pick("b1")
        h = h / (1 + np.exp(-h))
        np.testing.assert_allclose(out[0, i], h @ pick("w2") + pick("b2"), atol=1e-6, err_msg=sfx)


@pytest.mark.parametrize("n_keep", [9, 7, 3])
def test_block_forward_matches_loop_oracle(n_keep):
    p = make_params()
    x = np.random.default_rng(7).standard_normal((1, 9, 8))
    y, _, _ = block.block_forward(p, "b", x, 3, n_keep, 2)
    np.testing.assert_allclose(y[0], block_oracle(p, "b", x[0], 3, n_keep, 2), atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 6))
def test_pruned_rows_equal_full_block(seed, drop):
    p = make_params(seed=seed % 1000)
    x = np.random.default_rng(seed).standard_normal((2, 9, 8))
    full, _, _ = block.block_forward(p, "b", x, 3, 9, 2)
    part, _, _ = block.block_forward(p, "b", x, 3, 9 - drop, 2)
    np.testing.assert_allclose(part, full[:, drop:], atol=1e-6)


def test_retained_count_out_of_range():
    p = make_params()
    with pytest.raises(ValueError):
        block.block_forward(p, "b", np.ones((1, 6, 8)), 3, 2, 2)
    with pytest.raises(ValueError):
        block.block_forward(p, "b", np.ones((1, 6, 8)), 3, 7, 2)


def test_residual_identity():
    p = make_params()
    for n in ("wo", "w2", "b2"):
        p[f"b.{n}"] = np.zeros_like(p[f"b.{n}"])
        p[f"b.{n}_ns"] = np.zeros_like(p[f"b.{n}_ns"])
    x = np.random.default_rng(8).standard_normal((1, 9, 8))
    y, _, _ = block.block_forward(p, "b", x, 3, 5, 2)
    np.testing.assert_array_equal(y, x[:, 4:])


def test_tied_block_equals_standard_transformer():
    p = make_params(seed=3)
    block.tie_token_specific(p, "b", 3)
    x = np.random.default_rng(9).standard_normal((1, 8, 8))
    y, _, _ = block.block_forward(p, "b", x, 3, 8, 2)
    np.testing.assert_allclose(y[0], standard_block_oracle(p, "b", x[0], 2), atol=1e-6)


def _flat(p):
    names = sorted(p)
    return names, np.concatenate([p[n].ravel() for n in names])


def _unflat(names, shapes, theta):
    out, i = {}, 0
    for n in names:
        size = int(np.prod(shapes[n]))
        out[n] = theta[i:i + size].reshape(shapes[n])
        i += size
    return out


def test_backward_zero_upstream():
    p = make_params()
    x = np.random.default_rng(10).standard_normal((1, 5, 8))
    y, saved, _ = block.block_forward(p, "b", x, 3, 4, 2)
    grads = {}
    dx = block.block_backward(np.zeros_like(y), saved, p, "b", grads)
    assert not dx.any() and all(not g.any() for g in grads.values())
    with pytest.raises(ValueError):
        block.block_backward(y, None, p, "b", {})


@pytest.mark.parametrize("n_keep,tied", [(3, False), (2, False), (3, True)])
def test_backward_matches_finite_differences(n_keep, tied):
    d, n_ns, H = 4, 2, 2
    p = make_params(d=d, n_ns=n_ns, seed=11)
    if tied:
        block.tie_token_specific(p, "b", n_ns)
    rng = np.random.default_rng(12)
    x = rng.standard_normal((1, 3, d))
    r = rng.standard_normal((1, n_keep, d))
    y, saved, _ = block.block_forward(p, "b", x, n_ns, n_keep, H)
    grads = {}
    dx = block.block_backward(r, saved, p, "b", grads)

    names, theta = _flat(p)
    shapes = {n: p[n].shape for n in names}
    fd = finite_diff_grad(lambda t: np.sum(r * block.block_forward(_unflat(names, shapes, t), "b", x, n_ns,
                                                                     n_keep, H)[0]), theta)
    ana = np.concatenate([grads.get(n, np.zeros(shapes[n])).ravel() for n in names])
    err = np.abs(ana - fd) / np.maximum(np.maximum(np.abs(ana), np.abs(fd)), 1e-8)
    assert err[np.abs(ana - fd) > 1e-8].max(initial=0) <= 1e-3
    fdx = finite_diff_grad(lambda t: np.sum(r * block.block_forward(p, "b", t.reshape(x.shape), n_ns,
                                                                     n_keep, H)[0]), x)
    np.testing.assert_allclose(dx.ravel(), fdx, rtol=1e-3, atol=1e-8)


def test_causality_and_ns_reach():
    p = make_params()
    rng = np.random.default_rng(13)
    x = rng.standard_normal((1, 9, 8))
    y, saved, _ = block.block_forward(p, "b", x, 3, 9, 2)
    for j in range(9):
        x2 = x.copy()
        x2[0, j] += 1.0
        y2, _, _ = block.block_forward(p, "b", x2, 3, 9, 2)
        np.testing.assert_array_equal(y2[0, :j], y[0, :j])
        assert np.any(y2[0, j:] != y[0, j:])
    probs = saved["probs"][0]                     # (H, L', L)
    for i in range(6, 9):
        assert np.all(probs[:, i, : i + 1] > 0)
        assert np.all(probs[:, i, i + 1:] == 0)
