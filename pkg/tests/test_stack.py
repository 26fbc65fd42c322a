import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from onetrans import block
from onetrans.model import (ConfigError, build_model, load_model, make_linear_schedule, task_loss,
                            tiny_config)
from onetrans.numerics import precision
from onetrans.tokenizer import build_x0

from oracles import head_oracle, linear_schedule, model_oracle

SIX = {"purchase": 2, "add_to_cart": 2, "click": 2}


def model64(seed=0, **kw):
    with precision(np.float64):
        return build_model(tiny_config(**kw), seed=seed, dtype=np.float64)


def test_schedule_paper_endpoints():
    s = make_linear_schedule(1190, 12, 8)
    assert s[0] == 1190 and s[-1] == 12 and len(s) == 9
    assert s == linear_schedule(1190, 12, 8)


def test_schedule_small_cases():
    assert make_linear_schedule(70, 8, 1) == [70, 8]
    assert make_linear_schedule(8, 8, 4) == [8] * 5
    # 10 - n * 7 / 2 -> 10, 6.5 -> 7 (half up), 3
    assert make_linear_schedule(10, 3, 2) == [10, 7, 3]
    with pytest.raises(ConfigError):
        make_linear_schedule(5, 8, 2)
    with pytest.raises(ConfigError):
        make_linear_schedule(10, 3, 0)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 400), st.integers(1, 40), st.integers(1, 12))
def test_schedule_monotone_and_terminal(extra, L_NS, N):
    s = make_linear_schedule(L_NS + extra, L_NS, N)
    assert s[0] == L_NS + extra and s[-1] == L_NS
    assert all(b <= a for a, b in zip(s, s[1:]))
    assert min(s) >= L_NS
    assert s == linear_schedule(L_NS + extra, L_NS, N)


def test_zero_layer_model_uses_tokenizer_ns_output(requests):
    m = model64(n_layers=0)
    r = requests[0]
    x0 = build_x0(m.tokenizer, r, r.candidates[0])
    logits, _ = m.forward(m.encode([(r, r.candidates[0])]))
    feat = x0.ns_block.reshape(-1)
    for t in m.config.tasks:
        assert logits[t][0] == pytest.approx(head_oracle(m.params, t, feat), abs=1e-10)


def test_straight_line_oracle(requests):
    m = model64(d_model=8, n_heads=2, n_layers=2, tokenizer=dict(L_NS=3, max_len=SIX))
    r = requests[1]
    for c in r.candidates:
        x0 = build_x0(m.tokenizer, r, c)
        assert x0.L_S == 6
        logits, _ = m.forward(m.encode([(r, c)]))
        ref = model_oracle(m, x0.tokens)
        for t in m.config.tasks:
            assert logits[t][0] == pytest.approx(ref[t], abs=1e-5)


def test_pyramid_on_off_single_layer(requests):
    on = model64(n_layers=1, pyramid="linear")
    off = model64(n_layers=1, pyramid="none")
    r = requests[0]
    enc = on.encode([(r, r.candidates[0])])
    _, c_on = on.forward(enc, return_states=True)
    _, c_off = off.forward(enc, return_states=True)
    a, b = c_on["states"][1], c_off["states"][1]
    np.testing.assert_allclose(a, b[:, -a.shape[1]:], atol=1e-10)


def test_candidate_independence_of_s_states(requests):
    m = model64(pyramid="none")
    r = requests[0]
    L_S = m.encode([(r, r.candidates[0])]).L_S
    sa = m.forward(m.encode([(r, r.candidates[0])]), return_states=True)[1]["states"]
    sb = m.forward(m.encode([(r, r.candidates[1])]), return_states=True)[1]["states"]
    for xa, xb in zip(sa, sb):
        np.testing.assert_array_equal(xa[:, :L_S], xb[:, :L_S])


def test_ns_rows_never_pruned(requests):
    m = model64()
    r = requests[0]
    enc = m.encode([(r, r.candidates[0])])
    sched = m.schedule(enc.L_S)
    assert min(sched) == m.config.L_NS == sched[-1]


def bce(z, y):
    p = 1 / (1 + math.exp(-z))
    return -(y * math.log(p) + (1 - y) * math.log(1 - p))


def test_loss_examples():
    total, parts, _ = task_loss({"ctr": np.array([0.0])}, [1], [0])
    assert total == pytest.approx(math.log(2), abs=1e-12)
    _, parts, g = task_loss({"ctr": np.zeros(2), "cvr": np.array([3.0, -5.0])}, [1, 0], [1, 0])
    assert parts["cvr"] == pytest.approx(bce(3.0, 1), abs=1e-12)
    assert g["cvr"][1] == 0.0
    z_ctr, z_cvr = np.array([0.3, -1.2, 2.0, 0.0]), np.array([1.0, 0.5, -0.7, 4.0])
    click, conv = [1, 0, 1, 1], [0, 0, 1, 1]
    total, parts, _ = task_loss({"ctr": z_ctr, "cvr": z_cvr}, click, conv)
    ctr = sum(bce(z, y) for z, y in zip(z_ctr, click)) / 4
    cvr = sum(bce(z, y) for z, y, c in zip(z_cvr, conv, click) if c) / 3
    assert parts["ctr"] == pytest.approx(ctr, abs=1e-7)
    assert parts["cvr"] == pytest.approx(cvr, abs=1e-7)
    assert total == pytest.approx(ctr + cvr, abs=1e-7)
    with pytest.raises(ValueError):
        task_loss({"ctr": np.zeros(1)}, [0], [1])


def test_config_validation():
    with pytest.raises(ConfigError):
        tiny_config(d_model=30, n_heads=4)
    with pytest.raises(ConfigError):
        tiny_config(dropout=0.1)
    with pytest.raises(ConfigError):
        tiny_config(pyramid=[0.5])
    with pytest.raises(ConfigError):
        tiny_config(tasks=["ltv"])


def test_checkpoint_roundtrip(tmp_path, requests):
    m = build_model(tiny_config(), seed=4)
    m.params["b0.wq"] += 0.125
    m.store.table("item").rows[3] += 1.0
    m.bump_version()
    path = tmp_path / "m.npz"
    m.save(path)
    back = load_model(path)
    assert back.config.to_dict() == m.config.to_dict() and back.version == m.version
    assert sorted(back.params) == sorted(m.params)
    for k in m.params:
        assert back.params[k].dtype == m.params[k].dtype
        np.testing.assert_array_equal(back.params[k], m.params[k])
    r = requests[0]
    a = m.predict([(r, c) for c in r.candidates[:1]])
    b = back.predict([(r, c) for c in r.candidates[:1]])
    for t in a:
        np.testing.assert_array_equal(a[t], b[t])


def test_param_counts_shared_vs_mixed():
    mixed = build_model(tiny_config(), seed=0)
    shared = build_model(tiny_config(params="shared"), seed=0)
    one_set = block.block_param_count(32, 1, 64) - block.block_param_count(32, 1, 64, shared_only=True)
    assert mixed.dense_param_count() - shared.dense_param_count() == 2 * 8 * one_set
