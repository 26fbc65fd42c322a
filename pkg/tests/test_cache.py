from dataclasses import replace

import numpy as np
import pytest

from onetrans import cache
from onetrans.features import BehaviorSequence, generate_synthetic
from onetrans.model import build_model, tiny_config
from onetrans.numerics import FlopCounter
from onetrans.tokenizer import INTENT_RANK

from conftest import small_synth

UNBOUNDED = dict(max_len={})


def drop_newest(request, k):
    """The same request as it looked ``k`` behaviors earlier (timestamp-merged order)."""
    flat = [(e.timestamp, -INTENT_RANK[s.type_tag], s.type_tag, i) for s in request.sequences
            for i, e in enumerate(s.events)]
    gone = {(t, i) for _, _, t, i in sorted(flat)[len(flat) - k:]} if k else set()
    seqs = [BehaviorSequence(s.type_tag, [e for i, e in enumerate(s.events) if (s.type_tag, i) not in gone])
            for s in request.sequences]
    return replace(request, request_id=request.request_id + f"-{k}", sequences=seqs)


def tiny(seed=0, **kw):
    tok = kw.pop("tokenizer", {})
    return build_model(tiny_config(tokenizer=dict(UNBOUNDED, **tok), **kw), seed=seed)


def test_cold_start(requests):
    m, store = tiny(), cache.KVCacheStore()
    r = requests[0]
    state = cache.stage1_s_side(m, r, store)
    assert state.full_recompute
    assert store.L_cached(r.user_id) == state.L_S == m.encode([(r, r.candidates[0])]).L_S


def test_repeat_request_does_no_new_work(requests):
    m, store = tiny(), cache.KVCacheStore()
    r = requests[0]
    cache.stage1_s_side(m, r, store)
    c = FlopCounter()
    with c.activate():
        state = cache.stage1_s_side(m, r, store)
    assert state.new_kv_rows == 0 and state.new_out_rows == 0
    assert c.multiply_adds == 0
    assert store.stats["hits"] == 1


@pytest.mark.parametrize("pyramid", ["linear", "none"])
def test_append_three_matches_full_recompute(requests, pyramid):
    m = tiny(pyramid=pyramid)
    r = requests[5]
    store = cache.KVCacheStore()
    cache.stage1_s_side(m, drop_newest(r, 3), store)
    inc = cache.stage1_s_side(m, r, store)
    assert not inc.full_recompute
    ref = cache.stage1_s_side(m, r, cache.KVCacheStore())
    for (k1, v1, w1), (k2, v2, w2) in zip(inc.kv, ref.kv):
        np.testing.assert_array_equal(w1, w2)
        np.testing.assert_allclose(k1, k2, atol=1e-5)
        np.testing.assert_allclose(v1, v2, atol=1e-5)
    a = cache.stage2_candidate(m, inc)
    mono = cache.monolithic_logits(m, r)
    for t in a:
        np.testing.assert_allclose(a[t], mono[t], atol=1e-5)
    if pyramid == "none":
        assert inc.new_kv_rows == 3 * m.config.n_layers


def test_non_extension_invalidates(requests):
    m, store = tiny(), cache.KVCacheStore()
    r = requests[5]
    cache.stage1_s_side(m, r, store)
    state = cache.stage1_s_side(m, drop_newest(r, 2), store)
    assert state.full_recompute and store.stats["invalidated"] == 1


def test_one_candidate_and_sim_path():
    reqs = list(generate_synthetic(small_synth(sim_seq_len=4), seed=1))
    m = tiny(tokenizer=dict(sim=True))
    r = reqs[-1]
    assert any(c.sim_seq is not None for c in r.candidates)
    one = replace(r, candidates=r.candidates[:1])
    assert cache.verify_equivalence(m, one)["passed"]
    rep = cache.verify_equivalence(m, r)
    assert rep["passed"] and len(rep["per_candidate"]) == len(r.candidates)


def test_stale_fingerprint_recomputes(requests):
    m, store = tiny(), cache.KVCacheStore()
    r = requests[0]
    cache.verify_equivalence(m, r, store=store)
    m.params["b0.wk"] *= 1.5
    m.bump_version()
    rep = cache.verify_equivalence(m, r, store=store)
    assert rep["full_recompute"] and rep["passed"]


def test_flop_amortization(requests):
    m = tiny()
    r = requests[0]
    C = len(r.candidates)
    _, _, s1, s2 = cache.score_request(m, r, cache.KVCacheStore())
    _, _, s1_one, s2_one = cache.score_request(m, replace(r, candidates=r.candidates[:1]), cache.KVCacheStore())
    assert s1 == s1_one > 0
    assert s2 == C * s2_one
    total = FlopCounter()
    cache.score_request(m, r, cache.KVCacheStore(), counter=total)
    assert total.forward_total() == s1 + C * s2_one


def test_missing_stage1_and_full_attention(requests):
    m = tiny()
    with pytest.raises(cache.CacheError):
        cache.stage2_candidate(m, None)
    full = tiny(attention="full")
    with pytest.raises(cache.CacheError):
        cache.stage1_s_side(full, requests[0], cache.KVCacheStore())


def test_lru_eviction_and_growth(requests):
    m = tiny()
    store = cache.KVCacheStore(capacity=2)
    users = []
    for r in requests:
        if r.user_id not in users:
            users.append(r.user_id)
            cache.stage1_s_side(m, r, store)
        if len(users) == 2:
            break
    store.get(users[0])                          # refresh the oldest
    third = next(r for r in requests if r.user_id not in users)
    cache.stage1_s_side(m, third, store)
    assert len(store) == 2 and store.stats["evicted"] == 1
    assert store.get(users[1]) is None and store.get(users[0]) is not None


def test_l_cached_non_decreasing(requests):
    m, store = tiny(), cache.KVCacheStore()
    r = requests[7]
    seen = []
    for k in (6, 4, 4, 1, 0):
        cache.stage1_s_side(m, drop_newest(r, k), store)
        seen.append(store.L_cached(r.user_id))
    assert seen == sorted(seen) and store.stats["invalidated"] == 0
