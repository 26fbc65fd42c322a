import hashlib
import json
import math
from dataclasses import replace

import numpy as np
import pytest

from onetrans.features import (EmbeddingStore, EmbeddingTable, IngestError, IngestStats, SynthConfig,
                               dump_jsonl, embed_feature, generate_synthetic, load_jsonl,
                               most_frequent, request_to_json)

from conftest import small_synth


def test_embed_deterministic_and_collision():
    t = EmbeddingTable("item", 4, bucket_count=64, seed=0)
    np.testing.assert_array_equal(embed_feature(t, "a"), embed_feature(t, "a"))
    one = EmbeddingTable("item", 4, bucket_count=1, seed=0)
    np.testing.assert_array_equal(embed_feature(one, "a"), embed_feature(one, "zzz"))


def test_embed_rehash_oracle():
    t = EmbeddingTable("item", 8, bucket_count=1000, seed=7)
    digest = hashlib.blake2b(b"7|item_42", digest_size=8).digest()
    row = int.from_bytes(digest, "little") % 1000
    np.testing.assert_array_equal(embed_feature(t, "item_42"), t.rows[row])


def test_embedding_init_range():
    t = EmbeddingTable("cat", 16, bucket_count=256, seed=0)
    assert np.abs(t.rows).max() <= 1 / math.sqrt(16)


def test_lookup_independent_of_ingestion_order(requests):
    a = EmbeddingStore(4, 512, seed=2)
    b = EmbeddingStore(4, 512, seed=2)
    keys = [c.features["item"] for r in requests for c in r.candidates]
    va = [a.table("item").lookup(k) for k in keys]
    vb = {k: b.table("item").lookup(k) for k in reversed(keys)}
    for k, v in zip(keys, va):
        np.testing.assert_array_equal(v, vb[k])


def test_jsonl_empty(tmp_path):
    p = tmp_path / "empty.jsonl"
    p.write_text("")
    assert list(load_jsonl(p)) == []


def test_jsonl_one_request(tmp_path):
    obj = {"request_id": "r", "user_id": "u", "ts": 5, "user": {"age": 1}, "context": {},
           "sequences": [{"type": "click", "events": [{"item": "i1", "cat": "c1", "price_bucket": 2, "ts": 1}]}],
           "candidates": [{"features": {"item": "i2"}, "click": 1, "conv": 1},
                          {"features": {"item": "i3"}, "click": 0, "conv": 0}]}
    p = tmp_path / "one.jsonl"
    p.write_text(json.dumps(obj) + "\n")
    (req,) = load_jsonl(p)
    assert len(req.candidates) == 2
    assert req.sequence("click").events[0].item_id == "i1"


def test_jsonl_roundtrip(tmp_path, requests):
    p = tmp_path / "rt.jsonl"
    assert dump_jsonl(requests, p) == len(requests)
    back = list(load_jsonl(p))
    assert [request_to_json(r) for r in back] == [request_to_json(r) for r in requests]


def test_jsonl_bad_lines(tmp_path):
    good = {"request_id": "r", "user_id": "u", "ts": 5, "user": {}, "context": {}, "sequences": [],
            "candidates": [{"features": {}, "click": 0, "conv": 0}]}
    conv_no_click = dict(good, candidates=[{"features": {}, "click": 0, "conv": 1}])
    unsorted = dict(good, sequences=[{"type": "click", "events": [
        {"item": "a", "cat": "c", "price_bucket": 0, "ts": 9},
        {"item": "b", "cat": "c", "price_bucket": 0, "ts": 3}]}])
    p = tmp_path / "bad.jsonl"
    p.write_text("\n".join([json.dumps(good), "{not json", json.dumps(conv_no_click),
                            json.dumps({"user_id": "u"}), json.dumps(unsorted)]) + "\n")
    with pytest.raises(IngestError) as exc:
        list(load_jsonl(p))
    assert exc.value.line_no == 2
    stats = IngestStats()
    assert len(list(load_jsonl(p, strict=False, stats=stats))) == 1
    assert [ln for ln, _ in stats.skipped] == [2, 3, 4, 5]
    assert "conv=1 without click=1" in stats.skipped[1][1]


def test_generator_deterministic(tmp_path):
    cfg = small_synth()
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    dump_jsonl(generate_synthetic(cfg, 11), a)
    dump_jsonl(generate_synthetic(cfg, 11), b)
    assert a.read_bytes() == b.read_bytes()


def test_generator_invariants(requests):
    for r in requests:
        for s in r.sequences:
            ts = [e.timestamp for e in s.events]
            assert ts == sorted(ts)
        for c in r.candidates:
            assert c.conv <= c.click


def test_no_signal_click_rate_within_binomial_bound():
    cfg = SynthConfig(n_users=200, n_requests=2000, candidates_per_request=5, signal_weight=0.0)
    clicks = [c.click for r in generate_synthetic(cfg, 0) for c in r.candidates]
    n = len(clicks)
    # expected rate of sigmoid(base + noise_std * z), z ~ N(0, 1), by Gauss-Hermite quadrature
    z, w = np.polynomial.hermite_e.hermegauss(40)
    p = float(np.sum(w / (1 + np.exp(-(cfg.base_logit + cfg.noise_std * z)))) / np.sqrt(2 * np.pi))
    assert abs(np.mean(clicks) - p) <= 3 * math.sqrt(p * (1 - p) / n)


def test_planted_signal_gap():
    cfg = SynthConfig(n_requests=1000, candidates_per_request=10, signal_weight=4.0)
    matched, other = [], []
    for r in generate_synthetic(cfg, 0):
        top = most_frequent([e.category_id for e in r.sequence("purchase").events])
        for c in r.candidates:
            (matched if c.features["cat"] == top else other).append(c.click)
    assert len(matched) + len(other) == 10_000
    assert np.mean(matched) - np.mean(other) >= 0.20


def test_invalid_config():
    with pytest.raises(ValueError):
        list(generate_synthetic(SynthConfig(n_users=0), 0))
    with pytest.raises(ValueError):
        SynthConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        list(generate_synthetic(replace(SynthConfig(), match_prob=2.0), 0))
