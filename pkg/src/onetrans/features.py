"""Impression/request data model, hashed embeddings, JSON-lines IO and a
synthetic log generator with a planted sequence-feature signal."""

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict
from functools import lru_cache
from typing import Optional

import numpy as np

from .numerics import default_dtype, sigmoid

BEHAVIOR_TYPES = ("impression", "click", "add_to_cart", "purchase")
# higher value = stronger user intent
INTENT_RANK = {"impression": 0, "click": 1, "add_to_cart": 2, "purchase": 3}
DEFAULT_BUCKETS = 2 ** 17
EVENT_FIELDS = ("item", "cat", "price_bucket")


class IngestError(ValueError):
    def __init__(self, line_no, reason):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


@dataclass(frozen=True)
class Event:
    item_id: str
    category_id: str
    price_bucket: int
    timestamp: int
    behavior_type: str

    def __post_init__(self):
        if self.timestamp is None or self.timestamp < 0:
            raise ValueError(f"event timestamp must be >= 0, got {self.timestamp}")
        if self.behavior_type not in INTENT_RANK:
            raise ValueError(f"unknown behavior type {self.behavior_type!r}")

    def key(self):
        return (self.item_id, self.category_id, self.price_bucket, self.timestamp, self.behavior_type)


@dataclass
class BehaviorSequence:
    type_tag: str
    events: list = field(default_factory=list)

    def __post_init__(self):
        if self.type_tag not in INTENT_RANK:
            raise ValueError(f"unknown sequence type {self.type_tag!r}")
        ts = [e.timestamp for e in self.events]
        if any(b < a for a, b in zip(ts, ts[1:])):
            # stable sort keeps input order among equal timestamps
            self.events = sorted(self.events, key=lambda e: e.timestamp)

    def __len__(self):
        return len(self.events)

    def tail(self, n):
        """The ``n`` most recent events (all of them when ``n`` is None)."""
        if n is None or len(self.events) <= n:
            return self
        return BehaviorSequence(self.type_tag, self.events[len(self.events) - n:])


@dataclass
class CandidateRecord:
    features: dict
    sim_seq: Optional[BehaviorSequence] = None
    click: int = 0
    conv: int = 0

    def __post_init__(self):
        if self.click not in (0, 1) or self.conv not in (0, 1):
            raise ValueError("labels must be 0 or 1")
        if self.conv and not self.click:
            raise ValueError("conversion without click")


@dataclass
class Request:
    request_id: str
    user_id: str
    ts: int
    user: dict
    context: dict
    sequences: list
    candidates: list
    day_marker: Optional[int] = None

    def __post_init__(self):
        if not self.candidates:
            raise ValueError("request needs at least one candidate")
        if self.day_marker is None:
            self.day_marker = int(self.ts // 86_400_000)

    def sequence(self, type_tag):
        for s in self.sequences:
            if s.type_tag == type_tag:
                return s
        return None

    def ns_features(self, candidate):
        """Flat NS feature map with ``user.``/``context.``/``item.`` prefixes."""
        out = {f"user.{k}": v for k, v in self.user.items()}
        out.update({f"context.{k}": v for k, v in self.context.items()})
        out.update({f"item.{k}": v for k, v in candidate.features.items()})
        return out


# ---------------------------------------------------------------------------
# hashed embeddings

@lru_cache(maxsize=1 << 20)
def stable_hash(key, seed=0):
    digest = hashlib.blake2b(f"{seed}|{key}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def table_name(feature):
    """Embedding vocabulary for a feature: the part after the last dot.

    ``item.cat`` and event categories therefore share the ``cat`` table.
    """
    return feature.rsplit(".", 1)[-1]


class EmbeddingTable:
    def __init__(self, name, dim, bucket_count=DEFAULT_BUCKETS, seed=0, dtype=None):
        if dim < 1 or bucket_count < 1:
            raise ValueError("embedding table needs dim >= 1 and bucket_count >= 1")
        self.name = name
        self.dim = dim
        self.bucket_count = bucket_count
        self.seed = seed
        rng = np.random.default_rng([seed, stable_hash(name, 0) % (1 << 31)])
        bound = 1.0 / math.sqrt(dim)
        self.rows = rng.uniform(-bound, bound, size=(bucket_count, dim)).astype(dtype or default_dtype())

    def bucket(self, key):
        return stable_hash(str(key), self.seed) % self.bucket_count

    def buckets(self, keys):
        return np.fromiter((self.bucket(k) for k in keys), dtype=np.int64, count=len(keys))

    def lookup(self, key):
        return self.rows[self.bucket(key)]


def embed_feature(table, key):
    return table.lookup(key).copy()


class EmbeddingStore(dict):
    """``{vocab name: EmbeddingTable}``, created on first use."""

    def __init__(self, dim, bucket_count=DEFAULT_BUCKETS, seed=0, dtype=None):
        super().__init__()
        self.dim = dim
        self.bucket_count = bucket_count
        self.seed = seed
        self.dtype = dtype

    def table(self, name):
        if name not in self:
            self[name] = EmbeddingTable(name, self.dim, self.bucket_count, self.seed, self.dtype)
        return self[name]


# ---------------------------------------------------------------------------
# JSON-lines IO

def _sequence_from_json(obj, line_no):
    try:
        ts = [int(e["ts"]) for e in obj["events"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise IngestError(line_no, f"bad sequence: {exc}") from exc
    if ts != sorted(ts):
        raise IngestError(line_no, f"sequence {obj.get('type')} not timestamp-sorted")
    try:
        events = [
            Event(str(e["item"]), str(e["cat"]), int(e["price_bucket"]), int(e["ts"]), obj["type"])
            for e in obj["events"]
        ]
        return BehaviorSequence(obj["type"], events)
    except (KeyError, TypeError, ValueError) as exc:
        raise IngestError(line_no, f"bad sequence: {exc}") from exc


def request_from_json(obj, line_no=0):
    if not isinstance(obj, dict):
        raise IngestError(line_no, "expected a JSON object")
    required = ("request_id", "user_id", "ts", "user", "context", "sequences", "candidates")
    missing = [k for k in required if k not in obj]
    if missing:
        raise IngestError(line_no, f"missing keys {missing}")
    seqs = [_sequence_from_json(s, line_no) for s in obj["sequences"]]
    cands = []
    for i, c in enumerate(obj["candidates"]):
        try:
            click, conv = int(c.get("click", 0)), int(c.get("conv", 0))
            if conv and not click:
                raise IngestError(line_no, f"candidate {i}: conv=1 without click=1")
            sim = c.get("sim_seq")
            cands.append(CandidateRecord(
                features=dict(c["features"]),
                sim_seq=_sequence_from_json(sim, line_no) if sim else None,
                click=click, conv=conv,
            ))
        except IngestError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise IngestError(line_no, f"candidate {i}: {exc}") from exc
    try:
        return Request(
            request_id=str(obj["request_id"]), user_id=str(obj["user_id"]), ts=int(obj["ts"]),
            user=dict(obj["user"]), context=dict(obj["context"]),
            sequences=seqs, candidates=cands, day_marker=obj.get("day_marker"),
        )
    except (TypeError, ValueError) as exc:
        raise IngestError(line_no, str(exc)) from exc


def _sequence_to_json(seq):
    return {
        "type": seq.type_tag,
        "events": [
            {"item": e.item_id, "cat": e.category_id, "price_bucket": e.price_bucket, "ts": e.timestamp}
            for e in seq.events
        ],
    }


def request_to_json(req):
    return {
        "request_id": req.request_id,
        "user_id": req.user_id,
        "ts": req.ts,
        "day_marker": req.day_marker,
        "user": req.user,
        "context": req.context,
        "sequences": [_sequence_to_json(s) for s in req.sequences],
        "candidates": [
            {
                "features": c.features,
                "sim_seq": _sequence_to_json(c.sim_seq) if c.sim_seq is not None else None,
                "click": c.click,
                "conv": c.conv,
            }
            for c in req.candidates
        ],
    }


@dataclass
class IngestStats:
    loaded: int = 0
    skipped: list = field(default_factory=list)


def load_jsonl(path, strict=True, stats=None):
    """Yield Requests in file order.

    With ``strict=False`` bad lines are skipped and recorded in ``stats.skipped``
    as ``(line_no, reason)``; otherwise the first bad line raises IngestError.
    """
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise IngestError(line_no, f"malformed JSON: {exc.msg}") from exc
                req = request_from_json(obj, line_no)
            except IngestError as exc:
                if strict:
                    raise
                if stats is not None:
                    stats.skipped.append((exc.line_no, exc.reason))
                continue
            if stats is not None:
                stats.loaded += 1
            yield req


def dump_jsonl(requests, path):
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for req in requests:
            fh.write(json.dumps(request_to_json(req), sort_keys=True, separators=(",", ":")))
            fh.write("\n")
            n += 1
    return n


# ---------------------------------------------------------------------------
# synthetic logs

@dataclass
class SynthConfig:
    """Knobs for :func:`generate_synthetic`.

    Click logit is ``base_logit + signal_weight * match + noise_std * N(0, 1)``
    where ``match`` says whether the candidate's category equals the user's
    most frequently purchased category over the full (untruncated) history.
    """

    n_users: int = 400
    n_items: int = 4000
    n_categories: int = 40
    n_price_buckets: int = 10
    n_requests: int = 5000
    candidates_per_request: int = 10
    days: int = 5
    seq_len: dict = field(default_factory=lambda: {"purchase": 16, "add_to_cart": 16, "click": 32})
    history_len: dict = field(default_factory=lambda: {"purchase": 16, "add_to_cart": 16, "click": 32})
    new_events_mean: float = 1.0
    fav_prob: dict = field(default_factory=lambda: {"purchase": 0.5, "add_to_cart": 0.25, "click": 0.1})
    distractor_prob: dict = field(default_factory=lambda: {"purchase": 0.1, "add_to_cart": 0.3, "click": 0.5})
    match_prob: float = 0.5
    signal_weight: float = 4.0
    base_logit: float = -2.0
    noise_std: float = 0.3
    conv_logit: float = -1.5
    conv_weight: float = 1.5
    sim_seq_len: int = 0
    recent_noise: int = 0           # newest initial-history events drawn uniformly
    start_ts: int = 1_700_006_400_000

    def validate(self):
        for name in ("n_users", "n_items", "n_requests", "candidates_per_request", "days"):
            if getattr(self, name) < 1:
                raise ValueError(f"synth.{name} must be >= 1")
        if self.n_categories < 2:
            raise ValueError("synth.n_categories must be >= 2")
        if self.n_items < self.n_categories:
            raise ValueError("synth.n_items must be >= n_categories")
        if not 0 <= self.match_prob <= 1:
            raise ValueError("synth.match_prob must be in [0, 1]")
        if min(self.noise_std, self.new_events_mean, self.sim_seq_len, self.recent_noise) < 0:
            raise ValueError("synth.noise_std/new_events_mean/sim_seq_len/recent_noise must be >= 0")
        for t, n in self.seq_len.items():
            if t not in INTENT_RANK or n < 0:
                raise ValueError(f"synth.seq_len: bad entry {t}={n}")
            if self.history_len.get(t, n) < n:
                raise ValueError(f"synth.history_len[{t}] shorter than seq_len")
        for probs in (self.fav_prob, self.distractor_prob):
            for t, p in probs.items():
                if not 0 <= p <= 1:
                    raise ValueError(f"synth probability {t}={p} out of range")
        return self

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d).validate()

    def to_dict(self):
        return asdict(self)


def click_probability(match, config, noise=0.0):
    z = config.base_logit + config.signal_weight * float(match) + noise
    return float(sigmoid(np.array([z]))[0])


def most_frequent(categories):
    """Mode of a category list; ties go to the earliest first occurrence."""
    counts = {}
    for c in categories:
        counts[c] = counts.get(c, 0) + 1
    best = None
    for c in categories:
        if best is None or counts[c] > counts[best]:
            best = c
    return best


class _World:
    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.rng = rng
        self.item_cat = rng.integers(0, cfg.n_categories, size=cfg.n_items)
        self.item_cat[: cfg.n_categories] = np.arange(cfg.n_categories)
        self.item_price = rng.integers(0, cfg.n_price_buckets, size=cfg.n_items)
        self.items_by_cat = [np.flatnonzero(self.item_cat == c) for c in range(cfg.n_categories)]
        self.fav = rng.integers(0, cfg.n_categories, size=cfg.n_users)
        self.distractor = (self.fav + rng.integers(1, cfg.n_categories, size=cfg.n_users)) % cfg.n_categories
        self.profile = [
            {"user_id": f"u{u}", "age": int(rng.integers(0, 8)), "gender": int(rng.integers(0, 3)),
             "city": int(rng.integers(0, 20))}
            for u in range(cfg.n_users)
        ]

    def draw_category(self, u, t, uniform=False):
        if uniform:
            return int(self.rng.integers(0, self.cfg.n_categories))
        r = self.rng.random()
        fp = self.cfg.fav_prob.get(t, 0.0)
        dp = self.cfg.distractor_prob.get(t, 0.0)
        if r < fp:
            return int(self.fav[u])
        if r < fp + dp:
            return int(self.distractor[u])
        return int(self.rng.integers(0, self.cfg.n_categories))

    def draw_item(self, cat):
        pool = self.items_by_cat[cat]
        return int(pool[self.rng.integers(0, len(pool))])

    def event(self, u, t, ts, uniform=False):
        item = self.draw_item(self.draw_category(u, t, uniform))
        return Event(f"i{item}", f"c{self.item_cat[item]}", int(self.item_price[item]), int(ts), t)


def deep_signal_config(**overrides):
    """Purchase-only static histories whose newest 16 events carry no signal.

    A 16-event window sees only noise, 32 sees 16 informative events and
    64 sees 48, so the attainable loss falls with sequence length.
    """
    base = dict(n_users=2000, seq_len={"purchase": 64}, history_len={"purchase": 64},
                fav_prob={"purchase": 0.4}, distractor_prob={"purchase": 0.2},
                new_events_mean=0.0, recent_noise=16)
    base.update(overrides)
    return SynthConfig(**base)


def generate_synthetic(config, seed):
    """Yield a deterministic stream of Requests in chronological order."""
    cfg = config.validate()
    rng = np.random.default_rng(seed)
    world = _World(cfg, rng)
    types = [t for t in sorted(cfg.seq_len, key=lambda t: -INTENT_RANK[t])]
    day_ms = 86_400_000
    span = cfg.days * day_ms
    req_ts = np.sort(rng.integers(0, span, size=cfg.n_requests)) + cfg.start_ts
    history = {}

    def fresh_history(u, before_ts):
        hist = {}
        for t in types:
            n = cfg.history_len.get(t, cfg.seq_len[t])
            offsets = np.sort(rng.integers(1, 30 * day_ms, size=n))[::-1]
            hist[t] = [world.event(u, t, before_ts - int(o), i >= n - cfg.recent_noise)
                       for i, o in enumerate(offsets)]
        return hist

    for r, ts in enumerate(req_ts):
        ts = int(ts)
        u = int(rng.integers(0, cfg.n_users))
        if u not in history:
            history[u] = fresh_history(u, ts)
        else:
            last = max(h[-1].timestamp for h in history[u].values() if h)
            for t in types:
                k = int(rng.poisson(cfg.new_events_mean))
                if k:
                    stamps = np.sort(rng.integers(last + 1, max(ts, last + 2), size=k))
                    history[u][t].extend(world.event(u, t, int(s)) for s in stamps)
        hist = history[u]
        purchases = [e.category_id for e in hist.get("purchase", [])]
        top = most_frequent(purchases) if purchases else f"c{world.fav[u]}"
        top_idx = int(top[1:])
        sequences = [
            BehaviorSequence(t, hist[t][max(0, len(hist[t]) - cfg.seq_len[t]):]) for t in types
        ]
        cands = []
        for _ in range(cfg.candidates_per_request):
            match = rng.random() < cfg.match_prob
            if match:
                cat = top_idx
            else:
                cat = (top_idx + int(rng.integers(1, cfg.n_categories))) % cfg.n_categories
            item = world.draw_item(cat)
            noise = cfg.noise_std * rng.standard_normal()
            click = int(rng.random() < click_probability(match, cfg, noise))
            conv = 0
            if click:
                zc = cfg.conv_logit + cfg.conv_weight * float(match)
                conv = int(rng.random() < 1.0 / (1.0 + math.exp(-zc)))
            sim = None
            if cfg.sim_seq_len:
                same = [e for t in types for e in hist[t] if e.category_id == f"c{cat}"]
                same.sort(key=lambda e: e.timestamp)
                same = same[-cfg.sim_seq_len:]
                if same:
                    sim = BehaviorSequence("click", [
                        Event(e.item_id, e.category_id, e.price_bucket, e.timestamp, "click") for e in same
                    ])
            cands.append(CandidateRecord(
                features={"item": f"i{item}", "cat": f"c{cat}", "price_bucket": int(world.item_price[item]),
                          "brand": f"b{item % 97}"},
                sim_seq=sim, click=click, conv=conv,
            ))
        yield Request(
            request_id=f"r{r}",
            user_id=f"u{u}",
            ts=ts,
            user=dict(world.profile[u]),
            context={"hour": (ts // 3_600_000) % 24, "device": int(rng.integers(0, 3)),
                     "weekday": (ts // day_ms) % 7},
            sequences=sequences,
            candidates=cands,
            day_marker=int((ts - cfg.start_ts) // day_ms),
        )
