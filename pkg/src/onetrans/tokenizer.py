"""Unified tokenizer: Request + candidate -> ``[S-tokens ; NS-tokens]``.

The heavy lifting happens on batches of examples that share one *structure*
(per-type sequence lengths and SIM length), so everything is a dense
``(B, L, d)`` array. Single-example helpers wrap the batched path.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import layers
from .features import BEHAVIOR_TYPES, EVENT_FIELDS, INTENT_RANK, table_name
from .numerics import default_dtype, phase

DEFAULT_NS_FEATURES = (
    "context.device", "context.hour", "context.weekday",
    "item.brand", "item.cat", "item.item", "item.price_bucket",
    "user.age", "user.city", "user.gender", "user.user_id",
)
MISSING = "<missing>"
TYPE_INDEX = {t: i for i, t in enumerate(BEHAVIOR_TYPES)}


class TokenizerConfigError(ValueError):
    pass


@dataclass
class TokenizerConfig:
    ns: str = "autosplit"
    fusion: str = "ts_aware"
    use_sep: bool = True
    L_NS: int = 8
    groups: Optional[list] = None
    ns_features: list = field(default_factory=lambda: list(DEFAULT_NS_FEATURES))
    seq_types: list = field(default_factory=lambda: ["purchase", "add_to_cart", "click"])
    intent_order: list = field(default_factory=lambda: ["purchase", "add_to_cart", "click", "impression"])
    max_len: dict = field(default_factory=dict)
    emb_dim: int = 8
    bucket_count: int = 2 ** 17
    mlp_mult: int = 2
    use_positions: bool = False
    max_positions: int = 1024
    sim: bool = False

    @property
    def n_feature_tokens(self):
        return self.L_NS - (1 if self.sim else 0)

    def resolved_groups(self):
        """Explicit groups, or the sorted feature list cut into contiguous chunks."""
        if self.groups is not None:
            return [list(g) for g in self.groups]
        feats = sorted(self.ns_features)
        chunks = np.array_split(np.arange(len(feats)), self.n_feature_tokens)
        return [[feats[i] for i in c] for c in chunks]

    def validate(self):
        if self.ns not in ("autosplit", "groupwise"):
            raise TokenizerConfigError(f"tokenizer.ns must be autosplit|groupwise, got {self.ns!r}")
        if self.fusion not in ("ts_aware", "ts_agnostic"):
            raise TokenizerConfigError(f"tokenizer.fusion must be ts_aware|ts_agnostic, got {self.fusion!r}")
        if self.L_NS < 1 or self.n_feature_tokens < 1:
            raise TokenizerConfigError("tokenizer.L_NS leaves no feature tokens")
        if self.emb_dim < 1 or self.bucket_count < 1 or self.mlp_mult < 0:
            raise TokenizerConfigError("tokenizer.emb_dim/bucket_count/mlp_mult out of range")
        for t in self.seq_types:
            if t not in INTENT_RANK:
                raise TokenizerConfigError(f"tokenizer.seq_types: unknown type {t!r}")
        if len(set(self.seq_types)) != len(self.seq_types):
            raise TokenizerConfigError("tokenizer.seq_types has duplicates")
        if sorted(self.intent_order) != sorted(set(self.intent_order)) or not set(self.seq_types) <= set(self.intent_order):
            raise TokenizerConfigError("tokenizer.intent_order must be a permutation covering seq_types")
        if self.ns == "groupwise":
            groups = self.resolved_groups()
            if len(groups) != self.n_feature_tokens:
                raise TokenizerConfigError(
                    f"tokenizer.groups has {len(groups)} groups, need {self.n_feature_tokens}")
            seen = set()
            known = set(self.ns_features)
            for g in groups:
                if not g:
                    raise TokenizerConfigError("tokenizer.groups contains an empty group")
                for f in g:
                    if f not in known:
                        raise TokenizerConfigError(f"tokenizer.groups: unknown feature {f!r}")
                    if f in seen:
                        raise TokenizerConfigError(f"tokenizer.groups: feature {f!r} in two groups")
                    seen.add(f)
            if seen != known:
                raise TokenizerConfigError(f"tokenizer.groups misses {sorted(known - seen)}")
        return self


@dataclass
class TokenSequence:
    tokens: np.ndarray
    L_S: int
    L_NS: int
    seq_type_ids: np.ndarray
    positions: np.ndarray

    @property
    def L(self):
        return self.L_S + self.L_NS

    @property
    def s_block(self):
        return self.tokens[: self.L_S]

    @property
    def ns_block(self):
        return self.tokens[self.L_S:]


@dataclass
class Encoded:
    """Hashed row indices and ordering for a structure-homogeneous batch."""

    B: int
    lengths: dict
    active: list
    seq_rows: dict
    seq_ts: dict
    order: np.ndarray
    type_ids: np.ndarray
    n_sep: int
    ns_rows: dict
    sim_rows: Optional[dict]
    s_keys: list
    user_ids: list
    click: np.ndarray
    conv: np.ndarray

    @property
    def L_S(self):
        return self.order.shape[1]


def structure_key(request, candidate, cfg):
    lens = []
    for t in cfg.seq_types:
        s = request.sequence(t)
        n = 0 if s is None else len(s.tail(cfg.max_len.get(t)))
        lens.append(n)
    sim = 0
    if cfg.sim and candidate.sim_seq is not None:
        sim = len(candidate.sim_seq)
    return tuple(lens), sim


def merge_order_ts_aware(ts_lists, type_lists):
    """Permutation sorting events by (timestamp, higher intent first, input order)."""
    keys = [(ts, -INTENT_RANK[t], i) for i, (ts, t) in enumerate(zip(ts_lists, type_lists))]
    return [k[2] for k in sorted(keys)]


class Tokenizer:
    def __init__(self, cfg, d_model, params, store):
        self.cfg = cfg.validate()
        self.d = d_model
        self.params = params
        self.store = store
        self.hidden = cfg.mlp_mult * d_model if cfg.mlp_mult else None

    # -- parameters -------------------------------------------------------
    def init_params(self, rng):
        cfg, d, p = self.cfg, self.d, self.params
        e3 = cfg.emb_dim * len(EVENT_FIELDS)
        for t in cfg.seq_types:
            layers.init_mlp(p, f"tok.seq.{t}", rng, e3, d, self.hidden)
        if cfg.ns == "groupwise":
            for i, g in enumerate(cfg.resolved_groups()):
                layers.init_mlp(p, f"tok.ns.g{i}", rng, cfg.emb_dim * len(g), d, self.hidden)
        else:
            layers.init_mlp(p, "tok.ns", rng, cfg.emb_dim * len(cfg.ns_features),
                            d * cfg.n_feature_tokens, self.hidden)
        dt = default_dtype()
        scale = 1.0 / np.sqrt(d)
        p["tok.sep"] = (rng.standard_normal((max(len(cfg.seq_types) - 1, 1), d)) * scale).astype(dt)
        p["tok.type_emb"] = (rng.standard_normal((len(BEHAVIOR_TYPES), d)) * scale).astype(dt)
        if cfg.sim:
            layers.init_mlp(p, "tok.sim", rng, e3, d, self.hidden)
            p["tok.sim_null"] = (rng.standard_normal(d) * scale).astype(dt)
        if cfg.use_positions:
            p["tok.pos_emb"] = (rng.standard_normal((cfg.max_positions, d)) * scale).astype(dt)

    # -- encoding ---------------------------------------------------------
    def _event_rows(self, events):
        rows = {}
        for f in EVENT_FIELDS:
            tab = self.store.table(f)
            if f == "item":
                keys = [e.item_id for e in events]
            elif f == "cat":
                keys = [e.category_id for e in events]
            else:
                keys = [e.price_bucket for e in events]
            rows[f] = tab.buckets(keys)
        return rows

    def encode(self, examples, with_s=True):
        """``examples`` is a list of ``(request, candidate)`` sharing one structure.

        ``with_s=False`` skips the S side (stage-2 candidate scoring).
        """
        cfg = self.cfg
        if not examples:
            raise ValueError("empty batch")
        B = len(examples)
        structs = {structure_key(r, c, cfg) for r, c in examples}
        if not with_s:
            structs = {(tuple(0 for _ in cfg.seq_types), sim) for _, sim in structs}
        if len(structs) != 1:
            raise ValueError("batch mixes example structures; group with structure_key first")
        (lens, sim_len), = structs
        lengths = dict(zip(cfg.seq_types, lens))
        active = [t for t in cfg.seq_types if lengths[t] > 0]
        seq_rows = {t: {f: np.zeros((B, lengths[t]), np.int64) for f in EVENT_FIELDS} for t in active}
        seq_ts = {t: np.zeros((B, lengths[t]), np.int64) for t in active}
        per_example_events = []
        for b, (req, _) in enumerate(examples):
            flat = []
            for t in active:
                evs = req.sequence(t).tail(cfg.max_len.get(t)).events
                rows = self._event_rows(evs)
                for f in EVENT_FIELDS:
                    seq_rows[t][f][b] = rows[f]
                seq_ts[t][b] = [e.timestamp for e in evs]
                flat.extend((t, e) for e in evs)
            per_example_events.append(flat)
        n_events = sum(lengths[t] for t in active)

        if cfg.fusion == "ts_aware":
            n_sep = 0
            order = np.zeros((B, n_events), np.int64)
            for b, flat in enumerate(per_example_events):
                if any(e.timestamp is None for _, e in flat):
                    raise ValueError("timestamp-aware fusion needs event timestamps; use ts_agnostic")
                order[b] = merge_order_ts_aware([e.timestamp for _, e in flat], [t for t, _ in flat])
            src_types = np.array([TYPE_INDEX[t] for t in active for _ in range(lengths[t])], np.int64)
            type_ids = src_types[order] if n_events else np.zeros((B, 0), np.int64)
        else:
            offsets, pos = {}, 0
            for t in active:
                offsets[t] = pos
                pos += lengths[t]
            ranked = [t for t in cfg.intent_order if t in offsets]
            n_sep = len(ranked) - 1 if (cfg.use_sep and len(ranked) > 1) else 0
            idx, tids = [], []
            for k, t in enumerate(ranked):
                if k and n_sep:
                    idx.append(n_events + k - 1)
                    tids.append(-1)
                idx.extend(range(offsets[t], offsets[t] + lengths[t]))
                tids.extend([TYPE_INDEX[t]] * lengths[t])
            order = np.tile(np.array(idx, np.int64), (B, 1))
            type_ids = np.tile(np.array(tids, np.int64), (B, 1))

        s_keys = []
        for b, flat in enumerate(per_example_events):
            keys = []
            for j in order[b]:
                if j >= n_events:
                    keys.append(("sep", int(j - n_events)))
                else:
                    t, e = flat[j]
                    keys.append(("ev",) + e.key()[:4] + (t,))
            s_keys.append(tuple(keys))

        ns_rows = {}
        feats = [r.ns_features(c) for r, c in examples]
        for f in cfg.ns_features:
            tab = self.store.table(table_name(f))
            ns_rows[f] = tab.buckets([str(fm.get(f, MISSING)) for fm in feats])

        sim_rows = None
        if cfg.sim and sim_len:
            sim_rows = {f: np.zeros((B, sim_len), np.int64) for f in EVENT_FIELDS}
            for b, (_, cand) in enumerate(examples):
                rows = self._event_rows(cand.sim_seq.events)
                for f in EVENT_FIELDS:
                    sim_rows[f][b] = rows[f]

        return Encoded(
            B=B, lengths=lengths, active=active, seq_rows=seq_rows, seq_ts=seq_ts,
            order=order, type_ids=type_ids, n_sep=n_sep, ns_rows=ns_rows, sim_rows=sim_rows,
            s_keys=s_keys, user_ids=[r.user_id for r, _ in examples],
            click=np.array([c.click for _, c in examples], np.float64),
            conv=np.array([c.conv for _, c in examples], np.float64),
        )

    # -- forward ----------------------------------------------------------
    def _gather_events(self, rows):
        return np.concatenate([self.store.table(f).rows[rows[f]] for f in EVENT_FIELDS], axis=-1)

    def project(self, t, rows):
        """Event rows of one behavior type -> ``(B, L_t, d)`` tokens."""
        return layers.mlp_forward(self.params, f"tok.seq.{t}", self._gather_events(rows))

    def forward_s(self, enc):
        p, B, d = self.params, enc.B, self.d
        saved = {}
        with phase("tokenizer"):
            parts = []
            for t in enc.active:
                out, saved[t] = self.project(t, enc.seq_rows[t])
                parts.append(out)
            if enc.n_sep:
                parts.append(np.broadcast_to(p["tok.sep"][: enc.n_sep], (B, enc.n_sep, d)))
            if not parts:
                return np.zeros((B, 0, d), dtype=p["tok.type_emb"].dtype), saved
            buf = np.concatenate(parts, axis=1)
            xs = np.take_along_axis(buf, enc.order[..., None], axis=1)
            if self.cfg.fusion == "ts_aware":
                xs = xs + p["tok.type_emb"][enc.type_ids]
            if self.cfg.use_positions:
                xs = xs + p["tok.pos_emb"][: xs.shape[1]]
        return xs, saved

    def s_rows_for_keys(self, keys, positions):
        """X0 rows for S-token keys (as in ``Encoded.s_keys``) at absolute ``positions``.

        Lets the serving cache tokenize only newly appended behaviors.
        """
        p, d = self.params, self.d
        out = np.zeros((len(keys), d), dtype=p["tok.type_emb"].dtype)
        with phase("tokenizer"):
            by_type = {}
            for i, k in enumerate(keys):
                if k[0] == "sep":
                    out[i] = p["tok.sep"][k[1]]
                else:
                    by_type.setdefault(k[5], []).append(i)
            for t, idx in by_type.items():
                evs = [keys[i] for i in idx]
                rows = {
                    "item": self.store.table("item").buckets([k[1] for k in evs]),
                    "cat": self.store.table("cat").buckets([k[2] for k in evs]),
                    "price_bucket": self.store.table("price_bucket").buckets([k[3] for k in evs]),
                }
                y, _ = self.project(t, {f: r[None] for f, r in rows.items()})
                if self.cfg.fusion == "ts_aware":
                    y = y + p["tok.type_emb"][TYPE_INDEX[t]]
                out[idx] = y[0]
            if self.cfg.use_positions:
                out = out + p["tok.pos_emb"][np.asarray(positions)]
        return out

    def _ns_inputs(self, rows_by_feature, feats):
        return np.concatenate(
            [self.store.table(table_name(f)).rows[rows_by_feature[f]] for f in feats], axis=-1)

    def forward_ns(self, enc):
        cfg, p, B, d = self.cfg, self.params, enc.B, self.d
        saved = {}
        with phase("tokenizer"):
            if cfg.ns == "groupwise":
                toks = []
                for i, g in enumerate(cfg.resolved_groups()):
                    out, saved[f"g{i}"] = layers.mlp_forward(p, f"tok.ns.g{i}", self._ns_inputs(enc.ns_rows, g))
                    toks.append(out)
                xns = np.stack(toks, axis=1)
            else:
                feats = sorted(cfg.ns_features)
                out, saved["auto"] = layers.mlp_forward(p, "tok.ns", self._ns_inputs(enc.ns_rows, feats))
                xns = out.reshape(B, cfg.n_feature_tokens, d)
            if cfg.sim:
                if enc.sim_rows is not None:
                    ev, saved["sim"] = layers.mlp_forward(p, "tok.sim", self._gather_events(enc.sim_rows))
                    pooled = ev.mean(axis=1)
                else:
                    pooled = np.broadcast_to(p["tok.sim_null"], (B, d))
                xns = np.concatenate([xns, pooled[:, None, :]], axis=1)
        return xns, saved

    def forward(self, enc):
        xs, saved_s = self.forward_s(enc)
        xns, saved_ns = self.forward_ns(enc)
        return np.concatenate([xs, xns], axis=1), (saved_s, saved_ns, xs.shape[1])

    # -- backward ---------------------------------------------------------
    def _event_backward(self, rows, d_emb, sparse):
        e = self.cfg.emb_dim
        for k, f in enumerate(EVENT_FIELDS):
            sparse.setdefault(f, []).append((rows[f].ravel(), d_emb[..., k * e:(k + 1) * e].reshape(-1, e)))

    def backward(self, enc, dx0, saved, grads, sparse):
        """Accumulate dense grads into ``grads`` and embedding grads into ``sparse``.

        ``sparse`` maps table name -> list of ``(rows, row_grads)`` pairs.
        """
        cfg, p, B, d = self.cfg, self.params, enc.B, self.d
        saved_s, saved_ns, L_S = saved
        dxs, dxns = dx0[:, :L_S], dx0[:, L_S:]
        if L_S:
            if cfg.use_positions:
                layers._acc(grads, "tok.pos_emb", _pad_rows(dxs.sum(axis=0), p["tok.pos_emb"].shape[0]))
            if cfg.fusion == "ts_aware":
                g = np.zeros_like(p["tok.type_emb"])
                np.add.at(g, enc.type_ids.ravel(), dxs.reshape(-1, d))
                layers._acc(grads, "tok.type_emb", g)
            dbuf = np.empty_like(dxs)
            dbuf[np.arange(B)[:, None], enc.order] = dxs
            pos = 0
            for t in enc.active:
                n = enc.lengths[t]
                d_emb = layers.mlp_backward(p, f"tok.seq.{t}", dbuf[:, pos:pos + n], saved_s[t], grads)
                self._event_backward(enc.seq_rows[t], d_emb, sparse)
                pos += n
            if enc.n_sep:
                g = np.zeros_like(p["tok.sep"])
                g[: enc.n_sep] = dbuf[:, pos:].sum(axis=0)
                layers._acc(grads, "tok.sep", g)

        if cfg.sim:
            dpool = dxns[:, -1]
            if enc.sim_rows is not None:
                n = enc.sim_rows["item"].shape[1]
                dev = np.broadcast_to(dpool[:, None, :] / n, (B, n, d))
                d_emb = layers.mlp_backward(p, "tok.sim", dev, saved_ns["sim"], grads)
                self._event_backward(enc.sim_rows, d_emb, sparse)
            else:
                layers._acc(grads, "tok.sim_null", dpool.sum(axis=0))
            dxns = dxns[:, :-1]
        e = cfg.emb_dim
        if cfg.ns == "groupwise":
            chunks = [(g, layers.mlp_backward(p, f"tok.ns.g{i}", dxns[:, i], saved_ns[f"g{i}"], grads))
                      for i, g in enumerate(cfg.resolved_groups())]
        else:
            feats = sorted(cfg.ns_features)
            chunks = [(feats, layers.mlp_backward(p, "tok.ns", dxns.reshape(B, -1), saved_ns["auto"], grads))]
        for feats, d_in in chunks:
            for k, f in enumerate(feats):
                sparse.setdefault(table_name(f), []).append((enc.ns_rows[f], d_in[:, k * e:(k + 1) * e]))

    # -- flops ------------------------------------------------------------
    def flops_per_example(self, lengths, sim_len=0):
        cfg, d, h = self.cfg, self.d, self.hidden
        e3 = cfg.emb_dim * len(EVENT_FIELDS)
        n = sum(lengths.get(t, 0) for t in cfg.seq_types) * layers.mlp_flops(e3, d, h)
        if cfg.ns == "groupwise":
            n += sum(layers.mlp_flops(cfg.emb_dim * len(g), d, h) for g in cfg.resolved_groups())
        else:
            n += layers.mlp_flops(cfg.emb_dim * len(cfg.ns_features), d * cfg.n_feature_tokens, h)
        if cfg.sim and sim_len:
            n += sim_len * layers.mlp_flops(e3, d, h)
        return n


def _pad_rows(g, n):
    out = np.zeros((n, g.shape[-1]), dtype=g.dtype)
    out[: g.shape[0]] = g
    return out


def collect_sparse(sparse):
    """Merge ``(rows, grads)`` lists into ``{table: (unique_rows, summed_grads)}``."""
    out = {}
    for name, parts in sparse.items():
        rows = np.concatenate([r.ravel() for r, _ in parts])
        g = np.concatenate([x.reshape(len(r.ravel()), -1) for r, x in parts])
        uniq, inv = np.unique(rows, return_inverse=True)
        acc = np.zeros((len(uniq), g.shape[1]), dtype=g.dtype)
        np.add.at(acc, inv, g)
        out[name] = (uniq, acc)
    return out


# -- single-example operations ------------------------------------------------

def tokenize_ns_groupwise(tok, ns_features, groups=None):
    """Group-wise NS tokens for one feature map -> ``(n_groups, d)``."""
    groups = tok.cfg.resolved_groups() if groups is None else groups
    known = set(tok.cfg.ns_features)
    seen = set()
    for g in groups:
        for f in g:
            if f not in known:
                raise TokenizerConfigError(f"unknown feature {f!r}")
            if f in seen:
                raise TokenizerConfigError(f"feature {f!r} in two groups")
            seen.add(f)
    out = []
    for i, g in enumerate(groups):
        x = np.concatenate([tok.store.table(table_name(f)).lookup(str(ns_features.get(f, MISSING))) for f in g])
        y, _ = layers.mlp_forward(tok.params, f"tok.ns.g{i}", x[None])
        out.append(y[0])
    return np.stack(out)


def tokenize_ns_autosplit(tok, ns_features, n_tokens=None):
    n_tokens = n_tokens or tok.cfg.n_feature_tokens
    feats = sorted(tok.cfg.ns_features)
    x = np.concatenate([tok.store.table(table_name(f)).lookup(str(ns_features.get(f, MISSING))) for f in feats])
    y, _ = layers.mlp_forward(tok.params, "tok.ns", x[None])
    if y.shape[1] % n_tokens or y.shape[1] // n_tokens != tok.d:
        raise TokenizerConfigError(f"projection width {y.shape[1]} does not split into {n_tokens} x {tok.d}")
    return y[0].reshape(n_tokens, tok.d)


def project_sequence(tok, seq):
    if len(seq) == 0:
        return np.zeros((0, tok.d), dtype=default_dtype())
    rows = tok._event_rows(seq.events)
    y, _ = tok.project(seq.type_tag, {f: r[None] for f, r in rows.items()})
    return y[0]


def merge_timestamp_aware(tok, sequences, projected):
    """Interleave projected sequences by time and add sequence-type embeddings.

    Returns ``(tokens, type_ids, source_index)``.
    """
    flat_ts, flat_types, blocks = [], [], []
    for seq, proj in zip(sequences, projected):
        for e in seq.events:
            if e.timestamp is None:
                raise ValueError("timestamp-aware fusion needs timestamps; use timestamp-agnostic mode")
        flat_ts.extend(e.timestamp for e in seq.events)
        flat_types.extend([seq.type_tag] * len(seq))
        blocks.append(proj)
    order = np.array(merge_order_ts_aware(flat_ts, flat_types), np.int64)
    buf = np.concatenate(blocks) if blocks else np.zeros((0, tok.d))
    type_ids = np.array([TYPE_INDEX[t] for t in flat_types], np.int64)[order] if len(order) else np.zeros(0, np.int64)
    return buf[order] + tok.params["tok.type_emb"][type_ids], type_ids, order


def merge_timestamp_agnostic(tok, sequences, projected, intent_order=None, use_sep=True):
    """Concatenate highest-intent first, one SEP row between adjacent sequences."""
    intent_order = intent_order or tok.cfg.intent_order
    present = {s.type_tag: (s, p) for s, p in zip(sequences, projected) if len(s)}
    ranked = [t for t in intent_order if t in present]
    parts, tids = [], []
    for k, t in enumerate(ranked):
        if k and use_sep:
            parts.append(tok.params["tok.sep"][k - 1][None])
            tids.append(-1)
        parts.append(present[t][1])
        tids.extend([TYPE_INDEX[t]] * len(present[t][0]))
    if not parts:
        return np.zeros((0, tok.d), dtype=default_dtype()), np.zeros(0, np.int64)
    return np.concatenate(parts), np.array(tids, np.int64)


def pool_candidate_sequence(tok, seq):
    if seq is None or len(seq) == 0:
        return tok.params["tok.sim_null"].copy()
    rows = tok._event_rows(seq.events)
    y, _ = layers.mlp_forward(tok.params, "tok.sim", tok._gather_events({f: r[None] for f, r in rows.items()}))
    return y[0].mean(axis=0)


def build_x0(tok, request, candidate):
    enc = tok.encode([(request, candidate)])
    x0, _ = tok.forward(enc)
    return TokenSequence(
        tokens=x0[0], L_S=enc.L_S, L_NS=tok.cfg.L_NS,
        seq_type_ids=enc.type_ids[0], positions=enc.order[0],
    )
