"""Two-stage serving with cross-candidate and cross-request KV caching.

Stage 1 runs the S-side of the stack once per request and keeps, per layer,
the keys/values of the S rows that layer sees plus the S outputs deeper
layers need. Stage 2 scores each candidate's NS-tokens against that state.

Every per-position S quantity depends only on earlier positions, so cached
rows survive appended behaviors. What does *not* survive is a shift of a
pyramid window: the output of layer ``n`` at position ``p`` attends over the
rows layer ``n-1`` retained, so it depends on where that window starts.
Each cached layer is therefore stamped with the window starts it was
computed under, and a changed stamp discards that layer.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import block
from .numerics import FlopCounter, phase, rms_norm
from .tokenizer import structure_key

log = logging.getLogger(__name__)


class CacheError(RuntimeError):
    pass


@dataclass
class LayerCache:
    kv_stamp: tuple = None
    out_stamp: tuple = None
    K: np.ndarray = None
    V: np.ndarray = None
    X: np.ndarray = None
    kv_have: np.ndarray = None
    out_have: np.ndarray = None

    def grow(self, P, d, dtype):
        if self.K is None:
            self.K, self.V, self.X = (np.zeros((P, d), dtype) for _ in range(3))
            self.kv_have = np.zeros(P, bool)
            self.out_have = np.zeros(P, bool)
            return
        old = self.K.shape[0]
        if P <= old:
            return
        pad = ((0, P - old), (0, 0))
        self.K, self.V, self.X = (np.pad(a, pad) for a in (self.K, self.V, self.X))
        self.kv_have = np.pad(self.kv_have, (0, P - old))
        self.out_have = np.pad(self.out_have, (0, P - old))


@dataclass
class UserCache:
    fingerprint: tuple
    s_keys: tuple
    x0: np.ndarray
    layers: list
    starts: list = field(default_factory=list)

    @property
    def L_cached(self):
        return len(self.s_keys)


@dataclass
class RequestState:
    """Read-only stage-1 output consumed by stage 2."""

    request: object
    L_S: int
    schedule: list
    starts: list
    kv: list            # per layer: (K_window, V_window, positions)
    new_kv_rows: int = 0
    new_out_rows: int = 0
    full_recompute: bool = False


@dataclass
class SessionPlan:
    request_id: str
    s_tokens: int
    delta: int
    candidates: int


class KVCacheStore:
    """Per-user stage-1 state with LRU eviction."""

    def __init__(self, capacity=10_000):
        self.capacity = capacity
        self._users = OrderedDict()
        self.stats = {"hits": 0, "cold": 0, "invalidated": 0, "evicted": 0}

    def __len__(self):
        return len(self._users)

    def get(self, user_id):
        entry = self._users.get(user_id)
        if entry is not None:
            self._users.move_to_end(user_id)
        return entry

    def put(self, user_id, entry):
        self._users[user_id] = entry
        self._users.move_to_end(user_id)
        while len(self._users) > self.capacity:
            self._users.popitem(last=False)
            self.stats["evicted"] += 1

    def invalidate(self, user_id=None):
        if user_id is None:
            self._users.clear()
        else:
            self._users.pop(user_id, None)

    def L_cached(self, user_id):
        entry = self._users.get(user_id)
        return 0 if entry is None else entry.L_cached


def _check_cacheable(model):
    if not model.config.causal:
        raise CacheError("full attention lets S rows see NS rows; KV caching needs the causal mask")


def window_starts(schedule, L_S, L_NS):
    """First retained S position after each layer (``starts[0] = 0``)."""
    return [L_S - (Ln - L_NS) for Ln in schedule]


def plan_session(model, request, store):
    enc = model.encode([(request, request.candidates[0])])
    return SessionPlan(request.request_id, enc.L_S, enc.L_S - store.L_cached(request.user_id),
                       len(request.candidates))


def stage1_s_side(model, request, store):
    """Run (or extend) the S side for ``request``; returns a :class:`RequestState`."""
    _check_cacheable(model)
    cfg = model.config
    L_NS, H, N = cfg.L_NS, cfg.n_heads, cfg.n_layers
    enc = model.encode([(request, request.candidates[0])])
    P = enc.L_S
    keys = enc.s_keys[0]
    schedule = model.schedule(P)
    starts = window_starts(schedule, P, L_NS)

    entry = store.get(request.user_id)
    full = entry is None
    if entry is not None:
        reason = None
        if entry.fingerprint != model.fingerprint:
            reason = "parameter fingerprint changed"
        elif keys[: entry.L_cached] != entry.s_keys:
            reason = "history is not an extension of the cached prefix"
        if reason:
            log.debug("user %s: %s; full recompute", request.user_id, reason)
            store.stats["invalidated"] += 1
            entry, full = None, True
        else:
            store.stats["hits"] += 1
    else:
        store.stats["cold"] += 1

    start = 0 if entry is None else entry.L_cached
    fresh = model.tokenizer.s_rows_for_keys(keys[start:], np.arange(start, P))
    if entry is None:
        x0 = fresh
        entry = UserCache(model.fingerprint, keys, x0, [LayerCache() for _ in range(N)])
    else:
        # rows already cached keep their exact values
        x0 = np.concatenate([entry.x0[:start], fresh])
        entry.x0, entry.s_keys = x0, keys

    d, dtype = cfg.d_model, model.dtype
    prev = x0
    kv = []
    new_kv = new_out = 0
    for n in range(1, N + 1):
        prefix = f"b{n - 1}"
        lc = entry.layers[n - 1]
        lc.grow(P, d, dtype)
        kv_stamp, out_stamp = tuple(starts[: n - 1]), tuple(starts[:n])
        if lc.kv_stamp != kv_stamp:
            lc.kv_have[:] = False
            lc.kv_stamp = kv_stamp
        if lc.out_stamp != out_stamp:
            lc.out_have[:] = False
            lc.out_stamp = out_stamp
        s_in, s_out = starts[n - 1], starts[n]
        win = np.arange(s_in, P)
        need = win[~lc.kv_have[s_in:P]]
        if need.size:
            xn = rms_norm(prev[need][None], model.params[f"{prefix}.g1"])
            with phase("attention"):
                k, v = block.mixed_qkv(model.params, prefix, xn, 0, "kv")
            lc.K[need], lc.V[need] = k[0], v[0]
            lc.kv_have[need] = True
            new_kv += need.size
        kv.append((lc.K[s_in:P], lc.V[s_in:P], win))
        if n == N:
            break
        need = np.arange(s_out, P)
        need = need[~lc.out_have[s_out:P]]
        if need.size:
            x_need = prev[need][None]
            xn = rms_norm(x_need, model.params[f"{prefix}.g1"])
            with phase("attention"):
                (q,) = block.mixed_qkv(model.params, prefix, xn, 0, "q")
                mask = block.causal_mask(need, win)
                attn, _ = block.causal_attention(model.params, prefix, q, lc.K[s_in:P][None],
                                                 lc.V[s_in:P][None], mask, H, 0)
            z = x_need + attn
            zn = rms_norm(z, model.params[f"{prefix}.g2"])
            with phase("ffn"):
                f, _ = block.mixed_ffn(model.params, prefix, zn, 0)
            lc.X[need] = (z + f)[0]
            lc.out_have[need] = True
            new_out += need.size
        prev = lc.X
    entry.fingerprint = model.fingerprint
    entry.starts = starts
    store.put(request.user_id, entry)
    return RequestState(request, P, schedule, starts, kv, new_kv, new_out, full)


def stage2_candidate(model, state, candidates=None):
    """Per-task logits for ``candidates`` (default: all of the request's)."""
    if state is None:
        raise CacheError("stage 2 needs the stage-1 state of this request")
    _check_cacheable(model)
    cfg = model.config
    req = state.request
    candidates = req.candidates if candidates is None else candidates
    L_NS, H, P = cfg.L_NS, cfg.n_heads, state.L_S
    groups = {}
    for i, c in enumerate(candidates):
        groups.setdefault(structure_key(req, c, cfg.tokenizer)[1], []).append(i)
    out = {t: np.zeros(len(candidates)) for t in cfg.tasks}
    ns_pos = P + np.arange(L_NS)
    for idx in groups.values():
        enc = model.tokenizer.encode([(req, candidates[i]) for i in idx], with_s=False)
        x, _ = model.tokenizer.forward_ns(enc)
        C = x.shape[0]
        for n in range(1, cfg.n_layers + 1):
            prefix = f"b{n - 1}"
            Kw, Vw, win = state.kv[n - 1]
            xn = rms_norm(x, model.params[f"{prefix}.g1"])
            with phase("attention"):
                q, k, v = block.mixed_qkv(model.params, prefix, xn, L_NS, "qkv")
                K = np.concatenate([np.broadcast_to(Kw, (C,) + Kw.shape), k], axis=1)
                V = np.concatenate([np.broadcast_to(Vw, (C,) + Vw.shape), v], axis=1)
                mask = block.causal_mask(ns_pos, np.concatenate([win, ns_pos]))
                attn, _ = block.causal_attention(model.params, prefix, q, K, V, mask, H, L_NS)
            z = x + attn
            zn = rms_norm(z, model.params[f"{prefix}.g2"])
            with phase("ffn"):
                f, _ = block.mixed_ffn(model.params, prefix, zn, L_NS)
            x = z + f
        logits, _ = model._heads_forward(x.reshape(C, -1))
        for t in cfg.tasks:
            out[t][idx] = logits[t]
    return out


def monolithic_logits(model, request, candidates=None):
    """Reference: full forward for every candidate, grouped by structure."""
    cfg = model.config
    candidates = request.candidates if candidates is None else candidates
    out = {t: np.zeros(len(candidates)) for t in cfg.tasks}
    groups = {}
    for i, c in enumerate(candidates):
        groups.setdefault(structure_key(request, c, cfg.tokenizer), []).append(i)
    for idx in groups.values():
        logits, _ = model.forward(model.encode([(request, candidates[i]) for i in idx]))
        for t in cfg.tasks:
            out[t][idx] = logits[t]
    return out


def score_request(model, request, store, counter=None):
    """Stage 1 then stage 2; with a counter, FLOPs are split into two phases."""
    counter = counter or FlopCounter()
    s1, s2 = FlopCounter(), FlopCounter()
    with s1.activate():
        state = stage1_s_side(model, request, store)
    with s2.activate():
        logits = stage2_candidate(model, state)
    counter.merge(s1)
    counter.merge(s2)
    return logits, state, s1.forward_total(), s2.forward_total()


def verify_equivalence(model, request, tolerance=1e-5, store=None):
    """Max-abs-diff between cached two-stage and monolithic logits, per candidate."""
    store = store if store is not None else KVCacheStore()
    cached, state, _, _ = score_request(model, request, store)
    mono = monolithic_logits(model, request)
    diffs = np.zeros(len(request.candidates))
    for t in model.config.tasks:
        diffs = np.maximum(diffs, np.abs(cached[t] - mono[t]))
    return {
        "request_id": request.request_id,
        "max_abs_diff": float(diffs.max()),
        "per_candidate": diffs.tolist(),
        "tolerance": tolerance,
        "full_recompute": state.full_recompute,
        "passed": bool(diffs.max() <= tolerance),
    }
