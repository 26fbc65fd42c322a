"""Pyramid-stacked ranking model, task heads, losses and checkpoints."""

import itertools
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import block, layers
from .features import EmbeddingStore
from .numerics import default_dtype, phase, precision, sigmoid
from .tokenizer import Tokenizer, TokenizerConfig, collect_sparse

_model_ids = itertools.count(1)


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_layers: int = 2
    d_model: int = 32
    n_heads: int = 2
    ffn_mult: int = 2
    tasks: list = field(default_factory=lambda: ["ctr", "cvr"])
    attention: str = "causal"
    params: str = "mixed"
    pyramid: object = "linear"
    dropout: float = 0.0
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)

    @property
    def L_NS(self):
        return self.tokenizer.L_NS

    @property
    def causal(self):
        return self.attention == "causal"

    def validate(self):
        if self.n_layers < 0:
            raise ConfigError("model.n_layers must be >= 0")
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"model.d_model={self.d_model} must be divisible by model.n_heads={self.n_heads}")
        if self.ffn_mult < 1:
            raise ConfigError("model.ffn_mult must be >= 1")
        if self.dropout != 0:
            raise ConfigError("model.dropout: only 0 is supported (training is deterministic)")
        if self.attention not in ("causal", "full"):
            raise ConfigError("model.attention must be causal|full")
        if self.params not in ("mixed", "shared"):
            raise ConfigError("model.params must be mixed|shared")
        if not self.tasks or any(t not in ("ctr", "cvr") for t in self.tasks):
            raise ConfigError("model.tasks must be a non-empty subset of [ctr, cvr]")
        if isinstance(self.pyramid, str):
            if self.pyramid not in ("linear", "none"):
                raise ConfigError("model.pyramid must be linear|none or a list of retained fractions")
        else:
            fr = list(self.pyramid)
            if len(fr) != self.n_layers or any(not 0 <= f <= 1 for f in fr):
                raise ConfigError("model.pyramid fractions: one value in [0, 1] per layer")
        try:
            self.tokenizer.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def to_dict(self):
        d = asdict(self)
        if not isinstance(self.pyramid, str):
            d["pyramid"] = list(self.pyramid)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        tok = d.pop("tokenizer", {}) or {}
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        tunknown = set(tok) - set(TokenizerConfig.__dataclass_fields__)
        if tunknown:
            raise ConfigError(f"unknown tokenizer config keys: {sorted(tunknown)}")
        return cls(tokenizer=TokenizerConfig(**tok), **d).validate()


def tiny_config(**overrides):
    """OneTrans-tiny: the desk-scale default used throughout the tests."""
    tok = overrides.pop("tokenizer", {})
    tok_defaults = dict(L_NS=8, emb_dim=8, bucket_count=4096,
                        max_len={"purchase": 16, "add_to_cart": 16, "click": 32})
    tok_defaults.update(tok)
    base = dict(n_layers=2, d_model=32, n_heads=2)
    base.update(overrides)
    return ModelConfig(tokenizer=TokenizerConfig(**tok_defaults), **base).validate()


def small_config(**overrides):
    """OneTrans-S shape (6 blocks, d=256, H=4); constructible, heavy to train."""
    base = dict(n_layers=6, d_model=256, n_heads=4)
    base.update(overrides)
    tok = base.pop("tokenizer", TokenizerConfig(L_NS=12))
    return ModelConfig(tokenizer=tok, **base).validate()


def make_linear_schedule(L_total, L_NS, N):
    """Retained counts ``[L_0 = L_total, ..., L_N = L_NS]``, rounded half up."""
    if N < 1 or L_NS < 0 or L_total < L_NS:
        raise ConfigError(f"bad schedule arguments L_total={L_total} L_NS={L_NS} N={N}")
    span = L_total - L_NS
    out = [(2 * N * L_total - 2 * n * span + N) // (2 * N) for n in range(N + 1)]
    for n in range(1, N + 1):
        out[n] = max(min(out[n], out[n - 1]), L_NS)
    out[N] = L_NS
    return out


def make_schedule(config, L_S):
    L_NS, N = config.L_NS, config.n_layers
    L = L_S + L_NS
    if N == 0:
        return [L]
    if config.pyramid == "none":
        return [L] * (N + 1)
    if config.pyramid == "linear":
        return make_linear_schedule(L, L_NS, N)
    out = [L]
    for f in config.pyramid:
        out.append(max(min(L_NS + int(np.floor(f * L_S + 0.5)), out[-1]), L_NS))
    return out


def bce_with_logits(z, y):
    """Elementwise binary cross-entropy and its derivative w.r.t. the logit."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    loss = np.logaddexp(0.0, z) - y * z
    return loss, sigmoid(z) - y


def task_loss(logits, click, conv, n_ctr=None, n_cvr=None):
    """Sum of task losses: CTR over every impression, CVR over clicked ones only.

    ``n_ctr``/``n_cvr`` are the normalisers (defaults: local counts) so that
    sub-batches of one training batch can be combined. Returns
    ``(total, {task: loss}, {task: dlogit})``.
    """
    click = np.asarray(click, dtype=np.float64)
    conv = np.asarray(conv, dtype=np.float64)
    if np.any(conv > click):
        raise ValueError("conv=1 without click=1")
    parts, dlogits = {}, {}
    if "ctr" in logits:
        n = n_ctr if n_ctr is not None else len(click)
        l, g = bce_with_logits(logits["ctr"], click)
        parts["ctr"] = l.sum() / max(n, 1)
        dlogits["ctr"] = g / max(n, 1)
    if "cvr" in logits:
        n = n_cvr if n_cvr is not None else int(click.sum())
        l, g = bce_with_logits(logits["cvr"], conv)
        parts["cvr"] = (l * click).sum() / max(n, 1)
        dlogits["cvr"] = g * click / max(n, 1)
    return float(sum(parts.values())), parts, dlogits


class _Ranker:
    """Parameter bookkeeping shared by the transformer and the pooled baseline."""

    kind = "base"

    def __init__(self, config, seed=0, dtype=None):
        self.config = config.validate()
        self.seed = seed
        self.dtype = np.dtype(dtype or default_dtype()).type
        self.params = {}
        tc = config.tokenizer
        self.store = EmbeddingStore(tc.emb_dim, tc.bucket_count, seed=seed, dtype=self.dtype)
        self.tokenizer = Tokenizer(tc, config.d_model, self.params, self.store)
        self.version = 0
        self.uid = next(_model_ids)
        with precision(self.dtype):
            self._init(np.random.default_rng(seed))

    @property
    def fingerprint(self):
        return (self.uid, self.version)

    def bump_version(self):
        self.version += 1

    def dense_param_count(self):
        return int(sum(v.size for v in self.params.values()))

    def encode(self, examples):
        return self.tokenizer.encode(examples)

    def _heads_forward(self, feats):
        logits, saved = {}, {}
        with phase("heads"):
            for t in self.config.tasks:
                out, saved[t] = layers.mlp_forward(self.params, f"head.{t}", feats)
                logits[t] = out[:, 0]
        return logits, saved

    def _heads_backward(self, dlogits, saved, grads):
        dfeat = None
        for t in self.config.tasks:
            if t not in dlogits:
                continue
            dl = np.asarray(dlogits[t], dtype=self.dtype)[:, None]
            g = layers.mlp_backward(self.params, f"head.{t}", dl, saved[t], grads)
            dfeat = g if dfeat is None else dfeat + g
        return dfeat

    def predict(self, examples):
        enc = self.encode(examples)
        logits, _ = self.forward(enc)
        return {t: sigmoid(z.astype(np.float64)) for t, z in logits.items()}

    def loss_and_grads(self, enc, n_ctr=None, n_cvr=None):
        logits, cache = self.forward(enc)
        total, parts, dlogits = task_loss(logits, enc.click, enc.conv, n_ctr, n_cvr)
        grads, sparse = self.backward(dlogits, cache)
        return total, logits, grads, sparse

    # -- checkpoints -----------------------------------------------------
    def save(self, path):
        arrays = {f"p/{k}": v for k, v in self.params.items()}
        arrays.update({f"e/{k}": t.rows for k, t in self.store.items()})
        meta = {"kind": self.kind, "config": self.config.to_dict(), "seed": self.seed,
                "version": self.version, "dtype": np.dtype(self.dtype).name}
        arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)


class OneTrans(_Ranker):
    kind = "onetrans"

    def _init(self, rng):
        cfg = self.config
        self.tokenizer.init_params(rng)
        hidden = cfg.ffn_mult * cfg.d_model
        for n in range(cfg.n_layers):
            block.init_block(self.params, f"b{n}", rng, cfg.d_model, cfg.L_NS, hidden,
                             shared_only=cfg.params == "shared")
        for t in cfg.tasks:
            layers.init_mlp(self.params, f"head.{t}", rng, cfg.L_NS * cfg.d_model, 1, cfg.d_model)

    def schedule(self, L_S):
        return make_schedule(self.config, L_S)

    def forward(self, enc, return_states=False):
        """Logits per task for an encoded batch; ``cache`` feeds :meth:`backward`."""
        cfg = self.config
        x, tok_saved = self.tokenizer.forward(enc)
        sched = self.schedule(enc.L_S)
        saved, states = [], [x]
        for n in range(cfg.n_layers):
            x, s, _ = block.block_forward(self.params, f"b{n}", x, cfg.L_NS, sched[n + 1],
                                          cfg.n_heads, causal=cfg.causal)
            saved.append(s)
            if return_states:
                states.append(x)
        B = x.shape[0]
        feats = x[:, -cfg.L_NS:].reshape(B, -1)
        logits, head_saved = self._heads_forward(feats)
        cache = dict(enc=enc, tok=tok_saved, blocks=saved, head=head_saved, x_shape=x.shape)
        if return_states:
            cache["states"] = states
        return logits, cache

    def backward(self, dlogits, cache):
        cfg = self.config
        grads, sparse = {}, {}
        with phase("backward"):
            dfeat = self._heads_backward(dlogits, cache["head"], grads)
            B, Lf, d = cache["x_shape"]
            dx = np.zeros((B, Lf, d), dtype=self.dtype)
            dx[:, -cfg.L_NS:] = dfeat.reshape(B, cfg.L_NS, d)
            for n in reversed(range(cfg.n_layers)):
                dx = block.block_backward(dx, cache["blocks"][n], self.params, f"b{n}", grads)
            self.tokenizer.backward(cache["enc"], dx, cache["tok"], grads, sparse)
        return grads, collect_sparse(sparse)


class PooledBaseline(_Ranker):
    """No-attention reference: heads over ``[mean(S-tokens) ; NS-tokens]``."""

    kind = "pooled"

    def _init(self, rng):
        cfg = self.config
        self.tokenizer.init_params(rng)
        for t in cfg.tasks:
            layers.init_mlp(self.params, f"head.{t}", rng, (cfg.L_NS + 1) * cfg.d_model, 1, cfg.d_model)

    def forward(self, enc):
        x, tok_saved = self.tokenizer.forward(enc)
        B, L_S = enc.B, enc.L_S
        pooled = x[:, :L_S].mean(axis=1) if L_S else np.zeros((B, self.config.d_model), self.dtype)
        feats = np.concatenate([pooled, x[:, L_S:].reshape(B, -1)], axis=1)
        logits, head_saved = self._heads_forward(feats)
        return logits, dict(enc=enc, tok=tok_saved, head=head_saved, x_shape=x.shape)

    def backward(self, dlogits, cache):
        grads, sparse = {}, {}
        d = self.config.d_model
        with phase("backward"):
            dfeat = self._heads_backward(dlogits, cache["head"], grads)
            B, L, _ = cache["x_shape"]
            L_S = cache["enc"].L_S
            dx = np.zeros((B, L, d), dtype=self.dtype)
            if L_S:
                dx[:, :L_S] = dfeat[:, None, :d] / L_S
            dx[:, L_S:] = dfeat[:, d:].reshape(B, -1, d)
            self.tokenizer.backward(cache["enc"], dx, cache["tok"], grads, sparse)
        return grads, collect_sparse(sparse)


def build_model(config, seed=0, kind="onetrans", dtype=None):
    cls = {"onetrans": OneTrans, "pooled": PooledBaseline}[kind]
    return cls(config, seed=seed, dtype=dtype)


def load_model(path):
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        config = ModelConfig.from_dict(meta["config"])
        dtype = np.dtype(meta["dtype"]).type
        cls = {"onetrans": OneTrans, "pooled": PooledBaseline}[meta["kind"]]
        model = cls.__new__(cls)
        model.config = config
        model.seed = meta["seed"]
        model.dtype = dtype
        model.params = {k[2:]: z[k].copy() for k in z.files if k.startswith("p/")}
        tc = config.tokenizer
        model.store = EmbeddingStore(tc.emb_dim, tc.bucket_count, seed=model.seed, dtype=dtype)
        for k in z.files:
            if k.startswith("e/"):
                tab = model.store.table(k[2:])
                tab.rows = z[k].copy()
        model.tokenizer = Tokenizer(tc, config.d_model, model.params, model.store)
        model.version = meta["version"]
        model.uid = next(_model_ids)
    return model
