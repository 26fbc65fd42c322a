"""Streaming next-batch training: dual optimizers, clipping, AUC/UAUC ledger.

Each batch is scored with the current parameters and those predictions are
logged *before* the update computed from the same forward pass is applied.
Embedding rows are updated by Adagrad, every other parameter by RMSProp.
"""

import csv
import io
import logging
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import ConfigError, task_loss
from .numerics import sigmoid
from .tokenizer import structure_key

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 256
    dense_lr: float = 0.005
    rmsprop_decay: float = 0.99999
    rmsprop_init: float = 1.0
    rmsprop_eps: float = 1e-8
    sparse_lr: float = 0.05
    adagrad_init: float = 0.1
    adagrad_eps: float = 1e-8
    dense_clip: float = 90.0
    sparse_clip: float = 120.0
    max_batches: int = 0            # 0 = whole stream

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if not 0 <= self.rmsprop_decay < 1:
            raise ConfigError("train.rmsprop_decay must be in [0, 1)")
        for k in ("dense_lr", "sparse_lr", "dense_clip", "sparse_clip"):
            if getattr(self, k) <= 0:
                raise ConfigError(f"train.{k} must be > 0")
        if self.rmsprop_init < 0 or self.adagrad_init < 0:
            raise ConfigError("optimizer accumulators must start non-negative")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d).validate()


def desk_train_config(**overrides):
    """Step sizes for ~1.5k-step desk runs.

    The production constants (lr 0.005, decay 0.99999, ms from 1.0) barely
    move parameters in that many steps; these keep the same update rules.
    """
    base = dict(batch_size=32, dense_lr=6e-4, rmsprop_decay=0.99, rmsprop_init=0.0, sparse_lr=0.05)
    base.update(overrides)
    return TrainConfig(**base).validate()


# -- optimizers ------------------------------------------------------------

@dataclass
class OptimizerState:
    sparse: dict = field(default_factory=dict)   # table -> Adagrad accumulator
    dense: dict = field(default_factory=dict)    # param -> RMSProp mean square
    step: int = 0


def adagrad_update(param, grad, acc, lr, eps=1e-8):
    """In-place Adagrad on ``param``/``acc`` (same shape)."""
    if param.shape != grad.shape or acc.shape != grad.shape:
        raise ValueError(f"shape mismatch: {param.shape} {grad.shape} {acc.shape}")
    acc += grad * grad
    param -= lr * grad / (np.sqrt(acc) + eps)
    return param, acc


def rmsprop_update(param, grad, ms, lr, decay, eps=1e-8):
    """In-place uncentered RMSProp on ``param``/``ms``."""
    if param.shape != grad.shape or ms.shape != grad.shape:
        raise ValueError(f"shape mismatch: {param.shape} {grad.shape} {ms.shape}")
    ms *= decay
    ms += (1.0 - decay) * grad * grad
    param -= lr * grad / (np.sqrt(ms) + eps)
    return param, ms


def global_norm(arrays):
    return float(np.sqrt(sum(float(np.sum(np.square(a, dtype=np.float64))) for a in arrays)))


def clip_grads(dense, sparse, dense_max=90.0, sparse_max=120.0):
    """Global-L2 clipping per group. ``sparse`` maps table -> (rows, grads).

    Returns clipped copies and the pre-clip norms.
    """
    dn = global_norm(dense.values())
    sn = global_norm(g for _, g in sparse.values())
    ds = dense_max / dn if dn > dense_max else 1.0
    ss = sparse_max / sn if sn > sparse_max else 1.0
    dense = {k: g * ds for k, g in dense.items()}
    sparse = {k: (r, g * ss) for k, (r, g) in sparse.items()}
    return dense, sparse, (dn, sn)


class DualOptimizer:
    """Adagrad for embedding tables, RMSProp for everything in ``model.params``."""

    def __init__(self, model, cfg):
        self.model, self.cfg = model, cfg
        self.state = OptimizerState()
        self.touched = {"adagrad": set(), "rmsprop": set()}

    def apply(self, grads, sparse):
        cfg, st = self.cfg, self.state
        grads, sparse, norms = clip_grads(grads, sparse, cfg.dense_clip, cfg.sparse_clip)
        for name in sorted(grads):
            p = self.model.params[name]
            ms = st.dense.get(name)
            if ms is None:
                ms = st.dense[name] = np.full_like(p, cfg.rmsprop_init)
            rmsprop_update(p, grads[name].astype(p.dtype), ms, cfg.dense_lr, cfg.rmsprop_decay,
                           cfg.rmsprop_eps)
            self.touched["rmsprop"].add(name)
        for name in sorted(sparse):
            rows, g = sparse[name]
            tab = self.model.store[name]
            acc = st.sparse.get(name)
            if acc is None:
                acc = st.sparse[name] = np.full_like(tab.rows, cfg.adagrad_init)
            p, a = tab.rows[rows], acc[rows]
            adagrad_update(p, g.astype(p.dtype), a, cfg.sparse_lr, cfg.adagrad_eps)
            tab.rows[rows], acc[rows] = p, a
            self.touched["adagrad"].add(name)
        st.step += 1
        self.model.bump_version()
        return norms


# -- metrics -----------------------------------------------------------------

def auc(preds, labels):
    """Mann-Whitney AUC with average ranks for ties; None without both classes."""
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(preds, kind="mergesort")
    sp = preds[order]
    ranks = np.empty(preds.size, dtype=np.float64)
    # average 1-based rank over each run of equal scores
    starts = np.r_[0, np.flatnonzero(np.diff(sp)) + 1]
    ends = np.r_[starts[1:], sp.size]
    ranks[order] = np.repeat((starts + ends + 1) / 2.0, ends - starts)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def uauc(preds, labels, user_ids):
    """Impression-weighted mean of per-user AUCs; single-class users are skipped."""
    preds, labels = np.asarray(preds), np.asarray(labels)
    by_user = defaultdict(list)
    for i, u in enumerate(user_ids):
        by_user[u].append(i)
    num = den = 0.0
    for u in sorted(by_user):
        idx = by_user[u]
        a = auc(preds[idx], labels[idx])
        if a is None:
            continue
        num += len(idx) * a
        den += len(idx)
    return num / den if den else None


class EvalLedger:
    """Predictions grouped by day, each stamped with the parameter version."""

    def __init__(self, tasks):
        self.tasks = list(tasks)
        self.days = defaultdict(lambda: defaultdict(list))   # day -> task -> rows
        self.stamps = []

    def log(self, day_markers, user_ids, preds, labels, version):
        """``preds``/``labels``: {task: array}; CVR rows are logged for clicks only."""
        self.stamps.append(version)
        click = labels["ctr"]
        for t in self.tasks:
            keep = np.ones(len(click), bool) if t == "ctr" else click.astype(bool)
            for i in np.flatnonzero(keep):
                self.days[day_markers[i]][t].append((user_ids[i], float(preds[t][i]), int(labels[t][i])))

    def daily(self):
        out = []
        for day in sorted(self.days):
            for t in self.tasks:
                rows = self.days[day][t]
                if not rows:
                    out.append((day, t, None, None))
                    continue
                u, p, y = zip(*rows)
                out.append((day, t, auc(p, y), uauc(p, y, u)))
        return out

    def macro(self):
        res = {}
        daily = self.daily()
        for t in self.tasks:
            a = [r[2] for r in daily if r[1] == t and r[2] is not None]
            ua = [r[3] for r in daily if r[1] == t and r[3] is not None]
            res[t] = (float(np.mean(a)) if a else None, float(np.mean(ua)) if ua else None)
        return res

    def to_csv(self):
        def fmt(x):
            return "" if x is None else f"{x:.6f}"

        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["day", "task", "auc", "uauc"])
        for day, t, a, ua in self.daily():
            w.writerow([day, t, fmt(a), fmt(ua)])
        for t, (a, ua) in self.macro().items():
            w.writerow(["macro", t, fmt(a), fmt(ua)])
        return buf.getvalue()


# -- loop --------------------------------------------------------------------

@dataclass
class TrainReport:
    ledger: EvalLedger
    losses: list
    batches: int
    impressions: int
    seconds: float
    clip_events: int = 0

    @property
    def metrics(self):
        return self.ledger.macro()

    def final_loss(self, frac=0.2):
        """Mean pre-update batch loss over the last ``frac`` of batches."""
        if not self.losses:
            return None
        k = max(1, int(round(len(self.losses) * frac)))
        return float(np.mean(self.losses[-k:]))


def impression_batches(requests, batch_size):
    """Chronological (request, candidate) pairs cut into fixed-size batches."""
    batch = []
    for r in requests:
        for c in r.candidates:
            batch.append((r, c))
            if len(batch) == batch_size:
                yield batch
                batch = []
    if batch:
        yield batch


def _groups(batch, tok_cfg):
    g = {}
    for i, (r, c) in enumerate(batch):
        g.setdefault(structure_key(r, c, tok_cfg), []).append(i)
    return list(g.values())


def _score_batch(model, batch, train):
    """One pass over the structure groups of ``batch``; returns grads when ``train``."""
    n = len(batch)
    tasks = model.config.tasks
    click = np.array([c.click for _, c in batch], dtype=np.float64)
    conv = np.array([c.conv for _, c in batch], dtype=np.float64)
    n_ctr, n_cvr = n, int(click.sum())
    logits = {t: np.zeros(n) for t in tasks}
    grads, sparse, loss = {}, {}, 0.0
    for idx in _groups(batch, model.config.tokenizer):
        enc = model.encode([batch[i] for i in idx])
        if train:
            l, lg, g, sp = model.loss_and_grads(enc, n_ctr, n_cvr)
            for k, v in g.items():
                grads[k] = grads[k] + v if k in grads else v
            for k, (rows, gr) in sp.items():
                sparse.setdefault(k, []).append((rows, gr))
        else:
            lg, _ = model.forward(enc)
            l = task_loss(lg, enc.click, enc.conv, n_ctr, n_cvr)[0]
        loss += l
        for t in tasks:
            logits[t][idx] = lg[t]
    merged = {}
    for k, parts in sparse.items():
        rows = np.concatenate([r for r, _ in parts])
        g = np.concatenate([x for _, x in parts])
        uniq, inv = np.unique(rows, return_inverse=True)
        acc = np.zeros((len(uniq), g.shape[1]), dtype=g.dtype)
        np.add.at(acc, inv, g)
        merged[k] = (uniq, acc)
    labels = {"ctr": click, "cvr": conv}
    return loss, logits, labels, grads, merged


def next_batch_loop(requests, model, cfg=None, optimizer=None, ledger=None, progress_every=0):
    """Eval-then-train over a chronological request stream."""
    cfg = (cfg or TrainConfig()).validate()
    optimizer = optimizer or DualOptimizer(model, cfg)
    ledger = ledger or EvalLedger(model.config.tasks)
    losses, n_imp, clipped = [], 0, 0
    t0 = time.perf_counter()
    b = 0
    for b, batch in enumerate(impression_batches(requests, cfg.batch_size), 1):
        version = model.version
        loss, logits, labels, grads, sparse = _score_batch(model, batch, train=True)
        preds = {t: sigmoid(z) for t, z in logits.items()}
        ledger.log([r.day_marker for r, _ in batch], [r.user_id for r, _ in batch],
                   preds, labels, version)
        dn, sn = optimizer.apply(grads, sparse)
        clipped += (dn > cfg.dense_clip) + (sn > cfg.sparse_clip)
        losses.append(loss)
        n_imp += len(batch)
        if progress_every and b % progress_every == 0:
            log.info("batch %d  loss %.4f  impressions %d", b, loss, n_imp)
        if cfg.max_batches and b >= cfg.max_batches:
            break
    return TrainReport(ledger, losses, b, n_imp, time.perf_counter() - t0, clipped)


def evaluate(model, requests, batch_size=256):
    """Score a stream without updating; returns an :class:`EvalLedger`."""
    ledger = EvalLedger(model.config.tasks)
    for batch in impression_batches(requests, batch_size):
        _, logits, labels, _, _ = _score_batch(model, batch, train=False)
        ledger.log([r.day_marker for r, _ in batch], [r.user_id for r, _ in batch],
                   {t: sigmoid(z) for t, z in logits.items()}, labels, model.version)
    return ledger
