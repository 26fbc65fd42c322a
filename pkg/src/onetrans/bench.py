"""Closed-form FLOP counts, ablation/scaling sweeps and runtime measurement.

Counting convention: one multiply-add per output element per reduction step
of every matmul (``out.size * k``). Norms, activations, softmax and the
masked-out attention entries are free; masked entries are still counted
because the dense kernel computes them.
"""

import copy
import csv
import io
import logging
import math
import resource
import statistics
import time
import tracemalloc
from dataclasses import dataclass, field

from . import cache as kv
from .layers import mlp_flops
from .model import build_model, make_schedule
from .numerics import FlopCounter
from .tokenizer import Tokenizer
from .train import TrainConfig, impression_batches, next_batch_loop

log = logging.getLogger(__name__)

ABLATION_AXES = {
    "ns_tokenizer": ("autosplit", "groupwise"),
    "fusion": ("ts_aware", "ts_agnostic"),
    "sep": ("on", "off"),
    "params": ("mixed", "shared"),
    "attention": ("causal", "full"),
    "pyramid": ("on", "off"),
    "cache": ("on", "off"),
}


def s_token_count(tok_cfg, seq_lengths):
    active = [t for t in tok_cfg.seq_types if seq_lengths.get(t, 0) > 0]
    n = sum(seq_lengths[t] for t in active)
    if tok_cfg.fusion == "ts_agnostic" and tok_cfg.use_sep and len(active) > 1:
        n += len(active) - 1
    return n


def flop_formula(config, seq_lengths, sim_len=0, schedule=None, batch=1, kind="onetrans"):
    """Per-phase forward multiply-adds for a batch of one structure."""
    d, L_NS = config.d_model, config.L_NS
    L_S = s_token_count(config.tokenizer, seq_lengths)
    tok = Tokenizer(config.tokenizer, d, {}, None)
    out = {"tokenizer": tok.flops_per_example(seq_lengths, sim_len), "attention": 0, "ffn": 0}
    if kind == "pooled":
        out["heads"] = len(config.tasks) * mlp_flops((L_NS + 1) * d, 1, d)
    else:
        sched = schedule or make_schedule(config, L_S)
        h = config.ffn_mult * d
        for n in range(1, config.n_layers + 1):
            L, Lp = sched[n - 1], sched[n]
            # K,V over all rows, Q and W^O over retained rows, scores + mix
            out["attention"] += 2 * L * d * d + 2 * Lp * d * d + 2 * L * Lp * d
            out["ffn"] += 2 * Lp * d * h
        out["heads"] = len(config.tasks) * mlp_flops(L_NS * d, 1, d)
    out = {k: v * batch for k, v in out.items()}
    out["total"] = sum(out.values())
    return out


def metered_forward(model, examples):
    """Instrumented forward; returns the counter's per-phase snapshot."""
    counter = FlopCounter()
    with counter.activate():
        model.forward(model.encode(examples))
    return counter.snapshot()


def reference_structure(config):
    """Per-type lengths at the configured truncation (default 32 when unbounded)."""
    tc = config.tokenizer
    return {t: tc.max_len.get(t, 32) for t in tc.seq_types}


# -- training helpers ------------------------------------------------------

def _train_eval(config, requests, train_cfg, seed, kind="onetrans"):
    model = build_model(config, seed=seed, kind=kind)
    counter = FlopCounter()
    with counter.activate():
        rep = next_batch_loop(requests, model, train_cfg)
    return model, rep, counter


def _fmt(x, nd=6):
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if isinstance(x, float):
        return f"{x:.{nd}f}"
    return str(x)


def _to_csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(r.get(h)) for h in header])
    return buf.getvalue()


@dataclass
class AblationSpec:
    axes: list = field(default_factory=lambda: list(ABLATION_AXES))
    budget_steps: int = 0           # 0 = one full pass


def variant_config(config, axis, value):
    cfg = copy.deepcopy(config)
    tok = cfg.tokenizer
    if axis == "ns_tokenizer":
        tok.ns = value
    elif axis == "fusion":
        tok.fusion = value
    elif axis == "sep":
        # SEP rows exist only under ts_agnostic fusion; with ts_aware both rows match
        tok.use_sep = value == "on"
    elif axis == "params":
        cfg.params = value
    elif axis == "attention":
        cfg.attention = value
    elif axis == "pyramid":
        cfg.pyramid = "linear" if value == "on" else "none"
    elif axis != "cache":
        raise ValueError(f"unknown ablation axis {axis!r}")
    return cfg.validate()


def serving_flops(model, request, cache_on):
    """Forward FLOPs to score every candidate of ``request`` (cold user cache)."""
    if cache_on:
        _, _, stage1, stage2 = kv.score_request(model, request, kv.KVCacheStore())
        return stage1 + stage2
    counter = FlopCounter()
    with counter.activate():
        kv.monolithic_logits(model, request)
    return counter.forward_total()


ABLATION_COLUMNS = ["variant", "axis", "value", "auc", "uauc", "d_auc", "d_uauc", "params",
                    "flops_per_impression", "serve_flops_per_request", "cache_compatible",
                    "steps", "partial"]


def run_ablation(config, requests, train_cfg=None, seed=0, spec=None):
    """Reference plus one single-axis variant per axis; returns ``(rows, csv_text)``."""
    spec = spec or AblationSpec()
    train_cfg = copy.deepcopy(train_cfg or TrainConfig())
    if spec.budget_steps:
        train_cfg.max_batches = spec.budget_steps
    n_batches = sum(1 for _ in impression_batches(requests, train_cfg.batch_size))
    probe = requests[-1]
    ref_struct = reference_structure(config)

    def one(name, axis, value, cfg, cache_on):
        model, rep, _ = _train_eval(cfg, requests, train_cfg, seed)
        a, ua = rep.metrics["ctr"]
        compatible = cfg.causal
        return dict(variant=name, axis=axis, value=value, auc=a, uauc=ua,
                    params=model.dense_param_count(),
                    flops_per_impression=flop_formula(cfg, ref_struct)["total"],
                    serve_flops_per_request=serving_flops(model, probe, cache_on and compatible),
                    cache_compatible=int(compatible), steps=rep.batches,
                    partial=int(rep.batches < n_batches))

    rows = [one("reference", "", "", config, True)]
    ref = rows[0]
    for axis in spec.axes:
        value = ABLATION_AXES[axis][1]
        cfg = variant_config(config, axis, value)
        if axis == "cache":
            # serving-only toggle: the trained reference is reused
            r = dict(ref, variant=f"{axis}={value}", axis=axis, value=value,
                     serve_flops_per_request=serving_flops(build_model(cfg, seed=seed), probe, False))
        else:
            r = one(f"{axis}={value}", axis, value, cfg, True)
        rows.append(r)
    for r in rows:
        r["d_auc"] = None if r["auc"] is None else r["auc"] - ref["auc"]
        r["d_uauc"] = None if r["uauc"] is None else r["uauc"] - ref["uauc"]
    return rows, _to_csv(ABLATION_COLUMNS, rows)


# -- scaling ---------------------------------------------------------------

@dataclass
class ScalingSpec:
    axis: str = "length"
    grid: list = field(default_factory=lambda: [16, 32, 64])
    seeds: list = field(default_factory=lambda: [0])

    def validate(self):
        if self.axis not in ("length", "depth", "width"):
            raise ValueError("scaling axis must be length|depth|width")
        if not self.grid:
            raise ValueError("scaling grid is empty")
        return self


def scaled_config(config, axis, value):
    cfg = copy.deepcopy(config)
    if axis == "length":
        cfg.tokenizer.max_len = {t: int(value) for t in cfg.tokenizer.seq_types}
    elif axis == "depth":
        cfg.n_layers = int(value)
        if not isinstance(cfg.pyramid, str):
            cfg.pyramid = "linear"
    else:
        cfg.d_model = int(value)
    return cfg.validate()


SCALING_COLUMNS = ["axis", "value", "seeds", "train_flops", "log10_train_flops", "flops_per_impression",
                   "final_loss", "auc", "uauc", "d_uauc"]


def run_scaling(config, requests, spec, train_cfg=None):
    """One row per grid point (medians over ``spec.seeds``); returns ``(rows, csv_text)``."""
    spec.validate()
    train_cfg = train_cfg or TrainConfig()
    rows = []
    for value in spec.grid:
        cfg = scaled_config(config, spec.axis, value)
        per_seed = []
        for s in spec.seeds:
            _, rep, counter = _train_eval(cfg, requests, train_cfg, s)
            per_seed.append((counter.multiply_adds, rep.final_loss(), *rep.metrics["ctr"]))
        flops, loss, a, ua = (statistics.median(x for x in col if x is not None) if any(
            x is not None for x in col) else None for col in zip(*per_seed))
        rows.append(dict(axis=spec.axis, value=value, seeds=len(spec.seeds), train_flops=int(flops),
                         log10_train_flops=math.log10(flops),
                         flops_per_impression=flop_formula(cfg, reference_structure(cfg))["total"],
                         final_loss=loss, auc=a, uauc=ua))
    base = rows[0]["uauc"]
    for r in rows:
        r["d_uauc"] = None if r["uauc"] is None or base is None else r["uauc"] - base
    return rows, _to_csv(SCALING_COLUMNS, rows)


# -- runtime / memory ------------------------------------------------------

def _median_time(fn, reps, warmup=1):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def _peak_bytes(fn):
    tracemalloc.start()
    try:
        fn()
        return tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()


PERF_COLUMNS = ["toggle", "setting", "candidates", "requests", "median_s_per_request",
                "stage1_flops", "peak_traced_bytes", "max_rss_kb"]


def measure_runtime_memory(config, requests, toggles=("pyramid", "cache"), reps=5, seed=0):
    """Median wall time per request after one warmup, per optimisation toggle.

    ``cache``: two-stage scoring with a per-user store vs one full forward per
    candidate. ``pyramid``: monolithic scoring with the linear schedule vs none.
    Each repetition replays the whole request list against a fresh store, so
    the cached path includes cross-request reuse within the list.
    """
    rows = []
    C = len(requests[0].candidates)

    def add(toggle, setting, fn, stage1=""):
        t = _median_time(fn, reps)
        rows.append(dict(toggle=toggle, setting=setting, candidates=C, requests=len(requests),
                         median_s_per_request=t / len(requests), stage1_flops=stage1,
                         peak_traced_bytes=_peak_bytes(fn),
                         max_rss_kb=resource.getrusage(resource.RUSAGE_SELF).ru_maxrss))

    for toggle in toggles:
        if toggle == "cache":
            model = build_model(config, seed=seed)

            def cached():
                store = kv.KVCacheStore()
                for r in requests:
                    kv.stage2_candidate(model, kv.stage1_s_side(model, r, store))

            def uncached():
                for r in requests:
                    kv.monolithic_logits(model, r)

            s1 = FlopCounter()
            with s1.activate():
                kv.stage1_s_side(model, requests[0], kv.KVCacheStore())
            add("cache", "on", cached, s1.forward_total())
            add("cache", "off", uncached)
        elif toggle == "pyramid":
            for setting, pyr in (("on", "linear"), ("off", "none")):
                cfg = copy.deepcopy(config)
                cfg.pyramid = pyr
                model = build_model(cfg.validate(), seed=seed)

                def mono(model=model):
                    for r in requests:
                        kv.monolithic_logits(model, r)

                add("pyramid", setting, mono)
        else:
            raise ValueError(f"unknown toggle {toggle!r}")
    return rows, _to_csv(PERF_COLUMNS, rows)


def stage1_flops(model, request):
    counter = FlopCounter()
    with counter.activate():
        kv.stage1_s_side(model, request, kv.KVCacheStore())
    return counter.forward_total()
