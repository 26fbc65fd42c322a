"""``onetrans`` command line: datagen, train, eval, bench, verify.

Exit codes: 0 success, 1 validation/usage error, 2 verification failure.
Logs go to stderr; reports and checkpoints go to files.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import bench, cache, plotting
from . import config as runconfig
from .features import IngestError, SynthConfig, dump_jsonl, generate_synthetic, load_jsonl
from .model import ConfigError, build_model, load_model, tiny_config
from .train import evaluate, next_batch_loop

log = logging.getLogger("onetrans")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _add_common(p, seed_required=False):
    p.add_argument("--config", help="YAML/JSON run config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. train.batch_size=64")
    p.add_argument("--seed", type=int, required=seed_required)


def build_parser():
    ap = _Parser(prog="onetrans", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("datagen", help="write a synthetic JSON-lines log")
    _add_common(p, seed_required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="next-batch training; writes a checkpoint and metrics")
    _add_common(p, seed_required=True)
    p.add_argument("--data", required=True, help="JSON-lines path or 'synthetic'")
    p.add_argument("--out", required=True, help="checkpoint path (.npz)")

    p = sub.add_parser("eval", help="score a log with a checkpoint (no updates)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="metrics CSV (default: next to the checkpoint)")

    p = sub.add_parser("bench", help="ablation / scaling / perf reports")
    bsub = p.add_subparsers(dest="bench_command", parser_class=_Parser)
    b = bsub.add_parser("ablation")
    _add_common(b, seed_required=True)
    b.add_argument("--data", default="synthetic")
    b.add_argument("--budget-steps", type=int)
    b.add_argument("--out", required=True)
    b = bsub.add_parser("scaling")
    _add_common(b, seed_required=True)
    b.add_argument("--data", default="synthetic")
    b.add_argument("--axis", choices=["length", "depth", "width"])
    b.add_argument("--grid", help="comma-separated values, e.g. 16,32,64")
    b.add_argument("--seeds", help="comma-separated model seeds (default: --seed)")
    b.add_argument("--out", required=True)
    b = bsub.add_parser("perf")
    _add_common(b, seed_required=True)
    b.add_argument("--toggles", help="comma-separated subset of pyramid,cache")
    b.add_argument("--candidates", type=int)
    b.add_argument("--requests", type=int)
    b.add_argument("--reps", type=int)
    b.add_argument("--out", required=True)

    p = sub.add_parser("verify", help="cached two-stage scoring equals the monolithic forward")
    p.add_argument("--model", default="tiny", help="'tiny' or a checkpoint path")
    p.add_argument("--seeds", type=int)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[])
    p.add_argument("--out", default="verify_report.json", help="JSON report path")
    return ap


def _load_config(args, extra=()):
    overrides = list(getattr(args, "set", []) or []) + list(extra)
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    return runconfig.load(getattr(args, "config", None), overrides)


def _requests(data, rc, synth=None):
    if data in (None, "synthetic"):
        return list(generate_synthetic(synth or rc.synth_config(), rc.seed))
    if not Path(data).exists():
        raise UsageError(f"data file not found: {data}")
    return list(load_jsonl(data))


def _write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    log.info("wrote %s", path)
    return path


def cmd_datagen(args):
    rc = _load_config(args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    n = dump_jsonl(generate_synthetic(rc.synth_config(), rc.seed), out)
    rc.dump_effective(out.parent)
    log.info("wrote %s requests to %s", n, out)
    return 0


def cmd_train(args):
    rc = _load_config(args)
    reqs = _requests(args.data, rc)
    model = build_model(rc.model_config(), seed=rc.seed)
    rep = next_batch_loop(reqs, model, rc.train_config(), progress_every=100)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    stem = out.with_suffix("")
    _write(f"{stem}_metrics.csv", rep.ledger.to_csv())
    plotting.plot_daily(rep.ledger.daily(), f"{stem}_daily.png")
    rc.dump_effective(out.parent)
    for t, (a, ua) in rep.metrics.items():
        log.info("%s macro AUC %s UAUC %s", t, a, ua)
    return 0


def cmd_eval(args):
    if not Path(args.ckpt).exists():
        raise UsageError(f"checkpoint not found: {args.ckpt}")
    model = load_model(args.ckpt)
    if not Path(args.data).exists():
        raise UsageError(f"data file not found: {args.data}")
    ledger = evaluate(model, load_jsonl(args.data))
    out = args.out or f"{Path(args.ckpt).with_suffix('')}_eval.csv"
    _write(out, ledger.to_csv())
    return 0


def cmd_bench(args):
    if args.bench_command is None:
        raise UsageError("bench needs one of: ablation, scaling, perf")
    extra = []
    if args.bench_command == "ablation" and args.budget_steps is not None:
        extra.append(f"bench.ablation.budget_steps={args.budget_steps}")
    if args.bench_command == "scaling":
        if args.axis:
            extra.append(f"bench.scaling.axis={args.axis}")
        if args.grid:
            extra.append(f"bench.scaling.grid=[{args.grid}]")
        if args.seeds:
            extra.append(f"bench.scaling.seeds=[{args.seeds}]")
    if args.bench_command == "perf":
        for k in ("candidates", "requests", "reps"):
            if getattr(args, k) is not None:
                extra.append(f"bench.perf.{k}={getattr(args, k)}")
        if args.toggles:
            extra.append(f"bench.perf.toggles=[{args.toggles}]")
    rc = _load_config(args, extra)
    mcfg, tcfg = rc.model_config(), rc.train_config()
    out = Path(args.out)
    if args.bench_command == "ablation":
        spec = bench.AblationSpec(**rc.bench["ablation"])
        rows, text = bench.run_ablation(mcfg, _requests(args.data, rc), tcfg, rc.seed, spec)
        plot = plotting.plot_ablation
    elif args.bench_command == "scaling":
        s = rc.bench["scaling"]
        spec = bench.ScalingSpec(s["axis"], list(s["grid"]), list(s["seeds"]))
        rows, text = bench.run_scaling(mcfg, _requests(args.data, rc), spec, tcfg)
        plot = plotting.plot_scaling
    else:
        p = rc.bench["perf"]
        synth = replace(rc.synth_config(), candidates_per_request=p["candidates"],
                        n_requests=p["requests"]).validate()
        reqs = list(generate_synthetic(synth, rc.seed))
        rows, text = bench.measure_runtime_memory(mcfg, reqs, p["toggles"], p["reps"], rc.seed)
        plot = plotting.plot_perf
    _write(out, text)
    plot(rows, out.with_suffix(".png"))
    rc.dump_effective(out.parent)
    return 0


def cmd_verify(args):
    extra = []
    if args.seeds is not None:
        extra.append(f"verify.seeds={args.seeds}")
    if args.tolerance is not None:
        extra.append(f"verify.tolerance={args.tolerance}")
    rc = _load_config(args, extra)
    n_seeds, tol = rc.verify["seeds"], rc.verify["tolerance"]
    if args.model == "tiny":
        variants = [(f"{fus}/pyramid={pyr}", tiny_config(pyramid=pyr, tokenizer=dict(fusion=fus, sim=True)))
                    for fus in ("ts_aware", "ts_agnostic") for pyr in ("linear", "none")]
        ckpt = None
    else:
        if not Path(args.model).exists():
            raise UsageError(f"checkpoint not found: {args.model}")
        ckpt = load_model(args.model)
        variants = [("checkpoint", ckpt.config)]
    synth = SynthConfig(n_requests=4, candidates_per_request=6, sim_seq_len=4)
    rows, failed, worst = [], 0, 0.0
    for seed in range(n_seeds):
        reqs = list(generate_synthetic(synth, seed))
        for name, cfg in variants:
            model = ckpt or build_model(cfg, seed=seed)
            try:
                rep = cache.verify_equivalence(model, reqs[-1], tolerance=tol)
            except cache.CacheError as exc:
                log.error("%s: %s", name, exc)
                return 2
            worst = max(worst, rep["max_abs_diff"])
            failed += not rep["passed"]
            rows.append({"seed": seed, "variant": name, "max_abs_diff": rep["max_abs_diff"],
                         "passed": rep["passed"]})
    report = {"model": args.model, "tolerance": tol, "cases": len(rows), "failed": failed,
              "worst_max_abs_diff": worst, "results": rows}
    _write(args.out, json.dumps(report, indent=1, sort_keys=True) + "\n")
    log.info("verify: %d cases, %d failed, worst max-abs-diff %.3e (tolerance %.1e)",
             len(rows), failed, worst, tol)
    return 2 if failed else 0


COMMANDS = {"datagen": cmd_datagen, "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench,
            "verify": cmd_verify}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(stream=sys.stderr, level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, IngestError, ValueError) as exc:
        print(f"onetrans {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
