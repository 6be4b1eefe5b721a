"""``beamlora`` command line: train, prune-sweep, profile, sweep."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from beamlora import analysis, persist
from beamlora.config import ConfigError, LoggingSpec, RunConfig, load
from beamlora.runner import load_run, run, save_run
from beamlora.tasks import TRAIN_MODES, RunRecord

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_INPUT = 0, 2, 3, 4


def _config(args) -> RunConfig:
    cfg = load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.mode is not None:
        cfg = dataclasses.replace(cfg, mode=args.mode)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out=args.out)
    if getattr(args, "importance_every", None) is not None:
        cfg = dataclasses.replace(cfg, logging=dataclasses.replace(cfg.logging, importance_every=args.importance_every))
    return cfg


def cmd_train(args) -> int:
    cfg = _config(args)
    res = run(cfg)
    out = save_run(res)
    print(f"{cfg.mode} seed={cfg.seed}: final eval {res.record.final_eval:.6g}, "
          f"{len(res.record.events)} operation events -> {out}")
    if res.record.status != "ok":
        print(f"error: {res.record.diagnostic} (partial record written)", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_prune_sweep(args) -> int:
    _, task, model = load_run(args.checkpoint)
    directions = ("least", "most") if args.direction == "both" else (args.direction,)
    rows = []
    for d in directions:
        rows += analysis.prune_sweep(model, task, args.fractions or analysis.DECILES, args.importance, d)
    _emit(rows, args.out)
    return EXIT_OK


def cmd_profile(args) -> int:
    src = Path(args.source)
    if src.is_dir():
        path = src / "importance.jsonl"
        record = RunRecord(importance=persist.read_importance(path) if path.exists() else [])
        tables = analysis.importance_profile(record, args.importance)
    else:
        _, _, model = load_run(src)
        tables = analysis.importance_profile(model, args.importance)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    analysis.write_table(tables["spatial"], out / "importance_deciles.csv")
    analysis.write_table(tables["temporal"], out / "importance_trajectories.csv")
    print(f"wrote {out / 'importance_deciles.csv'} and {out / 'importance_trajectories.csv'}")
    return EXIT_OK


def _parse_value(axis: str, text: str):
    if axis == "ablation":
        return text
    return float(text) if axis == "p_init" else int(text)


def cmd_sweep(args) -> int:
    cfg = _config(args)
    values = [_parse_value(args.axis, v) for v in args.values]
    rows = analysis.sweep(cfg, args.axis, values, seeds=range(args.seeds))
    failures = [dict(value=r["value"], **f) for r in rows for f in r.pop("failures")]
    out = Path(cfg.out_dir())
    out.mkdir(parents=True, exist_ok=True)
    analysis.write_table(rows, out / "sweep.csv")
    with open(out / "failures.jsonl", "w") as fh:
        for f in failures:
            fh.write(json.dumps(f) + "\n")
    for r in rows:
        print(f"{args.axis}={r['value']} mode={r['mode']}: mean {r['mean']:.5g} ± {r['std']:.3g} "
              f"(lora {r['lora_mean']:.5g}), wins {r['wins_vs_lora']}/{r['n']}, failed {r['failed']}")
    return EXIT_OK


def _emit(rows, out) -> None:
    if out:
        analysis.write_table(rows, out)
        print(f"wrote {out}")
    else:
        for r in rows:
            print(f"{r['direction']:>5} f={r['fraction']:.2f} pruned={r['pruned']:3d} loss={r['loss']:.6g}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="beamlora", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def run_flags(sp):
        sp.add_argument("--config", help="YAML run config (defaults used when omitted)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory (relative paths resolve under $BEAMLORA_OUT_ROOT)")
        sp.add_argument("--mode", choices=TRAIN_MODES)

    sp = sub.add_parser("train", help="train one run and write its artifacts")
    run_flags(sp)
    sp.add_argument("--importance-every", type=int, help="log importance vectors every N steps")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("prune-sweep", help="eval loss after zeroing fractions of ranks")
    sp.add_argument("checkpoint")
    sp.add_argument("--importance", choices=analysis.IMPORTANCE_MODES, default="frobenius")
    sp.add_argument("--direction", choices=("least", "most", "both"), default="least")
    sp.add_argument("--fractions", type=float, nargs="+")
    sp.add_argument("--out", help="CSV path (stdout when omitted)")
    sp.set_defaults(fn=cmd_prune_sweep)

    sp = sub.add_parser("profile", help="importance deciles and trajectories")
    sp.add_argument("source", help="run directory (with importance.jsonl) or checkpoint")
    sp.add_argument("--importance", choices=analysis.IMPORTANCE_MODES, default="frobenius")
    sp.add_argument("--out", help="output directory")
    sp.set_defaults(fn=cmd_profile)

    sp = sub.add_parser("sweep", help="paired-seed sweep over one axis")
    run_flags(sp)
    sp.add_argument("--axis", choices=analysis.SWEEP_AXES, required=True)
    sp.add_argument("--values", nargs="+", required=True)
    sp.add_argument("--seeds", type=int, default=10)
    sp.set_defaults(fn=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (analysis.ProfileError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
