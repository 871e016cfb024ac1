"""``fedair`` command line: run, sweep, report."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig
from .experiment import (ExperimentError, expand_sweep, read_manifest, read_table, run_experiment,
                         sweep, table_text)

log = logging.getLogger("fedair")

# flag -> ExperimentConfig field, for options that override the config file
_RUN_FLAGS = {
    "partition": "partition", "epochs": "epochs", "lr": "learning_rate", "tx_power": "tx_power_db",
    "noise_floor": "noise_floor_db", "gap_policy": "gap_policy", "threshold": "accuracy_threshold",
    "max_rounds": "max_rounds", "profile": "profile", "data_seed": "data_seed", "init_seed": "init_seed",
    "channel_seed": "channel_seed", "max_per_class": "max_per_class", "data_dir": "data_dir",
    "out": "output_dir", "classes": "classes", "compute_timing": "compute_timing", "batch_size": "batch_size",
}


def _add_run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value file; flags below override it")
    p.add_argument("--partition", choices=["iid", "noniid"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, help="learning rate (default: profile value)")
    p.add_argument("--tx-power", type=float, metavar="DB")
    p.add_argument("--noise-floor", type=float, metavar="DB")
    p.add_argument("--seed", type=int, help="sets data, init and channel seeds together")
    p.add_argument("--data-seed", type=int)
    p.add_argument("--init-seed", type=int)
    p.add_argument("--channel-seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--profile", choices=["desk", "reference"])
    p.add_argument("--threshold", type=float, help="accuracy at which the session stops")
    p.add_argument("--max-rounds", type=int)
    p.add_argument("--classes", type=lambda v: tuple(int(c) for c in v.split(",")),
                   help="four comma-separated MNIST digits, e.g. 0,1,2,3")
    p.add_argument("--max-per-class", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--data-dir")
    p.add_argument("--gap-policy", choices=["hold-previous", "zero-fill"])
    p.add_argument("--compute-timing", choices=["analytic", "wall"])
    p.add_argument("--noiseless", action="store_true", default=None)
    p.add_argument("--serial-compute", action="store_true", default=None)
    p.add_argument("--persist-optimizer", action="store_true", default=None)


def config_from_args(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.seed is not None:
        changes.update(data_seed=args.seed, init_seed=args.seed, channel_seed=args.seed)
    for flag, name in _RUN_FLAGS.items():
        value = getattr(args, flag)
        if value is not None:
            changes[name] = value
    for flag in ("noiseless", "serial_compute", "persist_optimizer"):
        if getattr(args, flag):
            changes[flag] = True
    return ExperimentConfig.from_mapping({**_fields(cfg), **changes})


def _fields(cfg: ExperimentConfig) -> dict:
    return {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}


def cmd_run(args) -> int:
    cfg = config_from_args(args)
    if cfg.output_dir is None:
        cfg = cfg.replace(output_dir="results")

    def progress(r, acc, trace):
        bad = ", ".join(f"{ls.link} {ls.corrupted_fraction:.3f}" for ls in trace.links)
        log.info("round %d: acc %.4f  sim %.3f s  corrupted [%s]", r, acc, trace.timings.total, bad)

    b = run_experiment(cfg, progress=progress)
    s = b.session
    print(f"rounds {s.rounds}  final accuracy {s.final_accuracy:.4f}  best {s.best_accuracy:.4f}  "
          f"converged {'yes' if s.converged else 'no'} (threshold {s.threshold})")
    print(f"simulated time {s.total_time_s:.3f} s")
    if b.cross:
        for c, base in zip(b.cross, b.local_only or (None, None)):
            extra = f"  local-only {base.accuracy:.4f}" if base else ""
            print(f"client {c.client_id} cross-accuracy on classes {c.classes}: {c.accuracy:.4f}{extra}")
    print(f"results in {b.output_dir}")
    return 0


def cmd_sweep(args) -> int:
    configs = expand_sweep(args.spec.read_text(), str(args.spec))
    if args.data_dir:
        configs = [c.replace(data_dir=args.data_dir) for c in configs]
    log.info("%d configurations", len(configs))
    rows = sweep(configs, args.out, jobs=args.jobs)
    print(table_text(rows), end="")
    failed = [r for r in rows if r["status"] != "ok"]
    for r in failed:
        print(f"entry {r['index']} failed: {r['error']}", file=sys.stderr)
    print(f"table in {Path(args.out) / 'table1.csv'}")
    return 1 if failed and len(failed) == len(rows) else 0


def cmd_report(args) -> int:
    d = args.indir
    table = d / "table1.csv"
    if table.is_file():
        rows = read_table(table)
        for r in rows:
            for key in ("epochs", "rounds"):
                r[key] = int(r[key]) if r[key] else None
            for key in ("tx_power_db", "best_accuracy", "time_s"):
                r[key] = float(r[key]) if r[key] else None
        print(table_text(rows), end="")
        return 0
    entries = read_manifest(d)
    print(f"{d}: {len(entries)} files, manifest complete")
    print((d / "timing.txt").read_text(), end="")
    cross = d / "cross_accuracy.csv"
    if cross.is_file():
        print(cross.read_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedair", description="Two-client federated learning over a simulated radio link.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=0, help="-v progress, -vv debug")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", parents=[common], help="run one federated session")
    _add_run_args(run)
    run.set_defaults(func=cmd_run)

    sw = sub.add_parser("sweep", parents=[common], help="run every combination listed in a sweep file")
    sw.add_argument("--spec", type=Path, required=True,
                    help="key = value file; comma-separated values are swept")
    sw.add_argument("--out", default="sweep")
    sw.add_argument("--jobs", type=int, default=1)
    sw.add_argument("--data-dir")
    sw.set_defaults(func=cmd_sweep)

    rep = sub.add_parser("report", parents=[common], help="summarise a run or sweep directory")
    rep.add_argument("--in", dest="indir", type=Path, required=True)
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, ExperimentError, OSError, ValueError, RuntimeError) as exc:
        print(f"fedair: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
