"""Command line entry point: ``capaudit <subcommand> --config run.yaml``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .datagen import BundleError
from .models import CheckpointError, DivergenceError

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_PREREQUISITE = 3
EXIT_DIVERGENCE = 4

logger = logging.getLogger("capaudit")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", type=Path, help="YAML run config")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. training.lr=1e-3 (repeatable)")
    common.add_argument("--output-dir", help=f"artifact root (default: config, then ${pipeline.OUTPUT_ROOT_ENV})")
    common.add_argument("--seeds", type=int, nargs="+", help="override the config seed list")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="capaudit", description="Copyright audit via prompt generation")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth-data", parents=[common], help="generate a synthetic bundle")
    sub.add_parser("ingest", parents=[common], help="window and split a CSV into a bundle")
    sub.add_parser("train-target", parents=[common], help="train the target model, one checkpoint per seed")
    tp = sub.add_parser("train-prompter", parents=[common], help="train the prompt generator against the target")
    tp.add_argument("--optimized", action="store_true", help="enable GPD-based pruning")
    ap = sub.add_parser("audit", parents=[common], help="find violations and score the ranking")
    ap.add_argument("--optimized", action="store_true", help="audit the optimized prompter")
    ag = sub.add_parser("aggregate", help="mean and 95%% CI across audit reports")
    ag.add_argument("reports", nargs="+", type=Path)
    ag.add_argument("--out", type=Path, required=True)
    ag.add_argument("-v", "--verbose", action="store_true")
    sub.add_parser("bench", parents=[common], help="paired Opt / No-Opt prompter timing")
    return p


def _config(args: argparse.Namespace) -> pipeline.RunConfig:
    overrides = list(args.overrides)
    if args.output_dir:
        overrides.append(f"output_dir={args.output_dir}")
    if args.seeds:
        overrides.append(f"seeds={json.dumps(args.seeds)}")
    return pipeline.load_config(args.config, overrides)


def _run(args: argparse.Namespace) -> None:
    if args.command == "aggregate":
        out = pipeline.write_aggregate(args.reports, args.out)
        print(out)
        for k, v in json.loads(out.read_text())["table"].items():
            print(f"{k:>14}: {v}")
        return

    cfg = _config(args)
    if args.command == "synth-data":
        print(pipeline.synth_data(cfg))
    elif args.command == "ingest":
        print(pipeline.ingest(cfg))
    elif args.command == "train-target":
        data = pipeline.load_prepared(cfg)
        for seed in cfg.seeds:
            path, rep = pipeline.train_target(cfg, seed, data)
            print(f"{path}  best_epoch={rep.best_epoch} val={rep.best_metric:.4g}")
    elif args.command == "train-prompter":
        data = pipeline.load_prepared(cfg)
        for seed in cfg.seeds:
            path, rep = pipeline.train_prompter(cfg, seed, args.optimized, data)
            print(f"{path}  loss={rep.best_metric:.4g} pruning_events={len(rep.pruning_events)} "
                  f"seconds={rep.total_seconds:.1f}")
    elif args.command == "audit":
        data = pipeline.load_prepared(cfg)
        paths = [pipeline.run_audit(cfg, seed, args.optimized, data) for seed in cfg.seeds]
        for p in paths:
            print(p)
        print(pipeline.write_index(cfg, paths, args.optimized))
    elif args.command == "bench":
        out = pipeline.bench(cfg)
        payload = json.loads(out.read_text())
        print(out)
        print(f"time ratio opt/noopt = {payload['time_ratio']:.3f}; "
              f"auc_gain noopt={payload['mean_auc_gain']['noopt']:.3f} opt={payload['mean_auc_gain']['opt']:.3f}")


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _run(args)
    except pipeline.MissingPrerequisite as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PREREQUISITE
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (pipeline.ConfigError, BundleError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
