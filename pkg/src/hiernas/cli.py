"""Command line entry point: ``hiernas run|compare|export|resume``."""

import argparse
import json
import logging
import sys
from pathlib import Path

from .evaluation import TableLoadError
from .runner import (
    ConfigError,
    CorruptCheckpoint,
    compare_baseline,
    export_best,
    load_config,
    resume,
    run,
)


def _cmd_run(args):
    config = load_config(args.config)
    seeds = [args.seed] if args.seed is not None else config.seeds
    if args.generations is not None:
        config = config.replace(generations=args.generations)
    report = run(config, seeds, args.out)
    for r in report.results:
        print(f"seed {r.seed}: best {r.best_so_far:.4f} -> {r.run_dir}")


def _cmd_compare(args):
    config = load_config(args.config)
    if args.generations is not None:
        config = config.replace(generations=args.generations)
    out = Path(args.out or Path(config.output_dir) / "compare")
    report = compare_baseline(config, list(range(args.first_seed, args.first_seed + args.seeds)), out)
    print(json.dumps(report.summary(), indent=2))


def _cmd_export(args):
    out = args.out
    if out is None:
        out = Path(args.checkpoint).with_name("best." + args.format)
    export_best(args.checkpoint, args.format, out)
    print(out)


def _cmd_resume(args):
    res = resume(args.checkpoint, args.out, args.generations)
    print(f"seed {res.seed}: resumed to generation {res.state.generation}, best {res.best_so_far:.4f}")


def build_parser():
    parser = argparse.ArgumentParser(prog="hiernas", description="Hierarchical evolutionary architecture search")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a search for one or more seeds")
    p.add_argument("--config", required=True, help="YAML config file or preset name (fmnist-surrogate, nasbench)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--generations", type=int)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("compare", help="search vs. constant-fitness random baseline")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--first-seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--generations", type=int)
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("export", help="export the best member of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--format", choices=("json", "dot"), default="json")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_export)

    p = sub.add_parser("resume", help="continue a run from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    p.add_argument("--generations", type=int)
    p.set_defaults(func=_cmd_resume)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (ConfigError, CorruptCheckpoint, TableLoadError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
