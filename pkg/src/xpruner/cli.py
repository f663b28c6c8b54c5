"""Command-line entry point: ``xpruner <command> [options]``.

Exit status: 0 success, 2 configuration error, 3 I/O or data-format error,
4 threshold search did not converge, 5 degenerate architecture,
6 pipeline stages run out of order, 1 any other failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields

from . import pipeline
from .config import RunConfig, field_types, load_config
from .errors import (
    CheckpointError,
    ConfigError,
    DegenerateArchitectureError,
    IdxFormatError,
    NonConvergenceError,
    PipelineOrderError,
    XPrunerError,
)

logger = logging.getLogger("xpruner")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NONCONVERGENCE = 4
EXIT_DEGENERATE = 5
EXIT_ORDER = 6


def _add_run_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key = value config file; flags override it")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    group = parser.add_argument_group("run configuration")
    types = field_types()
    for f in fields(RunConfig):
        group.add_argument(
            "--" + f.name.replace("_", "-"),
            dest=f.name,
            type=types[f.name],
            default=None,
            metavar=types[f.name].__name__.upper(),
            help=f"{f.metadata['help']} (default: {f.default})",
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xpruner", description="Class-aware structured pruning of vision transformers.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-baseline", help="train the unmasked model")
    _add_run_options(p)

    p = sub.add_parser("train-masks", help="learn class-wise masks on a frozen baseline")
    p.add_argument("--checkpoint", help="baseline checkpoint (default: OUT/baseline.ckpt)")
    _add_run_options(p)

    p = sub.add_parser("prune", help="search thresholds, hard-prune and fold masks")
    p.add_argument("--checkpoint", help="masks or search checkpoint (default: OUT/masks.ckpt)")
    _add_run_options(p)

    p = sub.add_parser("finetune", help="fine-tune a pruned model")
    p.add_argument("--checkpoint", help="pruned checkpoint (default: OUT/pruned.ckpt)")
    _add_run_options(p)

    p = sub.add_parser("report", help="tabulate one or more checkpoints")
    p.add_argument("checkpoints", nargs="+", help="checkpoint files")
    _add_run_options(p)
    return parser


def run(args: argparse.Namespace) -> None:
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig) if getattr(args, f.name) is not None}
    cfg = load_config(args.config, overrides)
    if args.command == "train-baseline":
        print(pipeline.cmd_train_baseline(cfg))
    elif args.command == "train-masks":
        print(pipeline.cmd_train_masks(cfg, args.checkpoint))
    elif args.command == "prune":
        print(pipeline.cmd_prune(cfg, args.checkpoint))
    elif args.command == "finetune":
        print(pipeline.cmd_finetune(cfg, args.checkpoint))
    elif args.command == "report":
        result = pipeline.cmd_report(cfg, args.checkpoints)
        for row in result["rows"]:
            print(" ".join(f"{k}={row[k]}" for k in pipeline.REPORT_COLUMNS))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except ConfigError as exc:
        where = f" [{exc.field}]" if exc.field else ""
        print(f"config error{where}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, IdxFormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NonConvergenceError as exc:
        print(f"not converged: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except DegenerateArchitectureError as exc:
        print(f"degenerate architecture: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except PipelineOrderError as exc:
        print(f"pipeline order: {exc}", file=sys.stderr)
        return EXIT_ORDER
    except XPrunerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
