"""Command-line entry point: ``sepsis-rl <stage> [--config ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

from . import pipeline
from .config import RunConfig, load_config
from .errors import IO_EXIT_CODE, SepsisRLError
from .training import ENCODER_VARIANTS

log = logging.getLogger("sepsis_rl")

COMMANDS = (*pipeline.STAGES, "reproduce")


def _seeds(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=_seeds, help="policy seeds, e.g. 1234,2020,2025")
    common.add_argument("--out", help="run directory")
    common.add_argument("--desk-scale", action="store_true", default=None,
                        help="use desk-scale epoch and iteration counts")
    common.add_argument("--untrained-encoder", action="store_true", default=None,
                        help="train policies on latents of randomly initialized encoders")
    common.add_argument("--encoder", choices=ENCODER_VARIANTS)
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="sepsis-rl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        fn = pipeline.STAGES.get(name)
        doc = (fn.__doc__ or "").strip().splitlines()[0] if fn else "run every stage in order"
        sub.add_parser(name, parents=[common], help=doc, description=doc)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {
        "seeds": args.seed,
        "out": args.out,
        "desk_scale": args.desk_scale,
        "untrained_encoder": args.untrained_encoder,
        "encoder": args.encoder,
    }
    cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    return cfg.validate()


def run_command(command: str, cfg: RunConfig) -> dict:
    run = pipeline.Run(cfg)
    if command == "reproduce":
        return pipeline.reproduce(run)
    return pipeline.STAGES[command](run)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        info = run_command(args.command, cfg)
    except SepsisRLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return IO_EXIT_CODE
    if info:
        print(json.dumps(info, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
