"""Command-line entry point: ``floodcast {synth,train,forecast,evaluate}``.

Log level comes from ``FLOODCAST_LOG_LEVEL`` (default WARNING). Exit codes:
0 success, 2 configuration error, 1 any other failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

from . import experiment
from .config import load_config
from .errors import ConfigError, FloodcastError

LOG_ENV = "FLOODCAST_LOG_LEVEL"

COMMANDS = {
    "synth": lambda cfg, out, hs: experiment.synthesize(cfg, out),
    "train": experiment.train_all,
    "forecast": experiment.forecast_all,
    "evaluate": experiment.evaluate_all,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="floodcast", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("synth", "generate a synthetic watershed dataset"),
        ("train", "train one base model per horizon"),
        ("forecast", "forecast and run the residual correction cascade"),
        ("evaluate", "score base model, baselines and corrected forecasts"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file (defaults when omitted)")
        p.add_argument("--seed", type=int, help="override the root seed")
        p.add_argument("--out", default="run", help="run directory (default: ./run)")
        p.add_argument("--horizon", type=int, choices=range(1, 7), metavar="{1..6}",
                       help="restrict to one forecast horizon")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get(LOG_ENV, "WARNING").upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed)
        horizons = [args.horizon] if args.horizon else None
        manifest = COMMANDS[args.command](cfg, args.out, horizons)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FloodcastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"{args.command}: wrote {', '.join(manifest.outputs)} to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
