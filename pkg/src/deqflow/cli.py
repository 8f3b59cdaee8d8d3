"""Command line: ``deqflow <experiment> --config FILE [--out DIR] [--seeds 0,1] [--threads N]``.

Exit status is 0 on success and 2 for configuration problems or malformed or
unreadable input files. Numerical failures (loss of contraction, singular
kernel, ...) exit with 3.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .errors import ConfigError, DataFormatError, NumericFailure
from .experiments import EXPERIMENTS, load_config, run_experiment

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _seed_list(text):
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}")
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def build_parser():
    parser = argparse.ArgumentParser(
        prog="deqflow",
        description="Gradient-flow experiments on deep equilibrium models.")
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"run a {name} experiment")
        p.add_argument("--config", required=True, help="JSON configuration file")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seeds", type=_seed_list, help="comma-separated seeds (overrides seeds)")
        p.add_argument("--threads", type=int, default=1,
                       help="worker processes for the (width, seed) grid")
        p.add_argument("--no-plots", action="store_true", help="skip the SVG figures")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if cfg.experiment != args.experiment:
            raise ConfigError(f"config describes a {cfg.experiment!r} experiment, "
                              f"not {args.experiment!r}")
        if args.seeds is not None:
            cfg = cfg.with_overrides(seeds=args.seeds)
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        result = run_experiment(cfg, out_dir=args.out, threads=args.threads,
                                plots=not args.no_plots)
    except (ConfigError, DataFormatError, OSError) as exc:
        print(f"deqflow: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFailure as exc:
        print(f"deqflow: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"wrote {len(result.manifest['files'])} files to {result.out_dir} "
          f"({result.prefix}-manifest.json)")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
