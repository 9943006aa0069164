"""Command-line entry point: ``phonolase <kind> --config FILE``."""
from __future__ import annotations

import argparse
import logging
import os
import sys

from .config import KINDS, load_config
from .errors import ConfigError
from .experiments import EXIT_CONFIG, run_experiment


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="phonolase", description="Levitated-nanosphere phonon laser simulator")
    p.add_argument("kind", choices=KINDS)
    p.add_argument("--config", required=True, help="key=value config file or a previous manifest.json")
    p.add_argument("--output", help="output directory (default: config, then $PHONOLASE_OUTPUT)")
    p.add_argument("--jobs", type=int, default=None, help="parallel sweep runs (default: available CPUs)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--plots", action="store_true", help="emit SVG plots")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {"kind": args.kind, "seed": args.seed}
    if args.output:
        overrides["output_dir"] = args.output
    elif "PHONOLASE_OUTPUT" in os.environ:
        overrides["output_dir"] = os.environ["PHONOLASE_OUTPUT"]
    if args.plots:
        overrides["emit_plots"] = True
    try:
        spec = load_config(args.config, **overrides)
    except ConfigError as exc:
        print(f"phonolase: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.jobs is not None and args.jobs < 1:
        print("phonolase: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    code = run_experiment(spec, jobs=args.jobs)
    if code == 0:
        print(f"wrote {spec.kind} outputs to {spec.output_dir}")
    return code


if __name__ == "__main__":
    sys.exit(main())
