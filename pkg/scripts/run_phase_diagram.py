#!/usr/bin/env python3
"""Reproduce the two-block phase diagram at full desk scale.

Thin wrapper over the CLI so the sweep can be launched, interrupted, and
resumed; see scripts/phase_diagram_config.json for the configuration.
"""

import argparse
import os
import sys

from mvamp.cli import main as cli_main

HERE = os.path.dirname(os.path.abspath(__file__))


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=os.path.join(HERE, "phase_diagram_config.json"))
    ap.add_argument("--out", default=None)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--resume", action="store_true")
    args = ap.parse_args()
    argv = ["phase-diagram", "--config", args.config, "--jobs", str(args.jobs)]
    if args.out:
        argv += ["--out", args.out]
    if args.seed is not None:
        argv += ["--seed", str(args.seed)]
    if args.resume:
        argv += ["--resume"]
    return cli_main(argv)


if __name__ == "__main__":
    sys.exit(main())
