"""``bisimlab`` command-line entry point.

Exit codes: 0 on success, 1 when a verification fails (or a forbidden
divergence occurs), 2 on configuration errors.
"""

from __future__ import annotations

import argparse
import sys

from .errors import ConfigError
from .harness import COMMANDS, build_config, load_config_file, parse_override, run_command


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bisimlab", description="Bisimulation metric workbench.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--out", default="out", help="output directory (default: ./out)")
    p.add_argument("--seed", type=int, help="master seed, overrides the config")
    p.add_argument("--preset", help="named preset applied before the config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-key override, e.g. train.c_T=0.5 (repeatable)")
    p.add_argument("--perturb-metric", type=float, default=None,
                   help="verify-bounds self-test: add Gaussian noise of this scale to the metric")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError("seeds are unsigned")
        file_doc = load_config_file(args.config) if args.config else {}
        overrides = [parse_override(s) for s in args.set]
        if args.perturb_metric is not None:
            overrides.append(("verify.perturb_metric", args.perturb_metric))
        doc = build_config(file_doc, preset=args.preset, seed=args.seed, overrides=overrides)
        summary = run_command(args.command, doc, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    failed = [name for name, status in summary.checks.items() if status == "fail"]
    for name, status in summary.checks.items():
        print(f"{name}: {status}")
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
