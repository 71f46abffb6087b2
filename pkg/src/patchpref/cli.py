"""Command-line entry point."""

from __future__ import annotations

import argparse
import sys

from .errors import PatchprefError
from .pipeline import (STAGES, MissingArtifact, UnknownConfigKey, build_report,
                       format_report, load_config, run)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="patchpref",
        description="Patch-quality estimation and patch-weighted preference "
                    "optimization pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in list(STAGES) + ["all", "report"]:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--out-dir", help="override the output directory")
        p.add_argument("--force", action="store_true",
                       help="re-run stages even when inputs are unchanged")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config, seed=args.seed, out_dir=args.out_dir)
    except UnknownConfigKey as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PatchprefError as exc:
        print(f"error: bad config: {exc}", file=sys.stderr)
        return 2

    try:
        if args.command == "report":
            print(format_report(build_report(cfg.out_dir)))
        else:
            run(args.command, cfg, force=args.force)
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except PatchprefError as exc:
        print(f"error: stage {args.command} failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
