"""Command-line entry point: ``zonalvol run|list|export-builtin|compare``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import scenarios
from .mesh import _atomic_write


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="zonalvol", description="Zonal volume-preserving FEM scenarios.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario file or built-in name")
    r.add_argument("config", help="scenario file, or the name of a built-in scenario")
    r.add_argument("--frames", type=int, default=None, help="override the frame count")
    r.add_argument("--out", default=None, help="output directory (default: next to the config)")
    r.add_argument("--seed", type=int, default=None, help="seed for the initial-state perturbation")

    sub.add_parser("list", help="list built-in scenarios")

    e = sub.add_parser("export-builtin", help="write a built-in scenario as a config file")
    e.add_argument("name")
    e.add_argument("path")

    c = sub.add_parser("compare", help="compare two metric CSV files")
    c.add_argument("a")
    c.add_argument("b")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")

    if args.command == "list":
        for sc in scenarios.builtin_scenarios():
            print(f"{sc.name:<32}{sc.description}")
        return 0

    if args.command == "export-builtin":
        try:
            sc = scenarios.get_builtin(args.name)
        except KeyError as exc:
            print(exc.args[0], file=sys.stderr)
            return scenarios.EXIT_CONFIG
        _atomic_write(args.path, scenarios.format_scenario(sc))
        return 0

    if args.command == "compare":
        try:
            report = scenarios.compare_runs(args.a, args.b)
        except (OSError, ValueError) as exc:
            print(f"compare: {exc}", file=sys.stderr)
            return scenarios.EXIT_CONFIG
        print(report.format())
        return 0

    path = Path(args.config)
    if not path.exists() and not path.suffix:
        # Bare names refer to built-ins.
        try:
            sc = scenarios.get_builtin(args.config)
        except KeyError:
            print(f"run: no scenario file or built-in named {args.config!r}", file=sys.stderr)
            return scenarios.EXIT_CONFIG
        if args.seed is not None:
            sc.seed = args.seed
        result = scenarios.run(sc, args.out or ".", args.frames)
        return result.exit_code
    try:
        return scenarios.run_scenario(path, frames=args.frames, out_dir=args.out, seed=args.seed)
    except scenarios.ConfigError as exc:
        print(exc, file=sys.stderr)
        return scenarios.EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
