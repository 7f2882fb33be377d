"""Command-line entry point.

Exit codes: 0 success, 1 usage error or failed check, 2 numeric divergence,
3 config error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, load_config, with_overrides
from .run import RunDiverged, run_experiment
from .sweep import format_table, parse_grid, run_sweep, summarize

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_CONFIG = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="csac", description="Continuing SAC experiments on native continuing tasks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    r = sub.add_parser("run", help="run one seeded experiment")
    r.add_argument("config")
    r.add_argument("--seed", type=int, default=None, help="defaults to the first configured seed")
    r.add_argument("--steps", type=int, default=None)
    r.add_argument("--out", default=None)
    r.add_argument("--resume", action="store_true", help="continue from an existing checkpoint")
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")

    s = sub.add_parser("sweep", help="run a parameter grid over seeds")
    s.add_argument("config")
    s.add_argument("--grid", action="append", required=True, metavar="KEY=V1,V2,...")
    s.add_argument("--seeds", type=int, default=None, help="number of seeds 0..N-1")
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--out", default=None)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--no-reuse", action="store_true", help="recompute runs that already finished")

    m = sub.add_parser("summarize", help="min/median/max tables of finished runs")
    m.add_argument("dir")

    c = sub.add_parser("check", help="run the exact oracle and invariant checks")
    c.add_argument("--only", action="append", default=[], help="run only checks with this name")

    a = sub.add_parser("acceptance", help="run or evaluate the directional reproductions")
    a.add_argument("--out", default="runs/acceptance")
    a.add_argument("--only", action="append", default=[], help="criterion numbers, e.g. 10")
    a.add_argument("--workers", type=int, default=1)
    return p


def _overrides(items) -> dict:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    over = _overrides(args.set)
    if args.steps is not None:
        over["total_steps"] = args.steps
    if over:
        cfg = with_overrides(cfg, over)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    art = run_experiment(cfg, seed, out_dir=args.out, resume=args.resume)
    print(f"{art.run_dir}: whole-period average reward {art.average_performance:.6g}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    if args.steps is not None:
        cfg = with_overrides(cfg, {"total_steps": args.steps})
    grid = parse_grid(args.grid)
    seeds = list(range(args.seeds)) if args.seeds is not None else list(cfg.seeds)
    cells = run_sweep(cfg, grid, seeds, out_dir=args.out, reuse=not args.no_reuse, workers=args.workers)
    for cell in cells:
        desc = ", ".join(f"{k}={v}" for k, v in cell.overrides.items())
        print(f"{desc}: median {cell.median:.6g} over {len(cell.runs)} runs, {len(cell.failures)} failed")
    return EXIT_OK if all(not c.failures for c in cells) else EXIT_USAGE


def cmd_summarize(args) -> int:
    print(format_table(summarize(args.dir)))
    return EXIT_OK


def cmd_check(args) -> int:
    from csac.checks import run_checks

    results = run_checks(args.only or None)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_USAGE


def cmd_acceptance(args) -> int:
    from .acceptance import evaluate_all

    only = [int(x) for x in args.only] or None
    results = evaluate_all(args.out, only=only, workers=args.workers)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_USAGE


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "summarize": cmd_summarize,
            "check": cmd_check, "acceptance": cmd_acceptance}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except RunDiverged as err:
        print(f"numeric divergence: {err} (diagnostics in {err.dump_path})", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
