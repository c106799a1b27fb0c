"""Command line entry point: ``gen-data``, ``full-run``, ``report`` and ``verify``.

Exit codes: 0 success, 2 validation failure (bad config or a failed check),
1 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from .harness import ConfigError, RunConfig, format_table, full_run, gen_data, report
from .verify import run_checks

__all__ = ["main", "build_config"]


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file overriding RunConfig fields")
    common.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--study", choices=("acs", "fcas"), help="run a single study")
    common.add_argument("--experiment", type=int, choices=(1, 2, 3),
                        help="1 countdown, 2 stressed countdown, 3 stoplight")
    common.add_argument("--quiet", action="store_true", help="suppress progress messages")

    p = argparse.ArgumentParser(prog="fewshot-csnn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write synthetic dataset archives")
    sub.add_parser("full-run", parents=[common], help="run every split and write the bundle")
    rep = sub.add_parser("report", parents=[common], help="aggregate a bundle into tables")
    rep.add_argument("bundle", nargs="?", help="bundle directory (defaults to --out)")
    ver = sub.add_parser("verify", parents=[common], help="run the invariant self-checks")
    ver.add_argument("--pairs", type=int, default=200, help="random model/input pairs")
    return p


def build_config(args) -> RunConfig:
    raw = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        cfg = RunConfig.from_json(path)
        raw = cfg.to_dict()
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        raw["seed"] = args.seed
    if args.out:
        raw["out"] = args.out
    if args.study:
        raw["studies"] = [args.study]
    if args.experiment:
        raw["experiment"] = args.experiment
    return RunConfig.from_dict(raw)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    start = time.perf_counter()

    def log(msg):
        if not args.quiet:
            print(f"[{time.perf_counter() - start:7.1f}s] {msg}", file=sys.stderr, flush=True)

    try:
        config = build_config(args)
        if args.command == "gen-data":
            root = gen_data(config, log)
            print(root)
        elif args.command == "full-run":
            out = full_run(config, log)
            report(out, log)
            status = json.loads((out / "bundle.json").read_text())["splits"]
            incomplete = [s for s in status if s["status"] != "complete"]
            print(out)
            if incomplete:
                log(f"{len(incomplete)} split(s) incomplete; see bundle.json")
                return 1
        elif args.command == "report":
            bundle = args.bundle or config.out
            result = report(bundle)
            print(format_table(result["tables"]))
            for row in result["energy"]:
                print(f"{row['study']}: PR {row['pr']:.2f}%  LR {row['lr']:.3f}")
        elif args.command == "verify":
            failed = 0
            for name, ok, detail in run_checks(config.seed, pairs=args.pairs):
                print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
                failed += not ok
            return 2 if failed else 0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {exc!r}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
