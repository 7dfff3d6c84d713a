"""Command-line interface: run configs, self-test, list experiments."""

import argparse
import sys

from .config import ConfigError, parse_config
from .runner import RunnerError, list_experiments, run

_SELFTEST_CONFIG = """
[experiment]
kind = metric-selftest
oracle_pairs = 150
sandwich_pairs = 200
coupling_pairs = 60
couplings_per_pair = 10
[run]
seed = 20260808
cache = off
"""


def _build_parser():
    p = argparse.ArgumentParser(prog="limitlab",
                                description="Prokhorov-metric rate experiments")
    sub = p.add_subparsers(dest="command", required=True)

    runp = sub.add_parser("run", help="execute an experiment config file")
    runp.add_argument("config", help="path to a key = value config file")
    runp.add_argument("--seed", type=int, default=None,
                      help="override the config seed")
    runp.add_argument("--workers", type=int, default=1,
                      help="worker processes for ensemble chunks")
    runp.add_argument("--no-cache", action="store_true",
                      help="recompute even if a cached run exists")
    runp.add_argument("--out", default=None, help="output directory root")

    selfp = sub.add_parser("selftest", help="run the metric self-test suite")
    selfp.add_argument("--seed", type=int, default=None)
    selfp.add_argument("--out", default=None)

    sub.add_parser("list-experiments", help="list available experiment kinds")
    return p


def main(argv=None):
    args = _build_parser().parse_args(argv)

    if args.command == "list-experiments":
        for kind in list_experiments():
            print(kind)
        return 0

    if args.command == "selftest":
        cfg = parse_config(_SELFTEST_CONFIG)
        if args.seed is not None:
            cfg.values["seed"] = args.seed
        try:
            rec = run(cfg, workers=1, out_dir=args.out, use_cache=False)
        except RunnerError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        for suite, passed in rec.summary["suites"].items():
            print(f"{suite}: {'PASS' if passed else 'FAIL'}")
        return 0 if rec.summary["ok"] else 1

    try:
        with open(args.config, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        cfg = parse_config(text)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg.values["seed"] = args.seed
    try:
        rec = run(cfg, workers=args.workers, out_dir=args.out,
                  use_cache=not args.no_cache)
    except RunnerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    state = "cached" if rec.cached else "computed"
    print(f"{cfg.kind}: {state}, outputs: {', '.join(rec.outputs)}")
    for key, val in sorted(rec.summary.items()):
        print(f"  {key} = {val}")
    return 0 if rec.summary.get("ok", True) else 1


if __name__ == "__main__":
    sys.exit(main())
