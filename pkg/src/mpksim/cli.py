"""Command-line front end: replay a trace, explore its interleavings, or run a sweep."""

from __future__ import annotations

import argparse
import json
import sys

from .errors import TraceSyntaxError
from .explore import explore
from .sweep import hit_rate_sweep, page_count_sweep, to_csv
from .trace import parse_trace, replay

EXIT_OK = 0
EXIT_PARSE = 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mpksim", description=__doc__)
    p.add_argument("--trace", metavar="FILE", help="trace file to replay ('-' for stdin)")
    p.add_argument("--mode", choices=("managed", "raw"), default="managed")
    p.add_argument("--evict-rate", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sweep", choices=("hit_rate", "page_count"))
    p.add_argument("--threads", type=int, default=1, help="simulated threads for sweeps")
    p.add_argument("--explore", action="store_true",
                   help="check every interleaving of the trace after its setup prefix")
    p.add_argument("--out", metavar="FILE", help="write output here instead of stdout")
    return p


def _emit(text: str, out: str | None) -> None:
    if out:
        with open(out, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not 0 <= args.evict_rate <= 1:
        parser.error("--evict-rate must be within [0, 1]")
    if args.sweep:
        if args.sweep == "page_count":
            rows = page_count_sweep(threads=args.threads)
        else:
            rows = hit_rate_sweep(threads=args.threads, seed=args.seed)
        _emit(to_csv(rows), args.out)
        return EXIT_OK
    if not args.trace:
        parser.error("one of --trace or --sweep is required")
    if args.trace == "-":
        text = sys.stdin.read()
    else:
        with open(args.trace, encoding="utf-8") as f:
            text = f.read()
    try:
        ops = parse_trace(text)
    except TraceSyntaxError as e:
        print(f"{args.trace}: {e}", file=sys.stderr)
        return EXIT_PARSE
    if args.explore:
        try:
            result = explore(ops, args.mode, args.evict_rate)
        except ValueError as e:
            parser.error(str(e))
        _emit(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n", args.out)
    else:
        _emit(replay(ops, args.mode, args.evict_rate, args.seed).to_json(), args.out)
    return EXIT_OK
