"""Average mpk_mprotect cost across cache hit rates and eviction rates.

Writes CSV to stdout (or --out) and prints the hit rate at which the
managed call first beats a one-page mprotect for each eviction rate.
"""

import argparse
import sys

from mpksim.sweep import hit_rate_sweep, to_csv


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--calls", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    args = p.parse_args()

    hit_rates = [i / 20 for i in range(21)]
    rows = hit_rate_sweep(hit_rates, (0.0, 0.5, 1.0), threads=args.threads,
                          calls=args.calls, seed=args.seed)
    text = to_csv(rows)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)

    for rate in (0.0, 0.5, 1.0):
        cross = next((r["hit_rate"] for r in rows
                      if r["evict_rate"] == rate and r["speedup"] >= 1.0), None)
        print(f"evict_rate={rate}: faster than mprotect from hit_rate={cross}", file=sys.stderr)


if __name__ == "__main__":
    main()
