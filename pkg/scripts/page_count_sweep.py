"""Managed hit cost vs. plain mprotect as the group grows, for 1 and 4 threads."""

import sys

from mpksim.sweep import page_count_sweep, to_csv

rows = page_count_sweep(threads=1) + page_count_sweep(threads=4)
sys.stdout.write(to_csv(rows))
for threads in (1, 4):
    first = next(r for r in rows if r["threads"] == threads and r["pages"] == 1)
    ratio = first["mprotect_contiguous"] / first["mpk_mprotect_hit"]
    print(f"{threads} thread(s): one-page mprotect / managed hit = {ratio:.2f}x", file=sys.stderr)
