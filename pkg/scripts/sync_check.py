"""Exhaustively interleave the revoke traces and count schedules that leak."""

from pathlib import Path

from mpksim.explore import explore
from mpksim.trace import parse_trace

TRACES = Path(__file__).resolve().parent.parent / "traces"

for name, mode in (("sync_managed.trace", "managed"), ("sync_raw_execonly.trace", "raw")):
    res = explore(parse_trace((TRACES / name).read_text()), mode)
    print(f"{name}: {res.violating}/{res.interleavings} interleavings leak")
    if res.counterexample:
        print("  e.g. " + " ; ".join(res.counterexample))
