"""Replay the key-reuse traces in both modes and show the final access verdict."""

from pathlib import Path

from mpksim.trace import parse_trace, replay

TRACES = Path(__file__).resolve().parent.parent / "traces"

for name, mode in (("uaf_raw.trace", "raw"), ("uaf_managed.trace", "managed")):
    report = replay(parse_trace((TRACES / name).read_text()), mode)
    stale = [o for o in report.ops if o["verb"] == "read" and o["args"] == ["@1"]][-1]
    print(f"{mode:8s} stale read of group 1 (line {stale['line']}): {stale['verdict'].upper()}")
