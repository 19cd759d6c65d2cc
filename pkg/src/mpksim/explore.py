"""Exhaustive interleaving of small multi-thread traces.

Each thread's operations keep their program order; every merge of the
per-thread sequences is replayed on a fresh process, and the interleavings
that produce a mprotect-semantics violation are collected.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import factorial
from typing import Iterator

from .trace import BARRIER, Replayer, TraceOp

MAX_THREADS = 3
MAX_STEPS = 8


def split_setup(ops: list[TraceOp]) -> tuple[list[TraceOp], list[TraceOp]]:
    """Ops before the last ``---`` run once, in order, ahead of every schedule."""
    cut = max((i for i, op in enumerate(ops) if op.verb == BARRIER), default=-1)
    setup = [op for op in ops[:cut + 1] if op.verb != BARRIER]
    return setup, ops[cut + 1:]


def programs(ops: list[TraceOp]) -> dict[int, list[TraceOp]]:
    progs: dict[int, list[TraceOp]] = {}
    for op in ops:
        if op.verb != BARRIER:
            progs.setdefault(op.thread, []).append(op)
    return progs


def interleavings(progs: list[list]) -> Iterator[list]:
    """All merges of ``progs`` that preserve each sequence's order."""
    total = sum(len(p) for p in progs)
    pos = [0] * len(progs)
    out: list = []

    def rec():
        if len(out) == total:
            yield list(out)
            return
        for i, p in enumerate(progs):
            if pos[i] < len(p):
                out.append(p[pos[i]])
                pos[i] += 1
                yield from rec()
                pos[i] -= 1
                out.pop()

    yield from rec()


def count_interleavings(lengths) -> int:
    n = factorial(sum(lengths))
    for k in lengths:
        n //= factorial(k)
    return n


@dataclass
class ExploreResult:
    mode: str
    interleavings: int = 0
    violating: int = 0
    counterexample: list[str] = field(default_factory=list)
    violation: dict | None = None

    def to_dict(self):
        return {"mode": self.mode, "interleavings": self.interleavings,
                "violating": self.violating, "counterexample": self.counterexample,
                "violation": self.violation}


def explore(ops: list[TraceOp], mode: str = "managed", evict_rate: float = 1.0,
            max_threads: int = MAX_THREADS, max_steps: int = MAX_STEPS) -> ExploreResult:
    setup, body = split_setup(ops)
    progs = programs(body)
    if len(progs) > max_threads:
        raise ValueError(f"{len(progs)} threads exceeds the limit of {max_threads}")
    steps = sum(len(p) for p in progs.values())
    if steps > max_steps:
        raise ValueError(f"{steps} concurrent steps exceeds the limit of {max_steps}")
    result = ExploreResult(mode)
    for schedule in interleavings([progs[t] for t in sorted(progs)]):
        r = Replayer(mode, evict_rate)
        for op in setup:
            r.step(op)
        before = len(r.report.violations)
        for op in schedule:
            r.step(op)
        result.interleavings += 1
        if len(r.report.violations) > before:
            result.violating += 1
            if not result.counterexample:
                result.counterexample = [str(op) for op in schedule]
                result.violation = r.report.violations[before]
    return result
