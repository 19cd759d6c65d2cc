"""Cycle-cost constants and the accumulating ledger."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, fields


@dataclass(frozen=True)
class CostModel:
    """Per-operation cycle costs.

    The first six values are measured latencies of the MPK instructions and
    syscalls on a Xeon Gold 5115. The remaining three are calibration knobs:

    * ``mprotect_per_extra_page`` gives mprotect/pkey_mprotect linear growth in
      the number of pages touched by a single call.
    * ``bookkeeping`` is the user-space cost of one manager API call (hash
      lookup, LRU update). 66.4 puts a single-thread cache hit at 89.7 cycles,
      about 12.2x below a one-page mprotect.
    * ``sync_per_remote_thread`` is charged to the caller of a PKRU sync for
      every other thread it hooks and kicks. 87.4 puts a four-thread hit at
      about 3.1x below a one-page mprotect.
    """

    pkey_alloc: float = 186.3
    pkey_free: float = 137.2
    pkey_mprotect: float = 1104.9
    mprotect_base: float = 1094.0
    rdpkru: float = 0.5
    wrpkru: float = 23.3
    mprotect_per_extra_page: float = 3.0
    bookkeeping: float = 66.4
    sync_per_remote_thread: float = 87.4

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ValueError(f"cost constant {f.name} must be positive")

    def mprotect(self, pages: int) -> float:
        return self.mprotect_base + self.mprotect_per_extra_page * (pages - 1)

    def pkey_mprotect_cost(self, pages: int) -> float:
        return self.pkey_mprotect + self.mprotect_per_extra_page * (pages - 1)


@dataclass(frozen=True)
class Charge:
    tid: int
    op: str
    cycles: float


class CostLedger:
    """Append-only record of every modeled charge."""

    def __init__(self, model: CostModel | None = None):
        self.model = model or CostModel()
        self.entries: list[Charge] = []

    def charge(self, tid: int, op: str, cycles: float) -> None:
        if cycles < 0:
            raise ValueError("negative charge")
        self.entries.append(Charge(tid, op, cycles))

    @property
    def total(self) -> float:
        return math.fsum(c.cycles for c in self.entries)

    def mark(self) -> int:
        return len(self.entries)

    def since(self, mark: int) -> float:
        return math.fsum(c.cycles for c in self.entries[mark:])

    def per_thread(self) -> dict[int, float]:
        acc: dict[int, list[float]] = defaultdict(list)
        for c in self.entries:
            acc[c.tid].append(c.cycles)
        return {tid: math.fsum(v) for tid, v in sorted(acc.items())}

    def per_op(self) -> dict[str, float]:
        acc: dict[str, list[float]] = defaultdict(list)
        for c in self.entries:
            acc[c.op].append(c.cycles)
        return {op: math.fsum(v) for op, v in sorted(acc.items())}

    def count(self, op: str) -> int:
        return sum(1 for c in self.entries if c.op == op)
