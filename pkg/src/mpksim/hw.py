"""MPK hardware state: per-thread PKRU registers and a shared page table."""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field

from .cost import CostLedger

NUM_KEYS = 16
PAGE_SIZE = 4096


@dataclass(frozen=True)
class AccessRight:
    """One PKRU entry: access-disable and write-disable bits.

    (1, 0) and (1, 1) are kept distinct so raw register values round-trip,
    but both mean no access.
    """

    ad: int = 0
    wd: int = 0

    def __post_init__(self):
        if self.ad not in (0, 1) or self.wd not in (0, 1):
            raise ValueError(f"AD/WD must be bits, got {self.ad}, {self.wd}")

    @property
    def can_read(self) -> bool:
        return self.ad == 0

    @property
    def can_write(self) -> bool:
        return self.ad == 0 and self.wd == 0

    def normalized(self) -> AccessRight:
        return NA if self.ad else self

    def __str__(self):
        if self.ad:
            return "na"
        return "ro" if self.wd else "rw"


RW = AccessRight(0, 0)
RO = AccessRight(0, 1)
NA = AccessRight(1, 0)


@dataclass(frozen=True)
class Pkru:
    entries: tuple[AccessRight, ...] = (RW,) * NUM_KEYS

    def __post_init__(self):
        if len(self.entries) != NUM_KEYS:
            raise ValueError(f"PKRU holds exactly {NUM_KEYS} entries")

    def __getitem__(self, pkey: int) -> AccessRight:
        return self.entries[pkey]

    def with_entry(self, pkey: int, right: AccessRight) -> Pkru:
        check_pkey(pkey)
        entries = list(self.entries)
        entries[pkey] = right
        return Pkru(tuple(entries))

    def to_int(self) -> int:
        """Pack into the 32-bit register layout (AD at bit 2k, WD at 2k+1)."""
        value = 0
        for k, r in enumerate(self.entries):
            value |= r.ad << (2 * k) | r.wd << (2 * k + 1)
        return value

    @classmethod
    def from_int(cls, value: int) -> Pkru:
        if not 0 <= value < 1 << 32:
            raise ValueError("PKRU is a 32-bit register")
        return cls(tuple(AccessRight(value >> (2 * k) & 1, value >> (2 * k + 1) & 1)
                         for k in range(NUM_KEYS)))


@dataclass(frozen=True)
class PagePerm:
    read: bool = False
    write: bool = False
    exec: bool = False

    @property
    def exec_only(self) -> bool:
        return self.exec and not self.read and not self.write

    def __str__(self):
        if not (self.read or self.write or self.exec):
            return "na"
        return ("r" if self.read else "") + ("w" if self.write else "") + ("x" if self.exec else "")


PERM_NONE = PagePerm()
PERM_R = PagePerm(read=True)
PERM_RW = PagePerm(read=True, write=True)
PERM_X = PagePerm(exec=True)
PERM_RX = PagePerm(read=True, exec=True)
PERM_RWX = PagePerm(read=True, write=True, exec=True)


@dataclass(frozen=True)
class PageTableEntry:
    page_id: int
    perm: PagePerm
    pkey: int


class AccessKind(enum.Enum):
    READ = "read"
    WRITE = "write"
    FETCH = "fetch"


class Mode(enum.Enum):
    USER = "user"
    KERNEL = "kernel"


@dataclass(frozen=True)
class TaskWork:
    """Deferred PKRU update run when the owning thread returns to user mode."""

    pkey: int
    right: AccessRight


@dataclass
class ThreadContext:
    tid: int
    pkru: Pkru = field(default_factory=Pkru)
    mode: Mode = Mode.USER
    task_work: deque[TaskWork] = field(default_factory=deque)


def check_pkey(pkey: int) -> None:
    if not (isinstance(pkey, int) and 0 <= pkey < NUM_KEYS):
        raise ValueError(f"protection key {pkey!r} does not fit in 4 bits")


def access_allowed(perm: PagePerm, right: AccessRight, kind: AccessKind) -> bool:
    """The MPK intersection rule for one page and one PKRU entry."""
    if kind is AccessKind.FETCH:
        return perm.exec
    if kind is AccessKind.READ:
        return perm.read and right.can_read
    return perm.write and right.can_write


class Machine:
    """Threads, page table and cost ledger of one simulated process.

    Everything is driven by a single owner; simulated concurrency comes from
    interleaving calls on different ThreadContexts.
    """

    def __init__(self, ledger: CostLedger | None = None):
        self.ledger = ledger or CostLedger()
        self.threads: dict[int, ThreadContext] = {}
        self.page_table: dict[int, PageTableEntry] = {}

    def add_thread(self, tid: int, pkru: Pkru | None = None) -> ThreadContext:
        if tid in self.threads:
            raise ValueError(f"thread {tid} already exists")
        t = ThreadContext(tid, pkru or Pkru())
        self.threads[tid] = t
        return t

    def wrpkru(self, thread: ThreadContext, value: Pkru) -> None:
        thread.pkru = value
        self.ledger.charge(thread.tid, "wrpkru", self.ledger.model.wrpkru)

    def rdpkru(self, thread: ThreadContext) -> Pkru:
        self.ledger.charge(thread.tid, "rdpkru", self.ledger.model.rdpkru)
        return thread.pkru

    def set_pte(self, page_id: int, perm: PagePerm, pkey: int) -> None:
        check_pkey(pkey)
        if page_id < 0:
            raise ValueError("page ids are non-negative")
        self.page_table[page_id] = PageTableEntry(page_id, perm, pkey)

    def get_pte(self, page_id: int) -> PageTableEntry | None:
        return self.page_table.get(page_id)

    def clear_pte(self, page_id: int) -> None:
        self.page_table.pop(page_id, None)

    def check_access(self, thread: ThreadContext, page_id: int, kind: AccessKind) -> bool:
        pte = self.page_table.get(page_id)
        if pte is None:
            return False
        return access_allowed(pte.perm, thread.pkru[pte.pkey], kind)
