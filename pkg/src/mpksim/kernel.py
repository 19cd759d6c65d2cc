"""Simulated Linux MPK support: key bitmap, pkey syscalls, exec-only mprotect,
task_work hooks and lazy inter-thread PKRU synchronization.

The known weaknesses of the stock interface are kept on purpose: pkey_free
leaves stale keys in PTEs, and exec-only mprotect only restricts the calling
thread's PKRU.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

from .cost import CostLedger, CostModel
from .errors import InvalidKey, NoFreeKeys, OutOfPages, PageNotMapped
from .hw import (NA, NUM_KEYS, PERM_NONE, AccessKind, AccessRight, Machine, Mode,
                 PagePerm, Pkru, TaskWork, ThreadContext, check_pkey)

ALL_KEYS_MASK = (1 << NUM_KEYS) - 1


@dataclass(frozen=True)
class Span:
    """Contiguous run of pages ``[base, base + count)``."""

    base: int
    count: int

    def __post_init__(self):
        if self.base < 0 or self.count <= 0:
            raise ValueError(f"bad page span {self.base}:{self.count}")

    def pages(self) -> range:
        return range(self.base, self.base + self.count)

    def __str__(self):
        return f"{self.base}:{self.count}"


def pte_perm(prot: PagePerm) -> PagePerm:
    """x86 page-table encoding of a requested protection.

    A present x86 page is always readable, so write or exec imply read at the
    page level; read denial for exec-only memory has to come from a key.
    """
    if not (prot.read or prot.write or prot.exec):
        return PERM_NONE
    return PagePerm(read=True, write=prot.write, exec=prot.exec)


def normalize_prot(prot: PagePerm) -> PagePerm:
    """Protection a process actually observes once mprotect has run.

    Write implies read; exec-only stays exec-only because the kernel backs it
    with a key.
    """
    if prot.write and not prot.read:
        return PagePerm(read=True, write=True, exec=prot.exec)
    return prot


class Kernel:
    def __init__(self, machine: Machine | None = None, cost: CostModel | None = None,
                 max_pages: int = 1 << 24):
        self.machine = machine or Machine(CostLedger(cost))
        self.cost = self.machine.ledger.model
        self.bitmap = 1  # key 0 is permanently allocated
        self.max_pages = max_pages
        self.next_page = 0
        self.mapped: set[int] = set()
        # rights made process-wide by do_pkey_sync; inherited by new threads
        self.synced_rights: dict[int, AccessRight] = {}
        self.exec_only_keys: set[int] = set()
        # keys handed to the key manager; user syscalls may not touch them
        self.protected_keys: set[int] = set()
        self.manager = None

    @property
    def ledger(self) -> CostLedger:
        return self.machine.ledger

    # threads -------------------------------------------------------------

    def spawn(self, tid: int) -> ThreadContext:
        pkru = Pkru()
        for k, r in self.synced_rights.items():
            pkru = pkru.with_entry(k, r)
        return self.machine.add_thread(tid, pkru)

    def thread(self, tid: int) -> ThreadContext:
        t = self.machine.threads.get(tid)
        return t if t is not None else self.spawn(tid)

    def enter_kernel(self, thread: ThreadContext) -> None:
        thread.mode = Mode.KERNEL

    def return_to_user(self, thread: ThreadContext) -> None:
        if thread.mode is not Mode.KERNEL:
            raise ValueError(f"thread {thread.tid} is not in kernel mode")
        while thread.task_work:
            work = thread.task_work.popleft()
            thread.pkru = thread.pkru.with_entry(work.pkey, work.right)
        thread.mode = Mode.USER

    def resume(self, thread: ThreadContext) -> None:
        """Bring a thread back to user mode before it runs user code."""
        if thread.mode is Mode.KERNEL:
            self.return_to_user(thread)

    def access(self, thread: ThreadContext, page_id: int, kind: AccessKind) -> bool:
        self.resume(thread)
        return self.machine.check_access(thread, page_id, kind)

    # address space -------------------------------------------------------

    def mmap(self, thread: ThreadContext, npages: int, prot: PagePerm) -> Span:
        if npages <= 0:
            raise ValueError("mmap of zero pages")
        if self.next_page + npages > self.max_pages:
            raise OutOfPages(f"cannot map {npages} more pages")
        if prot.exec_only and self.free_key_count() == 0:
            raise NoFreeKeys("no key left for execute-only memory")
        span = Span(self.next_page, npages)
        self.next_page += npages
        self.mapped.update(span.pages())
        for p in span.pages():
            self.machine.set_pte(p, PERM_NONE, 0)
        self._protect(thread, span, prot, charge=False)
        return span

    def munmap(self, span: Span) -> None:
        for p in span.pages():
            self.mapped.discard(p)
            self.machine.clear_pte(p)

    def _require_mapped(self, span: Span) -> None:
        for p in span.pages():
            if p not in self.mapped:
                raise PageNotMapped(f"page {p} is not mapped")

    # key bitmap ----------------------------------------------------------

    def is_allocated(self, pkey: int) -> bool:
        return 0 <= pkey < NUM_KEYS and bool(self.bitmap >> pkey & 1)

    def free_key_count(self) -> int:
        return NUM_KEYS - bin(self.bitmap).count("1")

    def _take_lowest_free(self) -> int:
        for k in range(1, NUM_KEYS):
            if not self.bitmap >> k & 1:
                self.bitmap |= 1 << k
                return k
        raise NoFreeKeys("all 15 protection keys are allocated")

    def pkey_alloc(self, thread: ThreadContext, rights: AccessRight) -> int:
        self.ledger.charge(thread.tid, "pkey_alloc", self.cost.pkey_alloc)
        k = self._take_lowest_free()
        thread.pkru = thread.pkru.with_entry(k, rights)
        return k

    def pkey_free(self, thread: ThreadContext, pkey: int) -> None:
        self.ledger.charge(thread.tid, "pkey_free", self.cost.pkey_free)
        if pkey == 0 or not self.is_allocated(pkey) or pkey in self.protected_keys:
            raise InvalidKey(f"pkey {pkey} is not allocated")
        # PTEs still tagged with pkey are deliberately left alone
        self.bitmap &= ~(1 << pkey)
        self.exec_only_keys.discard(pkey)

    # page protection -----------------------------------------------------

    def pkey_mprotect(self, thread: ThreadContext, span: Span, prot: PagePerm, pkey: int) -> None:
        self.ledger.charge(thread.tid, "pkey_mprotect", self.cost.pkey_mprotect_cost(span.count))
        if pkey == 0 or not self.is_allocated(pkey) or pkey in self.protected_keys:
            raise InvalidKey(f"pkey {pkey} is not allocated")
        self._require_mapped(span)
        for p in span.pages():
            self.machine.set_pte(p, pte_perm(prot), pkey)

    def assign_key(self, thread: ThreadContext, span: Span, perm: PagePerm, pkey: int,
                   op: str = "pkey_mprotect") -> None:
        """Kernel-internal retagging; unlike the syscall it may reset to key 0.

        ``perm`` is written to the PTEs verbatim.
        """
        check_pkey(pkey)
        self._require_mapped(span)
        cycles = (self.cost.mprotect(span.count) if op == "mprotect"
                  else self.cost.pkey_mprotect_cost(span.count))
        self.ledger.charge(thread.tid, op, cycles)
        for p in span.pages():
            self.machine.set_pte(p, perm, pkey)

    def mprotect(self, thread: ThreadContext, span: Span, prot: PagePerm) -> None:
        self.ledger.charge(thread.tid, "mprotect", self.cost.mprotect(span.count))
        self._require_mapped(span)
        self._protect(thread, span, prot, charge=True)

    def _protect(self, thread: ThreadContext, span: Span, prot: PagePerm, charge: bool) -> None:
        if prot.exec_only:
            k = self._take_lowest_free()
            self.exec_only_keys.add(k)
            # only the calling thread loses read/write; other threads keep
            # whatever their PKRU says for k
            thread.pkru = thread.pkru.with_entry(k, NA)
            for p in span.pages():
                self.machine.set_pte(p, pte_perm(prot), k)
            return
        for p in span.pages():
            pte = self.machine.get_pte(p)
            pkey = pte.pkey if pte is not None else 0
            if pkey in self.exec_only_keys:
                pkey = 0
            self.machine.set_pte(p, pte_perm(prot), pkey)

    # lazy PKRU synchronization -------------------------------------------

    def task_work_add(self, target: ThreadContext, work: TaskWork) -> None:
        target.task_work.append(work)

    def kick(self, thread: ThreadContext) -> None:
        """Rescheduling interrupt: a user-mode thread is pulled into the kernel."""
        if thread.mode is Mode.USER:
            thread.mode = Mode.KERNEL

    def do_pkey_sync(self, caller: ThreadContext, pkey: int, rights: AccessRight) -> None:
        if not self.is_allocated(pkey):
            raise InvalidKey(f"pkey {pkey} is not allocated")
        caller.pkru = caller.pkru.with_entry(pkey, rights)
        self.ledger.charge(caller.tid, "wrpkru", self.cost.wrpkru)
        for t in self.other_threads(caller):
            self.task_work_add(t, TaskWork(pkey, rights))
            self.kick(t)
            self.ledger.charge(caller.tid, "pkey_sync_hook", self.cost.sync_per_remote_thread)
        self.synced_rights[pkey] = rights

    def other_threads(self, caller: ThreadContext) -> Iterator[ThreadContext]:
        for tid in sorted(self.machine.threads):
            if tid != caller.tid:
                yield self.machine.threads[tid]
