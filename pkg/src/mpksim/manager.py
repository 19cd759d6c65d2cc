"""Virtual protection keys on top of the 15 usable hardware keys.

Page groups are named by caller-chosen integers (vkeys). The manager owns
every hardware key and caches vkey -> pkey bindings with LRU replacement.
Two usage models are offered:

* ``mpk_begin`` / ``mpk_end`` open a thread-local domain. The group always
  holds a hardware key while a domain is open, and only the opening thread's
  PKRU grants access.
* ``mpk_mprotect`` changes a group's permission for every thread. Bound
  groups get a PKRU sync; unbound groups either steal the LRU key (subject to
  the eviction rate) or fall back to plain mprotect.

Execute-only requests share a single reserved key whose right is no-access on
every thread.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from collections.abc import Mapping
from dataclasses import dataclass, field
from fractions import Fraction

from .errors import (AlreadyInitialized, ExecOnlyGroup, GroupBusy, KernelKeysUnavailable,
                     MetadataProtectionError, NoEvictableKey, NotBegun, UnknownVkey,
                     VkeyInUse)
from .heap import ChunkHandle, SecureHeap
from .hw import (NA, NUM_KEYS, PAGE_SIZE, PERM_NONE, RO, RW, AccessRight, PagePerm,
                 ThreadContext)
from .kernel import Kernel, Span, normalize_prot, pte_perm

GROUP_RECORD_BYTES = 32
HASHMAP_RESERVATION_BYTES = 32 * 1024


def right_for(prot: PagePerm) -> AccessRight:
    if prot.read and prot.write:
        return RW
    if prot.read:
        return RO
    return NA


@dataclass
class PageGroup:
    vkey: int
    ranges: list[Span]
    perm: PagePerm
    bound_pkey: int = 0
    domain: bool = False
    exec_only: bool = False
    openers: dict[int, int] = field(default_factory=dict)
    last_use: int = 0

    @property
    def active_threads(self) -> int:
        return len(self.openers)

    @property
    def npages(self) -> int:
        return sum(s.count for s in self.ranges)

    def pages(self):
        for s in self.ranges:
            yield from s.pages()


@dataclass(frozen=True)
class GroupRecord:
    """Read-only snapshot handed to application code."""

    vkey: int
    ranges: tuple[Span, ...]
    perm: PagePerm
    bound_pkey: int
    domain: bool
    exec_only: bool
    active_threads: int
    last_use: int

    @classmethod
    def of(cls, g: PageGroup) -> GroupRecord:
        return cls(g.vkey, tuple(g.ranges), g.perm, g.bound_pkey, g.domain, g.exec_only,
                   g.active_threads, g.last_use)


class MetadataStore:
    """Kernel-side group table. Every mutation leaves an audit entry."""

    def __init__(self):
        self._groups: dict[int, PageGroup] = {}
        self.audit: list[tuple[str, int]] = []

    def __contains__(self, vkey):
        return vkey in self._groups

    def get(self, vkey: int) -> PageGroup | None:
        return self._groups.get(vkey)

    def put(self, op: str, group: PageGroup) -> None:
        self._groups[group.vkey] = group
        self.audit.append((op, group.vkey))

    def touch(self, op: str, vkey: int) -> None:
        self.audit.append((op, vkey))

    def remove(self, op: str, vkey: int) -> None:
        del self._groups[vkey]
        self.audit.append((op, vkey))

    def groups(self):
        return self._groups.values()

    def __len__(self):
        return len(self._groups)

    @property
    def bytes_used(self) -> int:
        return HASHMAP_RESERVATION_BYTES + GROUP_RECORD_BYTES * len(self._groups)

    def view(self) -> MetadataView:
        return MetadataView(self)


class MetadataView(Mapping):
    """Application mapping of the metadata page: readable, never writable."""

    __slots__ = ("_store",)

    def __init__(self, store: MetadataStore):
        object.__setattr__(self, "_store", store)

    def __getitem__(self, vkey):
        g = self._store.get(vkey)
        if g is None:
            raise KeyError(vkey)
        return GroupRecord.of(g)

    def __iter__(self):
        return iter(sorted(self._store._groups))

    def __len__(self):
        return len(self._store)

    @property
    def bytes_used(self) -> int:
        return self._store.bytes_used

    def __setitem__(self, key, value):
        raise MetadataProtectionError("metadata page is read-only from user space")

    def __delitem__(self, key):
        raise MetadataProtectionError("metadata page is read-only from user space")

    def __setattr__(self, name, value):
        raise MetadataProtectionError("metadata page is read-only from user space")


class KeyCache:
    def __init__(self, keys, evict_rate: float):
        self.free: list[int] = sorted(keys)
        self.lru: OrderedDict[int, int] = OrderedDict()  # pkey -> vkey, oldest first
        self.binding: dict[int, int] = {}  # vkey -> pkey, including exec-only groups
        self.reserved_exec_key: int | None = None
        self.exec_groups: set[int] = set()
        self.evict_rate = evict_rate
        self._rate = Fraction(evict_rate).limit_denominator(10 ** 6)
        self._decisions = 0
        self.lookups = 0
        self.hits = 0
        self.miss_count = 0
        self.evict_count = 0

    def lookup(self, vkey: int) -> int | None:
        return self.binding.get(vkey)

    def take_free(self) -> int | None:
        return self.free.pop(0) if self.free else None

    def give_back(self, pkey: int) -> None:
        self.free.append(pkey)
        self.free.sort()

    def should_evict(self) -> bool:
        """Spread evictions evenly: the n-th full-cache miss evicts iff
        floor(n * rate) > floor((n - 1) * rate)."""
        self._decisions += 1
        n = self._decisions
        return math.floor(n * self._rate) > math.floor((n - 1) * self._rate)

    def lru_order(self) -> list[tuple[int, int]]:
        """(vkey, pkey) pairs from least to most recently used."""
        return [(v, k) for k, v in self.lru.items()]


def mpk_init(kernel: Kernel, evict_rate: float, thread: ThreadContext | None = None) -> VkeyManager:
    """Take every hardware key from the kernel and start an empty manager."""
    if kernel.manager is not None:
        raise AlreadyInitialized("the process already has a key manager")
    if not 0 <= evict_rate <= 1:
        raise ValueError(f"eviction rate {evict_rate} outside [0, 1]")
    if kernel.bitmap != 1:
        raise KernelKeysUnavailable("some protection keys are already allocated")
    thread = thread or kernel.thread(0)
    kernel.resume(thread)
    keys = [kernel.pkey_alloc(thread, NA) for _ in range(NUM_KEYS - 1)]
    for k in keys:
        kernel.do_pkey_sync(thread, k, NA)
    mgr = VkeyManager(kernel, keys, evict_rate)
    kernel.manager = mgr
    kernel.protected_keys.update(keys)
    return mgr


class VkeyManager:
    def __init__(self, kernel: Kernel, keys, evict_rate: float):
        self.kernel = kernel
        self.cache = KeyCache(keys, evict_rate)
        self.store = MetadataStore()
        self.heap = SecureHeap()
        self._clock = 0

    @property
    def metadata(self) -> MetadataView:
        return self.store.view()

    @property
    def metadata_bytes(self) -> int:
        return self.store.bytes_used

    # helpers ---------------------------------------------------------------

    def _group(self, vkey: int) -> PageGroup:
        g = self.store.get(vkey)
        if g is None:
            raise UnknownVkey(f"vkey {vkey} has no page group")
        return g

    def _enter(self, thread: ThreadContext) -> None:
        self.kernel.resume(thread)
        self.kernel.ledger.charge(thread.tid, "libmpk", self.kernel.cost.bookkeeping)

    def _touch(self, g: PageGroup) -> None:
        self._clock += 1
        g.last_use = self._clock
        if g.bound_pkey and not g.exec_only:
            self.cache.lru.move_to_end(g.bound_pkey)

    @staticmethod
    def _bound_pte(g: PageGroup) -> PagePerm:
        # rights live in PKRU; the PTE only carries the exec bit
        return PagePerm(read=True, write=True, exec=g.perm.exec and not g.domain)

    def _retag(self, thread, g: PageGroup, perm: PagePerm, pkey: int, op="pkey_mprotect") -> None:
        for span in g.ranges:
            self.kernel.assign_key(thread, span, perm, pkey, op=op)

    def cache_lookup(self, vkey: int) -> int | None:
        return self.cache.lookup(vkey)

    def evict_lru(self, thread: ThreadContext | None = None) -> int | None:
        """Unbind the least recently used idle group and return its vkey."""
        thread = thread or self.kernel.thread(0)
        for pkey, vkey in self.cache.lru.items():
            g = self.store.get(vkey)
            if g.active_threads == 0:
                break
        else:
            return None
        del self.cache.lru[pkey]
        del self.cache.binding[vkey]
        g.bound_pkey = 0
        # domain groups have perm NONE, so this also revokes page access
        self._retag(thread, g, pte_perm(g.perm), 0)
        self.cache.give_back(pkey)
        self.cache.evict_count += 1
        self.store.touch("evict", vkey)
        return vkey

    def _obtain_key(self, thread, force: bool) -> int | None:
        k = self.cache.take_free()
        if k is not None:
            return k
        if not force and not self.cache.should_evict():
            return None
        if self.evict_lru(thread) is None:
            return None
        return self.cache.take_free()

    def _bind(self, thread, g: PageGroup, pkey: int) -> None:
        g.bound_pkey = pkey
        self.cache.binding[g.vkey] = pkey
        self.cache.lru[pkey] = g.vkey
        self._retag(thread, g, self._bound_pte(g), pkey)
        if g.domain:
            if self.kernel.synced_rights.get(pkey, RW) != NA:
                self.kernel.do_pkey_sync(thread, pkey, NA)
        else:
            self.kernel.do_pkey_sync(thread, pkey, right_for(g.perm))

    def _unbind(self, g: PageGroup) -> None:
        pkey = g.bound_pkey
        if g.exec_only:
            self.cache.exec_groups.discard(g.vkey)
            if not self.cache.exec_groups:
                self.cache.give_back(pkey)
                self.cache.reserved_exec_key = None
            g.exec_only = False
        else:
            del self.cache.lru[pkey]
            self.cache.give_back(pkey)
        del self.cache.binding[g.vkey]
        g.bound_pkey = 0

    # group lifetime --------------------------------------------------------

    def mpk_mmap(self, thread: ThreadContext, vkey: int, length: int, prot: PagePerm) -> Span:
        if not isinstance(vkey, int) or vkey < 0:
            raise ValueError(f"vkey must be a non-negative integer, got {vkey!r}")
        if length <= 0:
            raise ValueError("mpk_mmap length must be positive")
        if vkey in self.store:
            raise VkeyInUse(f"vkey {vkey} already names a page group")
        self._enter(thread)
        prot = normalize_prot(prot)
        npages = -(-length // PAGE_SIZE)
        if prot.exec_only:
            span = self.kernel.mmap(thread, npages, PERM_NONE)
            g = PageGroup(vkey, [span], PERM_NONE)
            self.store.put("mmap", g)
            self._protect_exec_only(thread, g, count=False)
        else:
            span = self.kernel.mmap(thread, npages, prot)
            self.store.put("mmap", PageGroup(vkey, [span], prot))
        return span

    def mpk_munmap(self, thread: ThreadContext, vkey: int) -> None:
        g = self._group(vkey)
        if g.active_threads:
            raise GroupBusy(f"vkey {vkey} has {g.active_threads} open domain(s)")
        self._enter(thread)
        if g.bound_pkey:
            self._unbind(g)
        for span in g.ranges:
            self.kernel.munmap(span)
        self.heap.drop_group(vkey)
        self.store.remove("munmap", vkey)

    # thread-local domains --------------------------------------------------

    def mpk_begin(self, thread: ThreadContext, vkey: int, prot: AccessRight) -> None:
        g = self._group(vkey)
        if g.exec_only:
            raise ExecOnlyGroup(f"vkey {vkey} is execute-only")
        self._enter(thread)
        self.cache.lookups += 1
        if g.bound_pkey:
            self.cache.hits += 1
            if not g.domain:
                # all other threads lose the process-wide right
                old_pte = self._bound_pte(g)
                g.domain = True
                g.perm = PERM_NONE
                if self._bound_pte(g) != old_pte:
                    self._retag(thread, g, self._bound_pte(g), g.bound_pkey, op="mprotect")
                self.kernel.do_pkey_sync(thread, g.bound_pkey, NA)
        else:
            self.cache.miss_count += 1
            pkey = self._obtain_key(thread, force=True)
            if pkey is None:
                raise NoEvictableKey("every hardware key is held by an open domain")
            g.domain = True
            g.perm = PERM_NONE
            self._bind(thread, g, pkey)
        k = g.bound_pkey
        self.kernel.machine.wrpkru(thread, thread.pkru.with_entry(k, prot))
        g.openers[thread.tid] = g.openers.get(thread.tid, 0) + 1
        self._touch(g)
        self.store.touch("begin", vkey)

    def mpk_end(self, thread: ThreadContext, vkey: int) -> None:
        g = self._group(vkey)
        if thread.tid not in g.openers:
            raise NotBegun(f"thread {thread.tid} has no open domain on vkey {vkey}")
        self._enter(thread)
        g.openers[thread.tid] -= 1
        if g.openers[thread.tid] == 0:
            del g.openers[thread.tid]
            self.kernel.machine.wrpkru(thread, thread.pkru.with_entry(g.bound_pkey, NA))
        self._touch(g)
        self.store.touch("end", vkey)

    # process-wide permission ------------------------------------------------

    def mpk_mprotect(self, thread: ThreadContext, vkey: int, prot: PagePerm) -> None:
        g = self._group(vkey)
        if g.active_threads:
            raise GroupBusy(f"vkey {vkey} has {g.active_threads} open domain(s)")
        self._enter(thread)
        prot = normalize_prot(prot)
        if prot.exec_only:
            self._protect_exec_only(thread, g, count=True)
            return
        self.cache.lookups += 1
        if g.exec_only:
            self._unbind(g)
        old_pte = self._bound_pte(g)
        g.domain = False
        g.perm = prot
        if g.bound_pkey:
            self.cache.hits += 1
            if self._bound_pte(g) != old_pte:
                self._retag(thread, g, self._bound_pte(g), g.bound_pkey, op="mprotect")
            self.kernel.do_pkey_sync(thread, g.bound_pkey, right_for(prot))
            self._touch(g)
        else:
            self.cache.miss_count += 1
            pkey = self._obtain_key(thread, force=False)
            if pkey is not None:
                self._bind(thread, g, pkey)
                self._touch(g)
            else:
                self._retag(thread, g, pte_perm(prot), 0, op="mprotect")
        self.store.touch("mprotect", vkey)

    def _protect_exec_only(self, thread, g: PageGroup, count: bool) -> None:
        if count:
            self.cache.lookups += 1
        if g.exec_only:
            if count:
                self.cache.hits += 1
            self._touch(g)
            return
        if count:
            self.cache.miss_count += 1
        if g.bound_pkey:
            self._unbind(g)
        if self.cache.reserved_exec_key is None:
            pkey = self._obtain_key(thread, force=True)
            if pkey is None:
                raise NoEvictableKey("no key can be reserved for execute-only memory")
            self.cache.reserved_exec_key = pkey
            if self.kernel.synced_rights.get(pkey, RW) != NA:
                self.kernel.do_pkey_sync(thread, pkey, NA)
        pkey = self.cache.reserved_exec_key
        g.exec_only = True
        g.domain = False
        g.perm = PagePerm(exec=True)
        g.bound_pkey = pkey
        self.cache.exec_groups.add(g.vkey)
        self.cache.binding[g.vkey] = pkey
        self._retag(thread, g, pte_perm(g.perm), pkey)
        self._touch(g)
        self.store.touch("mprotect", g.vkey)

    # heap ------------------------------------------------------------------

    def mpk_malloc(self, vkey: int, size: int) -> ChunkHandle:
        g = self._group(vkey)
        return self.heap.malloc(vkey, g.npages * PAGE_SIZE, size)

    def mpk_free(self, handle: ChunkHandle) -> None:
        self.heap.free(handle)

    # introspection ---------------------------------------------------------

    def stats(self) -> dict[str, int]:
        c = self.cache
        return {"lookups": c.lookups, "hits": c.hits, "misses": c.miss_count,
                "evictions": c.evict_count}
