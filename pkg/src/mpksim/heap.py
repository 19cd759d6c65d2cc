"""First-fit chunk allocator carved out of a page group."""

from __future__ import annotations

import bisect
import itertools
from dataclasses import dataclass

from .errors import DoubleFree, OutOfSpace, UnknownChunk

ALIGN = 16


@dataclass(frozen=True)
class ChunkHandle:
    """A live allocation. ``size`` is the reserved (aligned) size."""

    vkey: int
    offset: int
    size: int
    serial: int


class ChunkAllocator:
    """Free list of ``(offset, size)`` holes kept sorted by offset.

    Frees are coalesced with both neighbours immediately.
    """

    def __init__(self, capacity: int, align: int = ALIGN):
        if capacity <= 0:
            raise ValueError("allocator capacity must be positive")
        self.capacity = capacity
        self.align = align
        self.holes: list[tuple[int, int]] = [(0, capacity)]

    @property
    def free_bytes(self) -> int:
        return sum(size for _, size in self.holes)

    def round_up(self, size: int) -> int:
        return -(-size // self.align) * self.align

    def alloc(self, size: int) -> tuple[int, int]:
        if size <= 0:
            raise ValueError("allocation size must be positive")
        need = self.round_up(size)
        for i, (off, hole) in enumerate(self.holes):
            if hole >= need:
                if hole == need:
                    del self.holes[i]
                else:
                    self.holes[i] = (off + need, hole - need)
                return off, need
        raise OutOfSpace(f"no hole of {need} bytes in a {self.capacity}-byte group")

    def release(self, offset: int, size: int) -> None:
        i = bisect.bisect_left(self.holes, (offset, 0))
        start, end = offset, offset + size
        if i < len(self.holes) and self.holes[i][0] == end:
            end += self.holes[i][1]
            del self.holes[i]
        if i > 0 and sum(self.holes[i - 1]) == start:
            start = self.holes[i - 1][0]
            del self.holes[i - 1]
            i -= 1
        self.holes.insert(i, (start, end - start))


class SecureHeap:
    """Per-group allocators plus handle bookkeeping for double-free checks."""

    def __init__(self):
        self.allocators: dict[int, ChunkAllocator] = {}
        self.live: dict[int, ChunkHandle] = {}
        self.freed: set[int] = set()
        self._serials = itertools.count(1)

    def malloc(self, vkey: int, capacity: int, size: int) -> ChunkHandle:
        alloc = self.allocators.get(vkey)
        if alloc is None:
            alloc = self.allocators[vkey] = ChunkAllocator(capacity)
        offset, reserved = alloc.alloc(size)
        h = ChunkHandle(vkey, offset, reserved, next(self._serials))
        self.live[h.serial] = h
        return h

    def free(self, handle: ChunkHandle) -> None:
        if handle.serial in self.freed:
            raise DoubleFree(f"chunk at offset {handle.offset} of vkey {handle.vkey} already freed")
        if self.live.get(handle.serial) != handle:
            raise UnknownChunk(f"no live chunk {handle}")
        del self.live[handle.serial]
        self.freed.add(handle.serial)
        self.allocators[handle.vkey].release(handle.offset, handle.size)

    def drop_group(self, vkey: int) -> None:
        self.allocators.pop(vkey, None)
        for serial in [s for s, h in self.live.items() if h.vkey == vkey]:
            del self.live[serial]

    def chunks(self, vkey: int) -> list[ChunkHandle]:
        return sorted((h for h in self.live.values() if h.vkey == vkey), key=lambda h: h.offset)
