"""Flat guest memory and the split virtqueue transport.

The descriptor table and both rings are kept as in-process structures;
only the buffers they describe live in :class:`GuestMemory`.  That keeps
guest-memory write accounting limited to payload traffic.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, NamedTuple, Optional

import numpy as np

MIN_QUEUE_SIZE = 2
MAX_QUEUE_SIZE = 32768
IDX_MASK = 0xFFFF

VIRTQ_DESC_F_NEXT = 1
VIRTQ_DESC_F_WRITE = 2


class MemoryAccessError(IndexError):
    """Access outside the bounds of a :class:`GuestMemory`."""


class VirtqueueError(Exception):
    pass


class SizeNotPowerOfTwo(VirtqueueError):
    pass


class SizeOutOfRange(VirtqueueError):
    pass


class QueueFull(VirtqueueError):
    pass


class RegionOutOfBounds(VirtqueueError):
    pass


class BadDescriptorChain(VirtqueueError):
    """A descriptor chain loops or points outside the table or guest memory."""


class NotOutstanding(VirtqueueError):
    pass


class GuestMemory:
    """A contiguous, bounds-checked, little-endian byte space.

    ``write_count`` counts calls to :meth:`write` and :meth:`write_u32`
    (and any writes through writable :meth:`view` slices that are
    reported with :meth:`note_write`), so tests can bound memory traffic.
    """

    def __init__(self, base: int, size: int):
        if size <= 0:
            raise ValueError("memory size must be positive")
        if base < 0:
            raise ValueError("memory base must be non-negative")
        self.base = base
        self.size = size
        self.storage = np.zeros(size, dtype=np.uint8)
        self.write_count = 0

    @property
    def end(self) -> int:
        return self.base + self.size

    def contains(self, addr: int, length: int) -> bool:
        return length >= 0 and addr >= self.base and addr + length <= self.end

    def _offset(self, addr: int, length: int) -> int:
        if not self.contains(addr, length):
            raise MemoryAccessError(
                f"access [{addr:#x}, {addr + length:#x}) outside "
                f"[{self.base:#x}, {self.end:#x})"
            )
        return addr - self.base

    def read(self, addr: int, length: int) -> bytes:
        off = self._offset(addr, length)
        return self.storage[off:off + length].tobytes()

    def write(self, addr: int, data: bytes) -> None:
        off = self._offset(addr, len(data))
        self.storage[off:off + len(data)] = np.frombuffer(bytes(data), dtype=np.uint8)
        self.write_count += 1

    def read_u32(self, addr: int) -> int:
        return struct.unpack("<I", self.read(addr, 4))[0]

    def write_u32(self, addr: int, value: int) -> None:
        self.write(addr, struct.pack("<I", value))

    def view(self, addr: int, length: int, writable: bool = True) -> np.ndarray:
        """Zero-copy slice of the backing store."""
        off = self._offset(addr, length)
        v = self.storage[off:off + length]
        if not writable:
            v = v.view()
            v.flags.writeable = False
        return v

    def note_write(self) -> None:
        self.write_count += 1


@dataclass
class VirtqDescriptor:
    addr: int = 0
    len: int = 0
    flags: int = 0
    next: Optional[int] = None

    @property
    def writable(self) -> bool:
        return bool(self.flags & VIRTQ_DESC_F_WRITE)


class Region(NamedTuple):
    addr: int
    len: int
    writable: bool = False


class UsedElem(NamedTuple):
    head: int
    written_len: int


@dataclass
class ResolvedSegment:
    data: np.ndarray
    writable: bool
    addr: int


@dataclass
class Chain:
    head: int
    segments: list[ResolvedSegment]

    def readable(self) -> list[ResolvedSegment]:
        return [s for s in self.segments if not s.writable]

    def writable(self) -> list[ResolvedSegment]:
        return [s for s in self.segments if s.writable]


@dataclass
class _AvailRing:
    idx: int
    ring: list[int]


@dataclass
class _UsedRing:
    idx: int
    ring: list[UsedElem]


class Virtqueue:
    """Split virtqueue shared by one driver and one device.

    Driver side: :meth:`add_buffer`, :meth:`pop_used`, :meth:`kick`.
    Device side: :meth:`pop`, :meth:`push_used`, :meth:`interrupt`.
    All ring operations hold an internal lock, so one producer and one
    consumer may run on different threads.
    """

    def __init__(self, size: int, mem: GuestMemory):
        if size < MIN_QUEUE_SIZE or size > MAX_QUEUE_SIZE:
            raise SizeOutOfRange(f"queue size {size} not in [{MIN_QUEUE_SIZE}, {MAX_QUEUE_SIZE}]")
        if size & (size - 1):
            raise SizeNotPowerOfTwo(f"queue size {size} is not a power of two")
        self.size = size
        self.mem = mem
        self.desc_table = [VirtqDescriptor() for _ in range(size)]
        self.avail = _AvailRing(0, [0] * size)
        self.used = _UsedRing(0, [UsedElem(0, 0)] * size)
        self._free = list(range(size - 1, -1, -1))
        self._last_avail = 0
        self._last_used = 0
        self._outstanding: set[int] = set()
        self._lock = threading.Lock()
        self._kick_listeners: list[Callable[[], None]] = []
        self._irq_listeners: list[Callable[[], None]] = []

    @property
    def num_free(self) -> int:
        return len(self._free)

    # -- driver side -------------------------------------------------------

    def add_buffer(self, regions: Iterable[Region | tuple]) -> int:
        regions = [Region(*r) for r in regions]
        if not regions:
            raise ValueError("a buffer needs at least one region")
        for r in regions:
            if r.len < 0 or r.len > 0xFFFFFFFF or not self.mem.contains(r.addr, r.len):
                raise RegionOutOfBounds(f"region [{r.addr:#x}, +{r.len:#x}) outside guest memory")
        with self._lock:
            if len(regions) > len(self._free):
                raise QueueFull(f"{len(regions)} descriptors needed, {len(self._free)} free")
            indices = [self._free.pop() for _ in regions]
            for i, (idx, r) in enumerate(zip(indices, regions)):
                d = self.desc_table[idx]
                d.addr, d.len = r.addr, r.len
                d.flags = VIRTQ_DESC_F_WRITE if r.writable else 0
                if i + 1 < len(indices):
                    d.flags |= VIRTQ_DESC_F_NEXT
                    d.next = indices[i + 1]
                else:
                    d.next = None
            head = indices[0]
            self.avail.ring[self.avail.idx % self.size] = head
            self.avail.idx = (self.avail.idx + 1) & IDX_MASK
        return head

    def pop_used(self) -> Optional[UsedElem]:
        with self._lock:
            if self._last_used == self.used.idx:
                return None
            elem = self.used.ring[self._last_used % self.size]
            self._last_used = (self._last_used + 1) & IDX_MASK
            self._free_chain(elem.head)
        return elem

    def _free_chain(self, head: int) -> None:
        idx: Optional[int] = head
        for _ in range(self.size):
            if idx is None:
                return
            d = self.desc_table[idx]
            nxt = d.next if d.flags & VIRTQ_DESC_F_NEXT else None
            d.flags, d.next = 0, None
            self._free.append(idx)
            idx = nxt

    def kick(self) -> None:
        for cb in list(self._kick_listeners):
            cb()

    def on_interrupt(self, cb: Callable[[], None]) -> None:
        self._irq_listeners.append(cb)

    # -- device side -------------------------------------------------------

    def pop(self) -> Optional[Chain]:
        with self._lock:
            if self._last_avail == self.avail.idx:
                return None
            head = self.avail.ring[self._last_avail % self.size]
            segments = self._resolve(head)
            self._last_avail = (self._last_avail + 1) & IDX_MASK
            self._outstanding.add(head)
        return Chain(head, segments)

    def _resolve(self, head: int) -> list[ResolvedSegment]:
        segments: list[ResolvedSegment] = []
        seen: set[int] = set()
        idx: Optional[int] = head
        while idx is not None:
            if not 0 <= idx < self.size:
                raise BadDescriptorChain(f"descriptor index {idx} out of range")
            if idx in seen or len(seen) >= self.size:
                raise BadDescriptorChain(f"descriptor chain from {head} loops at {idx}")
            seen.add(idx)
            d = self.desc_table[idx]
            if not self.mem.contains(d.addr, d.len):
                raise BadDescriptorChain(f"descriptor {idx} points outside guest memory")
            segments.append(ResolvedSegment(self.mem.view(d.addr, d.len, d.writable), d.writable, d.addr))
            idx = d.next if d.flags & VIRTQ_DESC_F_NEXT else None
        return segments

    def push_used(self, head: int, written_len: int) -> None:
        with self._lock:
            if head not in self._outstanding:
                raise NotOutstanding(f"descriptor {head} was not popped by the device")
            self._outstanding.discard(head)
            self.used.ring[self.used.idx % self.size] = UsedElem(head, written_len)
            self.used.idx = (self.used.idx + 1) & IDX_MASK

    def on_kick(self, cb: Callable[[], None]) -> None:
        self._kick_listeners.append(cb)

    def interrupt(self) -> None:
        for cb in list(self._irq_listeners):
            cb()

    # -- checks ------------------------------------------------------------

    def in_flight(self) -> int:
        return (self.avail.idx - self.used.idx) & IDX_MASK

    def check_invariants(self) -> None:
        assert 0 <= self.in_flight() <= self.size, "avail.idx - used.idx out of range"
        for i in range(self.size):
            assert 0 <= self.avail.ring[i] < self.size
            assert 0 <= self.used.ring[i].head < self.size


def create_queue(size: int, mem: GuestMemory) -> Virtqueue:
    return Virtqueue(size, mem)


def driver_add_buffer(q: Virtqueue, regions: Iterable[Region | tuple]) -> int:
    return q.add_buffer(regions)


def device_pop(q: Virtqueue) -> Optional[Chain]:
    return q.pop()


def device_push_used(q: Virtqueue, head: int, written_len: int) -> None:
    q.push_used(head, written_len)


def driver_pop_used(q: Virtqueue) -> Optional[UsedElem]:
    return q.pop_used()
