"""Exact-fault memory model for the simulated target.

Every access either succeeds inside a permitting region or raises a fault
carrying the precise failing address and access kind.  An allocation table
over the heap region catches allocator misuse: bad frees, double frees,
oversized or negative-as-unsigned requests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from ..errors import ScenarioError
from ..wire import AccessKind

PAGE_SIZE = 4096

PERM_R = "r"
PERM_W = "w"
PERM_X = "x"

REGION_TAGS = ("heap", "stack", "text", "unmapped-probe")


class MemoryFault(Exception):
    def __init__(self, kind: AccessKind, address: int):
        self.kind = kind
        self.address = address
        super().__init__(f"{kind.name} fault at {address:#x}")


@dataclass
class Region:
    name: str
    base: int
    length: int
    perms: str
    tag: str

    @property
    def end(self) -> int:
        return self.base + self.length

    def contains(self, addr: int) -> bool:
        return self.base <= addr < self.end


class SimMemory:
    def __init__(self, word_bits: int = 64, page_size: int = PAGE_SIZE):
        self.word_bits = word_bits
        self.page_size = page_size
        self.regions: list[Region] = []
        self._backing: dict[str, bytearray] = {}
        self._alloc_region: Optional[Region] = None
        self.alloc_cap = 4096
        self._allocs: dict[int, int] = {}
        self._alloc_next = 0

    def add_region(self, name: str, base: int, length: int, perms: str, tag: str) -> None:
        if tag not in REGION_TAGS:
            raise ScenarioError(f"region {name!r}: unknown tag {tag!r}")
        if base < self.page_size and tag != "unmapped-probe":
            raise ScenarioError(f"region {name!r} overlaps the zero page")
        for r in self.regions:
            if base < r.end and r.base < base + length:
                raise ScenarioError(f"region {name!r} overlaps {r.name!r}")
        region = Region(name, base, length, perms, tag)
        self.regions.append(region)
        if tag != "unmapped-probe":
            self._backing[name] = bytearray(length)

    def set_alloc_region(self, name: str, cap: int) -> None:
        region = next((r for r in self.regions if r.name == name), None)
        if region is None:
            raise ScenarioError(f"alloc region {name!r} not declared")
        self._alloc_region = region
        self.alloc_cap = cap

    # -- access paths ------------------------------------------------------

    def _region_for(self, addr: int, perm: str) -> Optional[Region]:
        for r in self.regions:
            if r.contains(addr) and r.tag != "unmapped-probe" and perm in r.perms:
                return r
        return None

    def first_fault(self, addr: int, length: int, perm: str) -> Optional[int]:
        """First address in [addr, addr+length) that would fault, else None.

        Computed from region bounds, not byte-at-a-time, so huge corrupted
        lengths cost nothing.
        """
        mask = (1 << self.word_bits) - 1
        cursor = addr & mask
        remaining = length
        while remaining > 0:
            region = self._region_for(cursor, perm)
            if region is None:
                return cursor
            span = min(remaining, region.end - cursor)
            cursor += span
            remaining -= span
        return None

    def read(self, addr: int, length: int) -> bytes:
        bad = self.first_fault(addr, length, PERM_R)
        if bad is not None:
            raise MemoryFault(AccessKind.READ, bad)
        return self._slice(addr, length)

    def write(self, addr: int, data: bytes) -> None:
        bad = self.first_fault(addr, len(data), PERM_W)
        if bad is not None:
            raise MemoryFault(AccessKind.WRITE, bad)
        self._store(addr, data)

    def check_exec(self, addr: int) -> None:
        if self._region_for(addr, PERM_X) is None:
            raise MemoryFault(AccessKind.EXEC, addr & ((1 << self.word_bits) - 1))

    def copy(self, dst: int, src: int, length: int) -> None:
        """Length-bounded copy; faults at the first byte that fails on
        either side, read side first, matching per-byte semantics."""
        if length <= 0:
            return
        bad_r = self.first_fault(src, length, PERM_R)
        bad_w = self.first_fault(dst, length, PERM_W)
        off_r = (bad_r - src) % (1 << self.word_bits) if bad_r is not None else length
        off_w = (bad_w - dst) % (1 << self.word_bits) if bad_w is not None else length
        if off_r <= off_w and bad_r is not None:
            raise MemoryFault(AccessKind.READ, bad_r)
        if bad_w is not None:
            raise MemoryFault(AccessKind.WRITE, bad_w)
        self._store(dst, self._slice(src, length))

    # fault-free variants for adapter bookkeeping (snapshots, directives)

    def read_nofault(self, addr: int, length: int) -> Optional[bytes]:
        if self.first_fault(addr, length, PERM_R) is not None:
            return None
        return self._slice(addr, length)

    def write_nofault(self, addr: int, data: bytes) -> bool:
        if self.first_fault(addr, len(data), PERM_W) is not None:
            return False
        self._store(addr, data)
        return True

    # -- allocator ----------------------------------------------------------

    def alloc(self, size: int) -> int:
        region = self._alloc_region
        if region is None:
            raise ScenarioError("no allocation region configured")
        if size > self.alloc_cap or size >= (1 << (self.word_bits - 1)):
            # oversized or negative-as-unsigned request
            raise MemoryFault(AccessKind.ALLOC_MISUSE, region.base + self._alloc_next)
        size = max(1, size)
        if self._alloc_next + size > region.length:
            raise MemoryFault(AccessKind.ALLOC_MISUSE, region.end)
        addr = region.base + self._alloc_next
        self._alloc_next += (size + 15) & ~15
        self._allocs[addr] = size
        return addr

    def free(self, addr: int) -> None:
        if addr not in self._allocs:
            raise MemoryFault(AccessKind.ALLOC_MISUSE, addr & ((1 << self.word_bits) - 1))
        del self._allocs[addr]

    # -- locks ---------------------------------------------------------------

    def lock_acquire(self, addr: int) -> None:
        raw = self.read(addr, 8)
        state = int.from_bytes(raw, "little")
        if state != 0:
            # corrupted or already-held lock never becomes available
            raise MemoryFault(AccessKind.DEADLOCK, addr)
        self.write(addr, (1).to_bytes(8, "little"))

    def lock_release(self, addr: int) -> None:
        self.write(addr, (0).to_bytes(8, "little"))

    # -- internals ------------------------------------------------------------

    def _locate(self, addr: int) -> tuple[Region, int]:
        for r in self.regions:
            if r.contains(addr) and r.tag != "unmapped-probe":
                return r, addr - r.base
        raise MemoryFault(AccessKind.READ, addr)

    def _slice(self, addr: int, length: int) -> bytes:
        out = b""
        cursor = addr
        remaining = length
        while remaining > 0:
            region, off = self._locate(cursor)
            span = min(remaining, region.length - off)
            out += bytes(self._backing[region.name][off : off + span])
            cursor += span
            remaining -= span
        return out

    def _store(self, addr: int, data: bytes) -> None:
        cursor = addr
        pos = 0
        while pos < len(data):
            region, off = self._locate(cursor)
            span = min(len(data) - pos, region.length - off)
            self._backing[region.name][off : off + span] = data[pos : pos + span]
            cursor += span
            pos += span
