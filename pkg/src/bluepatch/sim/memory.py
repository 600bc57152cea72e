"""Address space of the simulated controller and the Patchram overlay engine."""

from __future__ import annotations

import bisect
import enum
import struct
from dataclasses import dataclass
from typing import Iterable, Iterator


class RegionKind(enum.Enum):
    ROM = "ROM"
    RAM = "RAM"
    IO = "IO"


@dataclass(frozen=True)
class MemoryRegion:
    start: int
    size: int
    kind: RegionKind
    label: str = ""

    @property
    def end(self) -> int:
        return self.start + self.size

    def contains(self, address: int, length: int = 1) -> bool:
        return self.start <= address and address + length <= self.end


class MemoryError_(Exception):
    pass


class Unmapped(MemoryError_):
    def __init__(self, address: int, length: int = 1):
        super().__init__(f"unmapped access at {address:#x} (+{length})")
        self.address = address
        self.length = length


class SlotOutOfRange(MemoryError_):
    pass


def check_regions(regions: Iterable[MemoryRegion]) -> list[MemoryRegion]:
    ordered = sorted(regions, key=lambda r: r.start)
    for a, b in zip(ordered, ordered[1:]):
        if a.end > b.start:
            raise ValueError(f"regions overlap: {a.label or hex(a.start)} / {b.label or hex(b.start)}")
    return ordered


class Memory:
    """Flat byte store over non-overlapping regions.

    ROM buffers are immutable ``bytes`` and may be shared between copies;
    RAM and IO are private ``bytearray`` objects.  Writes to ROM are dropped
    silently, as on the chip.
    """

    def __init__(self, regions: Iterable[MemoryRegion], rom_image: dict[int, bytes] | None = None):
        self.regions = check_regions(regions)
        self._starts = [r.start for r in self.regions]
        self._buffers: list[bytes | bytearray] = []
        rom_image = rom_image or {}
        for r in self.regions:
            if r.kind is RegionKind.ROM:
                img = bytes(rom_image.get(r.start, b""))[: r.size]
                self._buffers.append(img + bytes(r.size - len(img)))
            else:
                self._buffers.append(bytearray(r.size))
        self.write_listeners: list = []

    # -- lookup ------------------------------------------------------------

    def region_index(self, address: int) -> int | None:
        i = bisect.bisect_right(self._starts, address) - 1
        if i >= 0 and address < self.regions[i].end:
            return i
        return None

    def region_at(self, address: int) -> MemoryRegion | None:
        i = self.region_index(address)
        return None if i is None else self.regions[i]

    def is_mapped(self, address: int, length: int = 1) -> bool:
        return self._span(address, length) is not None

    def _span(self, address: int, length: int) -> list[tuple[int, int, int]] | None:
        """(region index, offset, count) pieces covering the range, or None."""
        pieces = []
        pos, remaining = address, length
        while remaining > 0:
            i = self.region_index(pos)
            if i is None:
                return None
            r = self.regions[i]
            n = min(remaining, r.end - pos)
            pieces.append((i, pos - r.start, n))
            pos += n
            remaining -= n
        return pieces

    # -- raw access ----------------------------------------------------------

    def read_raw(self, address: int, length: int) -> bytes:
        pieces = self._span(address, length)
        if pieces is None:
            raise Unmapped(address, length)
        return b"".join(bytes(self._buffers[i][off : off + n]) for i, off, n in pieces)

    def write(self, address: int, data: bytes) -> bool:
        """Store ``data``; returns False if any byte landed in ROM and was dropped."""
        pieces = self._span(address, len(data))
        if pieces is None:
            raise Unmapped(address, len(data))
        stuck = True
        pos = 0
        for i, off, n in pieces:
            buf = self._buffers[i]
            if isinstance(buf, bytearray):
                buf[off : off + n] = data[pos : pos + n]
            else:
                stuck = False
            pos += n
        for listener in self.write_listeners:
            listener(address, len(data))
        return stuck

    def read_u32(self, address: int) -> int:
        return struct.unpack("<I", self.read_raw(address, 4))[0]

    def write_u32(self, address: int, value: int) -> None:
        self.write(address, struct.pack("<I", value & 0xFFFFFFFF))

    def writable_regions(self) -> Iterator[tuple[MemoryRegion, bytearray]]:
        for r, buf in zip(self.regions, self._buffers):
            if isinstance(buf, bytearray):
                yield r, buf

    def dump(self) -> dict[int, bytes]:
        return {r.start: bytes(buf) for r, buf in self.writable_regions()}

    def load(self, dump: dict[int, bytes]) -> None:
        for r, buf in self.writable_regions():
            if r.start in dump:
                data = dump[r.start]
                if len(data) != r.size:
                    raise ValueError(f"dump for {r.start:#x} has {len(data)} bytes, region is {r.size}")
                buf[:] = data
        for listener in self.write_listeners:
            listener(0, 0xFFFFFFFF)

    def clear_writable(self) -> None:
        for _, buf in self.writable_regions():
            buf[:] = bytes(len(buf))
        for listener in self.write_listeners:
            listener(0, 0xFFFFFFFF)

    def copy(self) -> "Memory":
        clone = Memory.__new__(Memory)
        clone.regions = self.regions
        clone._starts = self._starts
        clone._buffers = [b if isinstance(b, bytes) else bytearray(b) for b in self._buffers]
        clone.write_listeners = []
        return clone


@dataclass(frozen=True)
class PatchramLayout:
    value_table: int
    address_table: int
    enable_bitmap: int
    slots: int


class Patchram:
    """ROM overlay engine reading its state straight out of memory.

    Slot ``i`` is live when bit ``i`` of the enable bitmap is set; the word
    at ``address_table + 4*i`` names the ROM target and the word at
    ``value_table + 4*i`` replaces it.  Overlays only cover ROM regions and
    the lowest live slot wins when two slots target the same word.
    """

    def __init__(self, memory: Memory, layout: PatchramLayout):
        self.memory = memory
        self.layout = layout
        self._dirty = True
        self._words: dict[int, bytes] = {}
        self._sorted: list[int] = []
        memory.write_listeners.append(self._on_write)
        self._watch = [
            (layout.value_table, 4 * layout.slots),
            (layout.address_table, 4 * layout.slots),
            (layout.enable_bitmap, (layout.slots + 7) // 8),
        ]

    def _on_write(self, address: int, length: int) -> None:
        for start, size in self._watch:
            if address < start + size and start < address + length:
                self._dirty = True
                return

    def _check_slot(self, slot: int) -> None:
        if not 0 <= slot < self.layout.slots:
            raise SlotOutOfRange(f"slot {slot} outside 0..{self.layout.slots - 1}")

    def apply(self, slot: int, address: int, value: int) -> None:
        self._check_slot(slot)
        m = self.memory
        m.write_u32(self.layout.value_table + 4 * slot, value)
        m.write_u32(self.layout.address_table + 4 * slot, address)
        self.set_enabled(slot, True)

    def set_enabled(self, slot: int, enabled: bool) -> None:
        self._check_slot(slot)
        at = self.layout.enable_bitmap + slot // 8
        byte = self.memory.read_raw(at, 1)[0]
        bit = 1 << (slot % 8)
        byte = byte | bit if enabled else byte & ~bit
        self.memory.write(at, bytes([byte]))

    def enabled_slots(self) -> list[int]:
        bitmap = self.memory.read_raw(self.layout.enable_bitmap, (self.layout.slots + 7) // 8)
        return [s for s in range(self.layout.slots) if bitmap[s // 8] >> (s % 8) & 1]

    def slot_entry(self, slot: int) -> tuple[int, int]:
        self._check_slot(slot)
        return (
            self.memory.read_u32(self.layout.address_table + 4 * slot),
            self.memory.read_u32(self.layout.value_table + 4 * slot),
        )

    def slot_for(self, address: int) -> int | None:
        for s in self.enabled_slots():
            if self.slot_entry(s)[0] & ~3 == address & ~3:
                return s
        return None

    def clear(self) -> None:
        n = (self.layout.slots + 7) // 8
        self.memory.write(self.layout.enable_bitmap, bytes(n))

    def overlays(self) -> dict[int, bytes]:
        if self._dirty:
            words: dict[int, bytes] = {}
            for s in self.enabled_slots():
                target, value = self.slot_entry(s)
                target &= ~3
                region = self.memory.region_at(target)
                if region is None or region.kind is not RegionKind.ROM or target in words:
                    continue
                words[target] = struct.pack("<I", value)
            self._words = words
            self._sorted = sorted(words)
            self._dirty = False
        return self._words

    def word_at(self, address: int) -> int | None:
        """Overlay value covering ``address``'s word, if patched."""
        w = self.overlays().get(address & ~3)
        return None if w is None else struct.unpack("<I", w)[0]

    def read_view(self, address: int, length: int) -> bytes:
        raw = bytearray(self.memory.read_raw(address, length))
        words = self.overlays()
        if not words:
            return bytes(raw)
        lo = bisect.bisect_left(self._sorted, address - 3)
        hi = bisect.bisect_left(self._sorted, address + length)
        for target in self._sorted[lo:hi]:
            value = words[target]
            for k in range(4):
                pos = target + k - address
                if 0 <= pos < length:
                    raw[pos] = value[k]
        return bytes(raw)
