"""HCD firmware-update containers and Patchram TLV blocks.

An HCD file is a run of bare HCI command frames (opcode, length, params),
normally Write_RAM records closed by ``Launch_RAM(0xFFFFFFFF)``.  ROM patches
travel inside those writes as a TLV chain; type 0x08 is a single 32-bit
Patchram overlay with a fixed 15-byte payload.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Union

from .hci import (
    DEFAULT_VENDOR_OPCODES,
    LAUNCH_RAM_REBOOT,
    WRITE_RAM_MAX_CHUNK,
    HciCommand,
    LaunchRam,
    Truncated,
    VendorOpcodeTable,
    WriteRam,
    build_vendor_command,
    encode_command,
    parse_vendor_command,
)

PATCHRAM_TLV_TYPE = 0x08
PATCHRAM_PAYLOAD_LEN = 15
END_TLV_TYPE = 0xFE


class PatchError(Exception):
    pass


class DuplicateSlot(PatchError):
    pass


class BadLength(PatchError):
    pass


class UnalignedAddress(PatchError):
    pass


@dataclass
class HcdFile:
    records: list[HciCommand] = field(default_factory=list)
    table: VendorOpcodeTable = DEFAULT_VENDOR_OPCODES

    @property
    def terminated(self) -> bool:
        if not self.records:
            return False
        last = parse_vendor_command(self.records[-1], self.table)
        return isinstance(last, LaunchRam) and last.address == LAUNCH_RAM_REBOOT

    def write_ram_records(self) -> list[WriteRam]:
        out = []
        for rec in self.records:
            kind = parse_vendor_command(rec, self.table)
            if isinstance(kind, WriteRam):
                out.append(kind)
        return out


def parse_hcd(data: bytes, table: VendorOpcodeTable = DEFAULT_VENDOR_OPCODES) -> HcdFile:
    data = bytes(data)
    records = []
    offset = 0
    while offset < len(data):
        if len(data) - offset < 3:
            raise Truncated(f"record header cut at offset {offset:#x}", offset)
        opcode, plen = struct.unpack_from("<HB", data, offset)
        end = offset + 3 + plen
        if end > len(data):
            raise Truncated(
                f"record at offset {offset:#x} declares {plen} bytes, file ends early", offset
            )
        records.append(HciCommand(opcode, data[offset + 3 : end]))
        offset = end
    return HcdFile(records, table)


def serialize_hcd(hcd: HcdFile) -> bytes:
    return b"".join(encode_command(rec) for rec in hcd.records)


def read_hcd(path: str | Path, table: VendorOpcodeTable = DEFAULT_VENDOR_OPCODES) -> HcdFile:
    return parse_hcd(Path(path).read_bytes(), table)


def write_hcd(path: str | Path, hcd: HcdFile) -> int:
    raw = serialize_hcd(hcd)
    Path(path).write_bytes(raw)
    return len(raw)


# -- Patchram TLV ----------------------------------------------------------


@dataclass(frozen=True)
class TlvObject:
    tlv_type: int
    payload: bytes

    def encode(self) -> bytes:
        return struct.pack("<BH", self.tlv_type, len(self.payload)) + self.payload


@dataclass(frozen=True)
class PatchramEntry:
    """One 4-byte ROM overlay.

    ``reserved`` is the ``00 00`` field and ``unknown`` the trailing four
    bytes; both are carried verbatim so decoded blocks re-encode exactly.
    """

    slot: int
    address: int
    value: int
    reserved: bytes = b"\x00\x00"
    unknown: bytes = b"\x00\x00\x00\x00"

    def payload(self) -> bytes:
        return (
            struct.pack("<BII", self.slot, self.address, self.value)
            + self.reserved
            + self.unknown
        )


TlvItem = Union[PatchramEntry, TlvObject]


def encode_patchram_block(entries: Iterable[TlvItem]) -> bytes:
    out = bytearray()
    seen: set[int] = set()
    for entry in entries:
        if isinstance(entry, TlvObject):
            out += entry.encode()
            continue
        if not 0 <= entry.slot <= 0xFF:
            raise PatchError(f"slot {entry.slot} does not fit one byte")
        if entry.slot in seen:
            raise DuplicateSlot(f"slot {entry.slot} used twice")
        if entry.address % 4:
            raise UnalignedAddress(f"patch address {entry.address:#x} is not word aligned")
        if len(entry.reserved) != 2 or len(entry.unknown) != 4:
            raise BadLength("reserved/unknown fields must be 2 and 4 bytes")
        seen.add(entry.slot)
        out += TlvObject(PATCHRAM_TLV_TYPE, entry.payload()).encode()
    return bytes(out)


def decode_patchram_block(data: bytes, stop_at_end_marker: bool = False) -> list[TlvItem]:
    """Decode a TLV chain; non-0x08 objects come back as raw :class:`TlvObject`.

    With ``stop_at_end_marker`` a type byte of 0x00 or 0xFE ends the chain,
    which is how the controller walks its zero-initialised staging buffer.
    """
    data = bytes(data)
    items: list[TlvItem] = []
    offset = 0
    while offset < len(data):
        if stop_at_end_marker and data[offset] in (0x00, END_TLV_TYPE):
            break
        if len(data) - offset < 3:
            raise Truncated(f"TLV header cut at offset {offset}", offset)
        tlv_type, length = struct.unpack_from("<BH", data, offset)
        payload = data[offset + 3 : offset + 3 + length]
        if len(payload) < length:
            raise Truncated(f"TLV at offset {offset} declares {length} bytes", offset)
        if tlv_type == PATCHRAM_TLV_TYPE:
            if length != PATCHRAM_PAYLOAD_LEN:
                raise BadLength(f"Patchram TLV at offset {offset} has length {length}, expected 15")
            slot, address, value = struct.unpack_from("<BII", payload)
            if address % 4:
                warnings.warn(f"Patchram slot {slot} targets unaligned address {address:#x}")
            items.append(PatchramEntry(slot, address, value, payload[9:11], payload[11:15]))
        else:
            items.append(TlvObject(tlv_type, payload))
        offset += 3 + length
    return items


def patchram_entries(items: Sequence[TlvItem]) -> list[PatchramEntry]:
    return [i for i in items if isinstance(i, PatchramEntry)]


def build_patch_hcd(
    entries: Sequence[PatchramEntry],
    staging_address: int,
    table: VendorOpcodeTable = DEFAULT_VENDOR_OPCODES,
    ram_writes: Sequence[WriteRam] = (),
) -> HcdFile:
    """Assemble a flashable HCD: RAM payloads, the TLV block, then reboot."""
    records = [build_vendor_command(w, table) for w in ram_writes]
    block = encode_patchram_block(entries)
    for off in range(0, len(block), WRITE_RAM_MAX_CHUNK):
        chunk = block[off : off + WRITE_RAM_MAX_CHUNK]
        records.append(build_vendor_command(WriteRam(staging_address + off, chunk), table))
    records.append(build_vendor_command(LaunchRam(LAUNCH_RAM_REBOOT), table))
    return HcdFile(records, table)
