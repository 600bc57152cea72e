"""HCI command/event framing and the Broadcom vendor commands.

Wire forms carry no H4 transport byte; :mod:`bluepatch.capture` adds it
where a file format needs one.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import NamedTuple, Union

MAX_PARAMS = 255
# Command Complete header (num packets, opcode, status) leaves 251 bytes of
# return parameters; Write_RAM loses the same 4 bytes to its address field.
READ_RAM_MAX_CHUNK = 251
WRITE_RAM_MAX_CHUNK = 251

LAUNCH_RAM_REBOOT = 0xFFFFFFFF

VENDOR_OGF = 0x3F


class HciError(Exception):
    pass


class OversizedParams(HciError):
    pass


class Truncated(HciError):
    def __init__(self, message: str, offset: int = 0):
        super().__init__(message)
        self.offset = offset


class LengthMismatch(HciError):
    pass


class WrongEventCode(HciError):
    pass


class Direction(enum.Enum):
    HOST_TO_CONTROLLER = "command"
    CONTROLLER_TO_HOST = "event"


class EventCode(enum.IntEnum):
    CONNECTION_COMPLETE = 0x03
    DISCONNECTION_COMPLETE = 0x05
    COMMAND_COMPLETE = 0x0E
    COMMAND_STATUS = 0x0F
    VENDOR = 0xFF


class Status(enum.IntEnum):
    SUCCESS = 0x00
    UNKNOWN_COMMAND = 0x01
    UNKNOWN_CONNECTION = 0x02
    PAGE_TIMEOUT = 0x04
    COMMAND_DISALLOWED = 0x0C
    INVALID_PARAMETERS = 0x12
    CONNECTION_TERMINATED_LOCAL = 0x16


class VendorEvent(enum.IntEnum):
    """First parameter byte of our vendor-specific (0xFF) events."""

    CRASH_DUMP = 0x01
    TRACEPOINT_REGISTERS = 0x02
    TRACEPOINT_MEMORY = 0x03
    LMP_MONITOR = 0x04


# Standard opcodes the simulator understands besides the vendor set.
NOP = 0x0000
CREATE_CONNECTION = 0x0405
HCI_RESET = 0x0C03
READ_LOCAL_VERSION = 0x1001
ENABLE_DEVICE_UNDER_TEST_MODE = 0x1803


class HciOpcode(NamedTuple):
    ogf: int
    ocf: int

    @property
    def value(self) -> int:
        return (self.ogf << 10) | self.ocf

    @classmethod
    def from_value(cls, value: int) -> "HciOpcode":
        if not 0 <= value <= 0xFFFF:
            raise ValueError(f"opcode out of range: {value:#x}")
        return cls(value >> 10, value & 0x3FF)

    def __str__(self) -> str:
        return f"{self.value:#06x} (ogf={self.ogf:#04x}, ocf={self.ocf:#05x})"


def vendor_opcode(ocf: int) -> int:
    return HciOpcode(VENDOR_OGF, ocf).value


@dataclass(frozen=True)
class HciCommand:
    opcode: int
    params: bytes = b""

    @property
    def op(self) -> HciOpcode:
        return HciOpcode.from_value(self.opcode)


@dataclass(frozen=True)
class HciEvent:
    event_code: int
    params: bytes = b""


HciPacket = Union[HciCommand, HciEvent]


def encode_command(cmd: HciCommand) -> bytes:
    if len(cmd.params) > MAX_PARAMS:
        raise OversizedParams(f"{len(cmd.params)} parameter bytes (max {MAX_PARAMS})")
    return struct.pack("<HB", cmd.opcode, len(cmd.params)) + bytes(cmd.params)


def encode_event(evt: HciEvent) -> bytes:
    if len(evt.params) > MAX_PARAMS:
        raise OversizedParams(f"{len(evt.params)} parameter bytes (max {MAX_PARAMS})")
    return struct.pack("<BB", evt.event_code, len(evt.params)) + bytes(evt.params)


def encode_packet(packet: HciPacket) -> bytes:
    if isinstance(packet, HciCommand):
        return encode_command(packet)
    return encode_event(packet)


def decode_packet(data: bytes, direction: Direction) -> HciPacket:
    """Decode exactly one packet; trailing bytes are a LengthMismatch."""
    data = bytes(data)
    if direction is Direction.HOST_TO_CONTROLLER:
        if len(data) < 3:
            raise Truncated(f"command header needs 3 bytes, got {len(data)}")
        opcode, plen = struct.unpack_from("<HB", data)
        body = data[3:]
        packet: HciPacket = HciCommand(opcode, body[:plen])
    else:
        if len(data) < 2:
            raise Truncated(f"event header needs 2 bytes, got {len(data)}")
        code, plen = struct.unpack_from("<BB", data)
        body = data[2:]
        packet = HciEvent(code, body[:plen])
    if len(body) < plen:
        raise Truncated(f"declared {plen} parameter bytes, {len(body)} present", len(data))
    if len(body) > plen:
        raise LengthMismatch(f"declared {plen} parameter bytes, {len(body)} present")
    return packet


# -- vendor commands -------------------------------------------------------


@dataclass(frozen=True)
class VendorOpcodeTable:
    """Broadcom vendor opcodes; defaults follow the public datasheet values."""

    write_ram: int = 0xFC4C
    read_ram: int = 0xFC4D
    launch_ram: int = 0xFC4E
    download_minidriver: int = 0xFC2E

    @classmethod
    def from_dict(cls, d: dict) -> "VendorOpcodeTable":
        def num(v):
            return int(v, 0) if isinstance(v, str) else int(v)

        return cls(**{k: num(v) for k, v in d.items()})

    def to_dict(self) -> dict:
        return {
            "write_ram": f"{self.write_ram:#06x}",
            "read_ram": f"{self.read_ram:#06x}",
            "launch_ram": f"{self.launch_ram:#06x}",
            "download_minidriver": f"{self.download_minidriver:#06x}",
        }


DEFAULT_VENDOR_OPCODES = VendorOpcodeTable()


@dataclass(frozen=True)
class ReadRam:
    address: int
    length: int


@dataclass(frozen=True)
class WriteRam:
    address: int
    data: bytes = field(default=b"")


@dataclass(frozen=True)
class LaunchRam:
    address: int


@dataclass(frozen=True)
class DownloadMinidriver:
    pass


VendorCommandKind = Union[ReadRam, WriteRam, LaunchRam, DownloadMinidriver]


def build_vendor_command(
    kind: VendorCommandKind, table: VendorOpcodeTable = DEFAULT_VENDOR_OPCODES
) -> HciCommand:
    if isinstance(kind, ReadRam):
        if not 0 < kind.length <= READ_RAM_MAX_CHUNK:
            raise ValueError(f"Read_RAM length {kind.length} outside 1..{READ_RAM_MAX_CHUNK}")
        return HciCommand(table.read_ram, struct.pack("<IB", kind.address, kind.length))
    if isinstance(kind, WriteRam):
        if len(kind.data) > WRITE_RAM_MAX_CHUNK:
            raise OversizedParams(f"Write_RAM chunk of {len(kind.data)} bytes")
        return HciCommand(table.write_ram, struct.pack("<I", kind.address) + bytes(kind.data))
    if isinstance(kind, LaunchRam):
        return HciCommand(table.launch_ram, struct.pack("<I", kind.address))
    if isinstance(kind, DownloadMinidriver):
        return HciCommand(table.download_minidriver, b"")
    raise TypeError(f"not a vendor command: {kind!r}")


def parse_vendor_command(
    cmd: HciCommand, table: VendorOpcodeTable = DEFAULT_VENDOR_OPCODES
) -> VendorCommandKind | None:
    """Inverse of :func:`build_vendor_command`; None for anything else."""
    p = cmd.params
    if cmd.opcode == table.read_ram and len(p) == 5:
        address, length = struct.unpack("<IB", p)
        return ReadRam(address, length)
    if cmd.opcode == table.write_ram and len(p) >= 4:
        return WriteRam(struct.unpack_from("<I", p)[0], bytes(p[4:]))
    if cmd.opcode == table.launch_ram and len(p) == 4:
        return LaunchRam(struct.unpack("<I", p)[0])
    if cmd.opcode == table.download_minidriver and not p:
        return DownloadMinidriver()
    return None


# -- events ----------------------------------------------------------------


@dataclass(frozen=True)
class CommandComplete:
    num_packets: int
    opcode: HciOpcode
    status: int | None
    payload: bytes


def parse_command_complete(evt: HciEvent) -> CommandComplete:
    if evt.event_code != EventCode.COMMAND_COMPLETE:
        raise WrongEventCode(f"expected Command Complete, got event {evt.event_code:#04x}")
    if len(evt.params) < 3:
        raise Truncated("Command Complete needs at least 3 parameter bytes")
    num, opcode = struct.unpack_from("<BH", evt.params)
    status = evt.params[3] if len(evt.params) > 3 else None
    return CommandComplete(num, HciOpcode.from_value(opcode), status, bytes(evt.params[4:]))


def command_complete(opcode: int, status: int = Status.SUCCESS, payload: bytes = b"") -> HciEvent:
    return HciEvent(EventCode.COMMAND_COMPLETE, struct.pack("<BHB", 1, opcode, status) + payload)


def command_status(opcode: int, status: int = Status.SUCCESS) -> HciEvent:
    return HciEvent(EventCode.COMMAND_STATUS, struct.pack("<BBH", status, 1, opcode))


def vendor_event(sub: VendorEvent, payload: bytes = b"") -> HciEvent:
    return HciEvent(EventCode.VENDOR, bytes([sub]) + payload)


def describe_packet(packet: HciPacket) -> str:
    if isinstance(packet, HciCommand):
        return f"CMD {HciOpcode.from_value(packet.opcode)} plen={len(packet.params)} {packet.params.hex()}"
    try:
        name = EventCode(packet.event_code).name
    except ValueError:
        name = f"EVT_{packet.event_code:#04x}"
    return f"EVT {name} plen={len(packet.params)} {packet.params.hex()}"
