"""Link Manager Protocol PDUs: codec, opcode catalog and text dissection.

The dissector never rejects a frame for its length.  Fuzzed traffic is
supposed to be malformed, so length problems are reported as flags.
"""

from __future__ import annotations

import functools
import json
import struct
from dataclasses import dataclass
from importlib import resources

ESCAPE_OPCODES = frozenset({124, 125, 126, 127})
MAX_STANDARD_PDU = 17

BPCS = 0
LMP_ACCEPTED = 3
LMP_NOT_ACCEPTED = 4
LMP_DETACH = 7
LMP_VERSION_REQ = 37
LMP_VERSION_RES = 38
LMP_FEATURES_REQ = 39
LMP_FEATURES_RES = 40
LMP_TEST_ACTIVATE = 56
LMP_TEST_CONTROL = 57
LMP_SET_AFH = 60

LMP_ACCEPTED_EXT = (127, 1)
LMP_NOT_ACCEPTED_EXT = (127, 2)

BPCS_VALID_SUBS = range(0, 6)

WHITENING = 0x55
BASE_FREQ_MHZ = 2402
NUM_CHANNELS = 79


class LmpError(Exception):
    pass


class OpcodeOutOfRange(LmpError):
    pass


class Empty(LmpError):
    pass


class BadLength(LmpError):
    pass


@dataclass(frozen=True)
class LmpPdu:
    tid: int
    opcode: int
    payload: bytes = b""
    ext_opcode: int | None = None

    @property
    def is_bpcs(self) -> bool:
        return self.opcode == BPCS

    @property
    def bpcs_sub(self) -> int | None:
        if self.opcode == BPCS and self.payload:
            return self.payload[0]
        return None

    @property
    def wire_length(self) -> int:
        return 1 + (self.ext_opcode is not None) + len(self.payload)


@dataclass(frozen=True)
class OpcodeInfo:
    opcode: int
    name: str
    expected_length: int | None
    ext_opcode: int | None = None


@dataclass(frozen=True)
class Dissection:
    info: OpcodeInfo
    tid: int
    wire_length: int
    length_ok: bool | None
    text: str


class OpcodeCatalog:
    def __init__(self, data: dict):
        self.version = data["version"]
        self._std = {
            e["opcode"]: OpcodeInfo(e["opcode"], e["name"], e["length"]) for e in data["opcodes"]
        }
        self._ext = {
            (e["escape"], e["ext_opcode"]): OpcodeInfo(
                e["escape"], e["name"], e["length"], e["ext_opcode"]
            )
            for e in data["extended"]
        }
        self._bpcs = {e["sub"]: e["name"] for e in data["bpcs"]}
        self._by_name = {i.name: i for i in list(self._std.values()) + list(self._ext.values())}

    def lookup(self, opcode: int, ext_opcode: int | None = None) -> OpcodeInfo:
        if opcode in ESCAPE_OPCODES:
            info = self._ext.get((opcode, ext_opcode))
            if info is None:
                return OpcodeInfo(opcode, "unknown", None, ext_opcode)
            return info
        return self._std.get(opcode, OpcodeInfo(opcode, "unknown", None))

    def by_name(self, name: str) -> OpcodeInfo:
        return self._by_name[name]

    def bpcs_name(self, sub: int) -> str | None:
        return self._bpcs.get(sub)

    def expected_length(self, opcode: int, ext_opcode: int | None = None) -> int | None:
        return self.lookup(opcode, ext_opcode).expected_length

    def __iter__(self):
        return iter(sorted(self._std.values(), key=lambda i: i.opcode))


@functools.lru_cache(maxsize=None)
def load_catalog() -> OpcodeCatalog:
    text = resources.files("bluepatch.data").joinpath("lmp_opcodes.json").read_text()
    return OpcodeCatalog(json.loads(text))


def encode_pdu(pdu: LmpPdu) -> bytes:
    if not 0 <= pdu.opcode < 128:
        raise OpcodeOutOfRange(f"LMP opcode {pdu.opcode} does not fit 7 bits")
    if pdu.tid not in (0, 1):
        raise ValueError(f"tid must be 0 or 1, got {pdu.tid}")
    head = bytes([(pdu.opcode << 1) | pdu.tid])
    if pdu.ext_opcode is not None:
        if pdu.opcode not in ESCAPE_OPCODES:
            raise OpcodeOutOfRange(f"opcode {pdu.opcode} is not an escape; no extended opcode allowed")
        head += bytes([pdu.ext_opcode])
    elif pdu.opcode in ESCAPE_OPCODES and pdu.payload:
        raise OpcodeOutOfRange(f"escape opcode {pdu.opcode} needs an extended opcode")
    return head + bytes(pdu.payload)


def decode_pdu(data: bytes) -> LmpPdu:
    data = bytes(data)
    if not data:
        raise Empty("empty LMP frame")
    opcode, tid = data[0] >> 1, data[0] & 1
    if opcode in ESCAPE_OPCODES and len(data) > 1:
        return LmpPdu(tid, opcode, data[2:], data[1])
    return LmpPdu(tid, opcode, data[1:])


def describe(pdu: LmpPdu, catalog: OpcodeCatalog | None = None) -> Dissection:
    catalog = catalog or load_catalog()
    info = catalog.lookup(pdu.opcode, pdu.ext_opcode)
    wire = pdu.wire_length
    if pdu.opcode == BPCS:
        sub = pdu.bpcs_sub
        if sub is None:
            name = "BPCS (no subcommand)"
        else:
            sub_name = catalog.bpcs_name(sub) or "out of range"
            name = f"BPCS sub {sub:#04x} ({sub_name})"
    elif pdu.opcode in ESCAPE_OPCODES and pdu.ext_opcode is not None:
        name = f"{info.name} [escape {pdu.opcode} ext {pdu.ext_opcode}]"
    else:
        name = info.name
    flags = []
    length_ok = None
    if info.expected_length is not None:
        length_ok = wire == info.expected_length
        if not length_ok:
            flags.append(f"length mismatch: expected {info.expected_length}")
    if wire > MAX_STANDARD_PDU:
        flags.append("oversized")
    text = f"{name} tid={pdu.tid} len={wire}"
    if pdu.payload:
        text += f" payload={pdu.payload.hex()}"
    if flags:
        text += " [" + "; ".join(flags) + "]"
    return Dissection(info, pdu.tid, wire, length_ok, text)


def not_accepted(tid: int, rejected_opcode: int, reason: int) -> LmpPdu:
    return LmpPdu(tid, LMP_NOT_ACCEPTED, bytes([rejected_opcode, reason]))


def accepted(tid: int, opcode: int) -> LmpPdu:
    return LmpPdu(tid, LMP_ACCEPTED, bytes([opcode]))


# -- LMP_set_AFH -----------------------------------------------------------


@dataclass(frozen=True)
class AfhConfig:
    instant: int = 0
    mode: int = 0
    channel_map: bytes = bytes(10)

    @property
    def enabled(self) -> bool:
        return self.mode == 1

    def channels(self) -> list[int]:
        return [
            ch for ch in range(NUM_CHANNELS) if self.channel_map[ch // 8] >> (ch % 8) & 1
        ]

    @classmethod
    def from_channels(cls, instant: int, mode: int, channels) -> "AfhConfig":
        m = bytearray(10)
        for ch in channels:
            if not 0 <= ch < NUM_CHANNELS:
                raise ValueError(f"channel {ch} outside 0..78")
            m[ch // 8] |= 1 << (ch % 8)
        return cls(instant, mode, bytes(m))


def encode_set_afh(cfg: AfhConfig) -> bytes:
    if len(cfg.channel_map) != 10:
        raise BadLength("AFH channel map is 10 bytes")
    if cfg.channel_map[9] & 0x80:
        raise ValueError("channel map bit 79 is padding and must be zero")
    return struct.pack("<IB", cfg.instant, cfg.mode) + cfg.channel_map


def parse_set_afh(payload: bytes) -> AfhConfig:
    if len(payload) != 15:
        raise BadLength(f"LMP_set_AFH payload is 15 bytes, got {len(payload)}")
    instant, mode = struct.unpack_from("<IB", payload)
    return AfhConfig(instant, mode, bytes(payload[5:15]))


# -- LMP_test_control ------------------------------------------------------


@dataclass(frozen=True)
class TestControlParams:
    __test__ = False  # keep pytest from collecting this

    scenario: int = 0
    hopping_mode: int = 0
    tx_freq_index: int = 0
    rx_freq_index: int = 0
    power_mode: int = 0
    poll_period: int = 0
    packet_type: int = 0
    payload_length: int = 0

    @property
    def single_frequency(self) -> bool:
        return self.hopping_mode == 0

    @property
    def tx_frequency_mhz(self) -> int | None:
        return freq_mhz(self.tx_freq_index)

    @property
    def rx_frequency_mhz(self) -> int | None:
        return freq_mhz(self.rx_freq_index)


def freq_mhz(index: int) -> int | None:
    if 0 <= index < NUM_CHANNELS:
        return BASE_FREQ_MHZ + index
    return None


def decode_test_control(payload: bytes) -> TestControlParams:
    if len(payload) != 9:
        raise BadLength(f"LMP_test_control payload is 9 bytes, got {len(payload)}")
    plain = bytes(b ^ WHITENING for b in payload)
    return TestControlParams(*struct.unpack("<7BH", plain))


def encode_test_control(params: TestControlParams) -> bytes:
    plain = struct.pack(
        "<7BH",
        params.scenario,
        params.hopping_mode,
        params.tx_freq_index,
        params.rx_freq_index,
        params.power_mode,
        params.poll_period,
        params.packet_type,
        params.payload_length,
    )
    return bytes(b ^ WHITENING for b in plain)
