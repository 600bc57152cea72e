"""Synthetic firmware: handler tables in ROM plus behaviour descriptors for code.

Code is never executed as machine instructions.  Each known function address
maps to a :class:`FunctionDef` whose ``steps`` list the basic blocks entered
(and helper calls made) before its behaviour runs.  The handler tables, by
contrast, are real bytes in the ROM image, so they can be read, patched and
overflowed exactly like the chip's.
"""

from __future__ import annotations

import enum
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .memory import RegionKind
from .profile import ControllerProfile, num

ENTRY_SIZE = 8
LMP_TABLE_ENTRIES = 128
BPCS_TABLE_ENTRIES = 256
BPCS_VALID = 6
THUMB_BIT = 1
# push {r4-r8, lr}; marks function entry points in the synthetic image
PROLOGUE = bytes.fromhex("2de9f041")


class Behavior(enum.Enum):
    DISPATCHER = "Dispatcher"
    SEND_PATH = "SendPath"
    BPCS_DISPATCH = "BpcsDispatch"
    RESPOND_NOT_ACCEPTED = "RespondNotAccepted"
    RESPOND_NOT_ACCEPTED_EXT = "RespondNotAcceptedExt"
    RESPOND_FEATURES = "RespondFeatures"
    RESPOND_BPCS_FEATURES = "RespondBpcsFeatures"
    RESPOND_VERSION = "RespondVersion"
    RECORD_VERSION = "RecordVersion"
    SET_AFH = "SetAfh"
    TEST_ACTIVATE = "TestActivate"
    TEST_CONTROL = "TestControl"
    ENABLE_TEST_MODE = "EnableTestMode"
    HCI_HANDLER_WRONG_ARGS = "HciHandlerWrongArgs"
    ARG_BRANCH = "ArgBranch"
    HANG = "Hang"
    BENIGN = "Benign"
    NULL_CRASH = "NullCrash"


@dataclass(frozen=True)
class Step:
    address: int
    call: bool = False


@dataclass(frozen=True)
class FunctionDef:
    address: int
    name: str
    behavior: Behavior
    steps: tuple[Step, ...] = ()
    args: dict = field(default_factory=dict, compare=False, hash=False)

    def arg_address(self, key: str) -> int:
        return num(self.args[key])

    def arg_blocks(self, key: str) -> list[int]:
        return [num(a) for a in self.args.get(key, [])]


@dataclass(frozen=True)
class HandlerEntry:
    handler_ref: int
    declared_len: int
    info: bytes = b"\x00\x00\x00"

    @property
    def code_address(self) -> int:
        return self.handler_ref & ~THUMB_BIT

    def to_bytes(self) -> bytes:
        if len(self.info) != 3:
            raise ValueError("handler info field is 3 bytes")
        return struct.pack("<IB", self.handler_ref, self.declared_len) + self.info

    @classmethod
    def from_bytes(cls, raw: bytes) -> "HandlerEntry":
        if len(raw) != ENTRY_SIZE:
            raise ValueError(f"handler entry is {ENTRY_SIZE} bytes, got {len(raw)}")
        ref, length = struct.unpack_from("<IB", raw)
        return cls(ref, length, bytes(raw[5:8]))


def _parse_step(text: str) -> Step:
    parts = text.split()
    if len(parts) == 2 and parts[0] == "call":
        return Step(num(parts[1]), True)
    if len(parts) == 1:
        return Step(num(parts[0]))
    raise ValueError(f"bad step {text!r}")


class Firmware:
    """Function catalog and table layout decoded from a profile."""

    def __init__(self, profile: ControllerProfile):
        self.profile = profile
        fw = profile.firmware
        self.functions: dict[int, FunctionDef] = {}
        for addr, spec in fw["functions"].items():
            a = num(addr)
            self.functions[a] = FunctionDef(
                a,
                spec["name"],
                Behavior(spec["behavior"]),
                tuple(_parse_step(s) for s in spec.get("steps", [])),
                spec.get("args", {}),
            )
        self.by_name = {f.name: f for f in self.functions.values()}
        self.dispatcher = num(fw["lmp_dispatcher"])
        self.send_path = num(fw["send_lmp_packet"])
        self.lmp_table_base = num(fw["lmp_table_base"])
        self.bpcs_table_base = num(fw["bpcs_table_base"])

    def function(self, address: int) -> FunctionDef | None:
        return self.functions.get(address & ~THUMB_BIT)

    def behavior_of(self, entry: HandlerEntry) -> Behavior:
        f = self.function(entry.code_address)
        return Behavior.NULL_CRASH if f is None else f.behavior

    # -- table contents ------------------------------------------------------

    def lmp_entries(self) -> list[HandlerEntry]:
        from ..lmp import load_catalog

        catalog = load_catalog()
        table = self.profile.firmware["lmp_table"]
        default = num(table["default"])
        explicit = {int(k): num(v) for k, v in table["entries"].items()}
        out = []
        for opcode in range(LMP_TABLE_ENTRIES):
            handler = explicit.get(opcode, default)
            length = catalog.expected_length(opcode) or 0
            info = bytes([1 if opcode in explicit else 0, 0, 0])
            out.append(HandlerEntry(self._ref(handler), length, info))
        return out

    def bpcs_entries(self) -> list[HandlerEntry]:
        """All 256 entries reachable by a subcommand byte: 6 valid plus the overflow."""
        fw = self.profile.firmware
        out = [HandlerEntry(self._ref(num(e["handler"])), num(e["len"])) for e in fw["bpcs_table"]]
        if len(out) != BPCS_VALID:
            raise ValueError(f"BPCS table needs {BPCS_VALID} entries")
        ov = fw["overflow"]
        fill = [num(a) for a in ov["fill"]]
        pinned = {num(k): v for k, v in ov.get("pinned", {}).items()}
        for k in range(BPCS_TABLE_ENTRIES - BPCS_VALID):
            sub = k + BPCS_VALID
            if sub in pinned:
                p = pinned[sub]
                info = bytes.fromhex(p.get("info", "010000"))
                out.append(HandlerEntry(self._ref(num(p["handler"])), num(p["len"]), info))
            else:
                length = num(ov["fill_len_base"]) + (k * num(ov["fill_len_step"])) % num(ov["fill_len_mod"])
                out.append(HandlerEntry(self._ref(fill[k % len(fill)]), length, b"\x01\x00\x00"))
        return out

    def overflow_entries(self) -> list[HandlerEntry]:
        return self.bpcs_entries()[BPCS_VALID:]

    @staticmethod
    def _ref(address: int) -> int:
        # Thumb code pointers carry bit 0; a NULL entry stays NULL
        return address | THUMB_BIT if address else 0


def _image_key(profile: ControllerProfile) -> str:
    blob = json.dumps(
        {"fw": profile.firmware, "regions": [(r.start, r.size, r.kind.value) for r in profile.regions]},
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()


_IMAGE_CACHE: dict[str, dict[int, bytes]] = {}


def build_rom(profile: ControllerProfile) -> dict[int, bytes]:
    """ROM contents keyed by region start.  Deterministic for a given profile."""
    key = _image_key(profile)
    if key not in _IMAGE_CACHE:
        _IMAGE_CACHE[key] = _build_rom(profile)
    return _IMAGE_CACHE[key]


def _build_rom(profile: ControllerProfile) -> dict[int, bytes]:
    fw = Firmware(profile)
    rom_regions = [r for r in profile.regions if r.kind is RegionKind.ROM]
    image_path = profile.firmware.get("rom_image")
    images: dict[int, bytearray] = {}
    if image_path:
        raw = Path(image_path).read_bytes()
        for r in rom_regions:
            chunk = raw[r.start : r.start + r.size] if r.start < len(raw) else b""
            images[r.start] = bytearray(chunk.ljust(r.size, b"\x00"))
    else:
        seed = num(profile.firmware.get("rom_seed", 0))
        for i, r in enumerate(rom_regions):
            rng = np.random.default_rng([seed, i])
            images[r.start] = bytearray(rng.integers(0, 256, r.size, dtype=np.uint8).tobytes())

    def put(address: int, data: bytes) -> None:
        for r in rom_regions:
            if r.start <= address and address + len(data) <= r.end:
                off = address - r.start
                images[r.start][off : off + len(data)] = data
                return
        raise ValueError(f"firmware write at {address:#x} outside ROM")

    # Word 0 is whatever sits at the reset vector.  Make sure dereferencing it
    # faults, so a NULL handler always crashes.
    first = rom_regions[0]
    word0 = struct.unpack_from("<I", images[first.start], 0)[0]
    while any(r.contains(word0) for r in profile.regions):
        word0 = (word0 * 0x9E3779B1 + 0x7F4A7C15) & 0xFFFFFFFF
    if first.start == 0:
        put(0, struct.pack("<I", word0))

    for addr in fw.functions:
        put(addr, PROLOGUE)
    put(fw.lmp_table_base, b"".join(e.to_bytes() for e in fw.lmp_entries()))
    put(fw.bpcs_table_base, b"".join(e.to_bytes() for e in fw.bpcs_entries()))
    return {start: bytes(buf) for start, buf in images.items()}

