"""Deterministic Broadcom-style controller.

All chip state that the firmware itself would keep in memory lives in the
simulated RAM: the connection list, test-mode configuration, AFH state,
Patchram tables and hook descriptors.  That keeps snapshots honest: a dump
of the writable regions plus the register file is enough to rebuild the
controller elsewhere, which is what the tracer does.
"""

from __future__ import annotations

import enum
import hashlib
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .. import hci, lmp
from ..capture import LmpCaptureRecord, LmpDirection
from ..hcd import PatchError, PatchramEntry, decode_patchram_block, patchram_entries
from ..hci import (
    HciCommand,
    HciEvent,
    LaunchRam,
    ReadRam,
    Status,
    VendorEvent,
    WriteRam,
    DownloadMinidriver,
    command_complete,
    command_status,
    parse_vendor_command,
    vendor_event,
)
from .firmware import Behavior, Firmware, FunctionDef, HandlerEntry, ENTRY_SIZE, build_rom
from .memory import Memory, Patchram, RegionKind, SlotOutOfRange, Unmapped
from .profile import ControllerProfile, num

DEFAULT_STEP_BUDGET = 10_000
FAILED_CONNECTION_LIFETIME = 30.0
TEST_PACKETS_PER_SECOND = 800

REGISTER_NAMES = ("pc", "lr", "sp", "cpsr") + tuple(f"r{i}" for i in range(13))

STUB_MAGIC = 0x4C504D53  # "SMPL" little-endian
STUB_HEADER = 16
STUB_SEND = 1
STUB_SEND_RAW = 2

HOOK_TAG = 0xEB
HOOK_HEADER = 12
MAX_HOOK_CHAIN = 64


class HookKind(enum.IntEnum):
    LMP_RX_MONITOR = 1
    LMP_TX_MONITOR = 2
    TRACEPOINT = 3
    MAC_FILTER = 4


class CrashReason(enum.IntEnum):
    INVALID_MEMORY = 1
    WATCHDOG = 2
    UNMAPPED_HOST_ACCESS = 3


# LMP error codes used in LMP_not_accepted
ERR_UNKNOWN_LMP_PDU = 0x19
ERR_INVALID_LMP_PARAMETERS = 0x1E
ERR_PDU_NOT_ALLOWED = 0x24
ERR_CONNECTION_TIMEOUT = 0x08
ERR_CONNECTION_LIMIT = 0x09

CONN_ENTRY_SIZE = 24
TEST_CFG_ENABLED, TEST_CFG_ACTIVATED, TEST_CFG_RUNNING = 0, 1, 2
TEST_CFG_PARAMS = 4
TEST_CFG_PACKETS = 16
AFH_STATE_OFFSET = 0x40


class ControllerError(Exception):
    pass


class NoSuchConnection(ControllerError):
    pass


class CommandDisallowedInMode(ControllerError):
    pass


class Mode(enum.Enum):
    NORMAL = "Normal"
    DOWNLOAD = "DownloadMode"
    CRASHED = "Crashed"
    TEST_ARMED = "TestModeArmed"
    TEST_RUNNING = "TestModeRunning"


class ConnState(enum.IntEnum):
    INITIATING = 1
    ESTABLISHED = 2
    FAILED = 3


class Role(enum.IntEnum):
    MASTER = 0
    SLAVE = 1


class TxResult(enum.Enum):
    SENT = "Sent"
    SILENTLY_DROPPED = "SilentlyDropped"


class TraceKind(enum.Enum):
    BRANCH_ENTER = "BranchEnter"
    REGISTER_DUMP = "RegisterDump"
    INVALID_MEMORY = "InvalidMemory"
    CRASH = "Crash"


@dataclass(frozen=True)
class TraceEvent:
    kind: TraceKind
    address: int
    detail: object = None

    def __str__(self) -> str:
        if self.kind is TraceKind.BRANCH_ENTER:
            return f"{self.address:#07x}"
        if self.kind is TraceKind.INVALID_MEMORY:
            return f"invalid memory {self.address:#010x}"
        if self.kind is TraceKind.CRASH:
            return f"crash at {self.address:#07x} ({self.detail})"
        return f"register dump at {self.address:#07x}"


@dataclass
class ConnectionEntry:
    peer_mac: bytes
    handle: int
    state: ConnState
    created_at: float
    role: Role
    peer_version: tuple[int, int, int] | None = None  # (version, company, subversion)

    def to_bytes(self) -> bytes:
        v, company, sub = self.peer_version or (0, 0, 0)
        return struct.pack(
            "<6sHBBBBHHQ",
            self.peer_mac,
            self.handle,
            self.state,
            self.role,
            v,
            1 if self.peer_version else 0,
            sub,
            company,
            int(round(self.created_at * 1e6)),
        )

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ConnectionEntry | None":
        mac, handle, state, role, v, flags, sub, company, created = struct.unpack("<6sHBBBBHHQ", raw)
        if state == 0:
            return None
        version = (v, company, sub) if flags & 1 else None
        return cls(mac, handle, ConnState(state), created / 1e6, Role(role), version)


@dataclass
class DispatchResult:
    responses: list[lmp.LmpPdu] = field(default_factory=list)
    trace: list[TraceEvent] = field(default_factory=list)
    state_changes: list[str] = field(default_factory=list)
    crashed: bool = False
    budget_exceeded: bool = False
    rejected: bool = False


@dataclass
class ControllerSnapshot:
    profile: dict
    memory: dict[int, bytes]
    registers: dict[str, int]
    base_mode: str = Mode.NORMAL.value
    mac: bytes = bytes(6)


class _Crash(Exception):
    def __init__(self, fault: int, reason: CrashReason):
        self.fault = fault
        self.reason = reason


class _Budget(Exception):
    pass


class _Run:
    __slots__ = ("conn", "budget", "steps", "result", "rx", "tx")

    def __init__(self, conn: ConnectionEntry | None, budget: int):
        self.conn = conn
        self.budget = budget
        self.steps = 0
        self.result = DispatchResult()
        self.rx: bytes | None = None
        self.tx: bytes | None = None


def format_mac(mac: bytes) -> str:
    return ":".join(f"{b:02x}" for b in mac)


def pack_registers(regs: dict[str, int]) -> bytes:
    return struct.pack("<17I", *(regs.get(n, 0) & 0xFFFFFFFF for n in REGISTER_NAMES))


def unpack_registers(raw: bytes) -> dict[str, int]:
    return dict(zip(REGISTER_NAMES, struct.unpack("<17I", raw[:68])))


class Air:
    """Shared medium: the sim clock, the MAC directory and the lock.

    Every controller attached to one Air shares its re-entrant lock, so a
    transmission that ripples from one chip into another and back never
    deadlocks and the whole world stays a single serialized state machine.
    """

    MAX_DEPTH = 32

    def __init__(self):
        self.lock = threading.RLock()
        self.now = 0.0
        self.controllers: dict[bytes, Controller] = {}
        self.links: dict[tuple[int, int], tuple[Controller, int]] = {}
        self._depth = 0

    def attach(self, ctrl: "Controller") -> None:
        with self.lock:
            if ctrl.mac in self.controllers and self.controllers[ctrl.mac] is not ctrl:
                raise ControllerError(f"MAC {format_mac(ctrl.mac)} already on the air")
            self.controllers[ctrl.mac] = ctrl

    def find(self, mac: bytes) -> "Controller | None":
        return self.controllers.get(bytes(mac))

    def link(self, a: "Controller", ha: int, b: "Controller", hb: int) -> None:
        self.links[(id(a), ha)] = (b, hb)
        self.links[(id(b), hb)] = (a, ha)

    def unlink(self, ctrl: "Controller", handle: int, notify: bool = True) -> None:
        peer = self.links.pop((id(ctrl), handle), None)
        if peer is None:
            return
        other, other_handle = peer
        self.links.pop((id(other), other_handle), None)
        if notify:
            other._link_lost(other_handle)

    def deliver(self, src: "Controller", handle: int, raw: bytes) -> bool:
        peer = self.links.get((id(src), handle))
        if peer is None or self._depth >= self.MAX_DEPTH or not raw:
            return False
        self._depth += 1
        try:
            peer[0].receive_lmp(peer[1], raw)
        finally:
            self._depth -= 1
        return True

    def advance(self, dt: float) -> dict[bytes, list[ConnectionEntry]]:
        if dt < 0:
            raise ValueError("time only moves forward")
        with self.lock:
            self.now += dt
            return {mac: c._on_tick(dt) for mac, c in list(self.controllers.items())}


class Controller:
    def __init__(
        self,
        profile: ControllerProfile,
        mac: bytes | str = bytes(6),
        air: Air | None = None,
        step_budget: int = DEFAULT_STEP_BUDGET,
    ):
        if isinstance(mac, str):
            mac = bytes.fromhex(mac.replace(":", ""))
        if len(mac) != 6:
            raise ValueError("MAC address is 6 bytes")
        self.profile = profile
        self.mac = bytes(mac)
        self.firmware = Firmware(profile)
        self.catalog = lmp.load_catalog()
        self.memory = Memory(profile.regions, build_rom(profile))
        self.patchram = Patchram(self.memory, profile.patchram_layout)
        self.step_budget = step_budget
        self.listeners: list[Callable[[HciEvent], None]] = []
        self.connections: dict[int, ConnectionEntry] = {}
        self.registers: dict[str, int] = {}
        self.counters = {"dispatched": 0, "sent": 0, "dropped": 0}
        self._collect: list[HciEvent] | None = None
        self._tx_queue: list[tuple[int, bytes]] = []
        self._base_mode = Mode.NORMAL
        self._next_handle = 0x000C
        self.air = air if air is not None else Air()
        self.air.attach(self)
        self.reset()

    @property
    def lock(self):
        return self.air.lock

    # -- state ---------------------------------------------------------------

    @property
    def mode(self) -> Mode:
        if self._base_mode is not Mode.NORMAL:
            return self._base_mode
        cfg = self.memory.read_raw(self.profile.layout.test_config, 3)
        if cfg[TEST_CFG_RUNNING]:
            return Mode.TEST_RUNNING
        if cfg[TEST_CFG_ENABLED]:
            return Mode.TEST_ARMED
        return Mode.NORMAL

    @property
    def afh(self) -> lmp.AfhConfig:
        raw = self.memory.read_raw(self.profile.layout.test_config + AFH_STATE_OFFSET, 15)
        return lmp.parse_set_afh(raw)

    @property
    def test_params(self) -> lmp.TestControlParams | None:
        if self.mode is not Mode.TEST_RUNNING:
            return None
        plain = self.memory.read_raw(self.profile.layout.test_config + TEST_CFG_PARAMS, 9)
        return lmp.decode_test_control(bytes(b ^ lmp.WHITENING for b in plain))

    @property
    def test_packets(self) -> int:
        return self.memory.read_u32(self.profile.layout.test_config + TEST_CFG_PACKETS)

    def read_view(self, address: int, length: int) -> bytes:
        return self.patchram.read_view(address, length)

    def handler_entry(self, table_base: int, index: int) -> HandlerEntry:
        return HandlerEntry.from_bytes(self.read_view(table_base + ENTRY_SIZE * index, ENTRY_SIZE))

    def state_hash(self) -> str:
        h = hashlib.sha256()
        for start, data in sorted(self.memory.dump().items()):
            h.update(start.to_bytes(4, "little"))
            h.update(data)
        h.update(self._base_mode.value.encode())
        h.update(pack_registers(self.registers))
        return h.hexdigest()

    # -- lifecycle -----------------------------------------------------------

    def reset(self) -> None:
        with self.lock:
            for handle in list(self.connections):
                self.air.unlink(self, handle)
            self.connections.clear()
            self._tx_queue.clear()
            self.memory.clear_writable()
            for addr, data in self.profile.layout.initial_ram.items():
                self.memory.write(addr, data)
            self.registers = {n: 0 for n in REGISTER_NAMES}
            self.registers.update(self.profile.layout.initial_registers)
            self._base_mode = Mode.NORMAL
            self._next_handle = 0x000C

    def tick(self, dt: float) -> list[ConnectionEntry]:
        """Advance the shared sim clock; returns this chip's expired entries."""
        return self.air.advance(dt).get(self.mac, [])

    def _on_tick(self, dt: float) -> list[ConnectionEntry]:
        expired = []
        for handle, conn in list(self.connections.items()):
            if conn.state is ConnState.FAILED and self.air.now - conn.created_at >= FAILED_CONNECTION_LIFETIME:
                expired.append(self.connections.pop(handle))
        if expired:
            self._sync_connections()
        if self.mode is Mode.TEST_RUNNING:
            at = self.profile.layout.test_config + TEST_CFG_PACKETS
            self.memory.write_u32(at, self.memory.read_u32(at) + int(dt * TEST_PACKETS_PER_SECOND))
        return expired

    def snapshot(self) -> ControllerSnapshot:
        with self.lock:
            return ControllerSnapshot(
                self.profile.to_dict(),
                self.memory.dump(),
                dict(self.registers),
                self._base_mode.value,
                self.mac,
            )

    @classmethod
    def from_snapshot(cls, snap: ControllerSnapshot, profile: ControllerProfile | None = None,
                      step_budget: int = DEFAULT_STEP_BUDGET) -> "Controller":
        """Rebuild an isolated controller (its own Air, no peers) from a snapshot."""
        profile = profile or ControllerProfile.from_dict(snap.profile)
        ctrl = cls(profile, snap.mac, Air(), step_budget)
        ctrl.memory.load(snap.memory)
        ctrl.registers = {n: 0 for n in REGISTER_NAMES}
        ctrl.registers.update(snap.registers)
        ctrl._base_mode = Mode(snap.base_mode)
        ctrl._load_connections()
        return ctrl

    # -- events --------------------------------------------------------------

    def _emit(self, evt: HciEvent) -> None:
        if self._collect is not None:
            self._collect.append(evt)
        for listener in list(self.listeners):
            listener(evt)

    # -- HCI -----------------------------------------------------------------

    def handle_hci_command(self, cmd: HciCommand) -> list[HciEvent]:
        with self.lock:
            outer = self._collect
            self._collect = []
            try:
                self._handle(cmd)
                self._flush()
                return self._collect
            finally:
                if outer is not None:
                    outer.extend(self._collect)
                self._collect = outer

    def _handle(self, cmd: HciCommand) -> None:
        table = self.profile.vendor_opcodes
        kind = parse_vendor_command(cmd, table)
        op = cmd.opcode
        if self._base_mode is Mode.CRASHED:
            if op == hci.HCI_RESET:
                self.reset()
                self._emit(command_complete(op))
            return
        if self._base_mode is Mode.DOWNLOAD and not isinstance(kind, (ReadRam, WriteRam, LaunchRam)):
            self._emit(command_complete(op, Status.COMMAND_DISALLOWED))
            return
        if isinstance(kind, ReadRam):
            if not 0 < kind.length <= hci.READ_RAM_MAX_CHUNK:
                self._emit(command_complete(op, Status.INVALID_PARAMETERS))
                return
            try:
                data = self.read_view(kind.address, kind.length)
            except Unmapped:
                self._crash(kind.address, CrashReason.UNMAPPED_HOST_ACCESS)
                return
            self._emit(command_complete(op, Status.SUCCESS, data))
        elif isinstance(kind, WriteRam):
            try:
                self.memory.write(kind.address, kind.data)
            except Unmapped:
                self._crash(kind.address, CrashReason.UNMAPPED_HOST_ACCESS)
                return
            self._emit(command_complete(op))
        elif isinstance(kind, LaunchRam):
            self._launch(op, kind.address)
        elif isinstance(kind, DownloadMinidriver):
            self._base_mode = Mode.DOWNLOAD
            self._emit(command_complete(op))
        elif op == hci.HCI_RESET:
            self.reset()
            self._emit(command_complete(op))
        elif op == hci.READ_LOCAL_VERSION:
            p = self.profile
            payload = struct.pack(
                "<BHBHH", p.hci_version, p.hci_revision, p.lmp_version, p.company_id, p.lmp_subversion
            )
            self._emit(command_complete(op, Status.SUCCESS, payload))
        elif op == hci.ENABLE_DEVICE_UNDER_TEST_MODE:
            f = self.firmware.by_name.get("hci_EnableDeviceUnderTestMode")
            if f is not None:
                self._host_call(f.address)
            if self._base_mode is not Mode.CRASHED:
                self._emit(command_complete(op))
        elif op == hci.CREATE_CONNECTION:
            if len(cmd.params) < 6:
                self._emit(command_status(op, Status.INVALID_PARAMETERS))
                return
            self._emit(command_status(op))
            mac = bytes(reversed(cmd.params[:6]))
            conn, status = self._create_connection(mac)
            handle = conn.handle if conn else 0
            self._emit(connection_complete(status, handle, mac))
        else:
            self._emit(command_complete(op, Status.UNKNOWN_COMMAND))

    def _launch(self, op: int, address: int) -> None:
        if address == hci.LAUNCH_RAM_REBOOT:
            status = self._apply_staged()
            self._base_mode = Mode.NORMAL
            for handle in list(self.connections):
                self.air.unlink(self, handle)
            self.connections.clear()
            self._sync_connections()
            self._emit(command_complete(op, status))
            return
        region = self.memory.region_at(address)
        if region is not None and region.kind is RegionKind.RAM and self.memory.is_mapped(address, STUB_HEADER):
            magic, action, handle, length = struct.unpack("<4I", self.memory.read_raw(address, STUB_HEADER))
            if magic == STUB_MAGIC and action in (STUB_SEND, STUB_SEND_RAW):
                conn = self.connections.get(handle)
                if conn is None:
                    self._emit(command_complete(op, Status.UNKNOWN_CONNECTION))
                    return
                try:
                    payload = self.memory.read_raw(address + STUB_HEADER, length)
                except Unmapped:
                    self._crash(address, CrashReason.INVALID_MEMORY)
                    return
                run = _Run(conn, self.step_budget)
                result = self._guarded(run, lambda: self._send(run, conn, payload, action == STUB_SEND_RAW, True))
                if result is None:
                    return
                code = 1 if result is TxResult.SENT else 2
                self._emit(command_complete(op, Status.SUCCESS, bytes([code])))
                return
        self._host_call(address)
        if self._base_mode is not Mode.CRASHED:
            self._emit(command_complete(op))

    def _host_call(self, address: int) -> DispatchResult:
        run = _Run(None, self.step_budget)
        self._guarded(run, lambda: self._call(run, address))
        return run.result

    def _apply_staged(self) -> int:
        lay = self.profile.layout
        block = self.memory.read_raw(lay.patchram_staging, lay.patchram_staging_size)
        status = Status.SUCCESS
        try:
            entries = patchram_entries(decode_patchram_block(block, stop_at_end_marker=True))
        except (PatchError, hci.HciError):
            entries = []
            status = Status.INVALID_PARAMETERS
        for e in entries:
            try:
                self.patchram.apply(e.slot, e.address, e.value)
            except SlotOutOfRange:
                status = Status.INVALID_PARAMETERS
        self.memory.write(lay.patchram_staging, bytes(lay.patchram_staging_size))
        return status

    def apply_patchram(self, entries: Iterable[PatchramEntry]) -> None:
        with self.lock:
            entries = list(entries)
            for e in entries:
                if not 0 <= e.slot < self.profile.patchram_slots:
                    raise SlotOutOfRange(f"slot {e.slot} outside 0..{self.profile.patchram_slots - 1}")
            for e in entries:
                self.patchram.apply(e.slot, e.address, e.value)

    # -- connections ---------------------------------------------------------

    def _conn_entry_address(self, conn: ConnectionEntry) -> int:
        ordered = sorted(self.connections)
        idx = ordered.index(conn.handle) if conn.handle in self.connections else 0
        return self.profile.layout.connection_table + CONN_ENTRY_SIZE * idx

    def _sync_connections(self) -> None:
        lay = self.profile.layout
        raw = bytearray(CONN_ENTRY_SIZE * lay.connection_slots)
        for i, handle in enumerate(sorted(self.connections)[: lay.connection_slots]):
            raw[i * CONN_ENTRY_SIZE : (i + 1) * CONN_ENTRY_SIZE] = self.connections[handle].to_bytes()
        self.memory.write(lay.connection_table, bytes(raw))

    def _load_connections(self) -> None:
        lay = self.profile.layout
        raw = self.memory.read_raw(lay.connection_table, CONN_ENTRY_SIZE * lay.connection_slots)
        self.connections.clear()
        for i in range(lay.connection_slots):
            entry = ConnectionEntry.from_bytes(raw[i * CONN_ENTRY_SIZE : (i + 1) * CONN_ENTRY_SIZE])
            if entry is not None:
                self.connections[entry.handle] = entry
                self._next_handle = max(self._next_handle, entry.handle + 1)

    def _new_handle(self) -> int:
        h = self._next_handle
        self._next_handle += 1
        return h

    def _create_connection(self, mac: bytes) -> tuple[ConnectionEntry | None, int]:
        if len(self.connections) >= self.profile.layout.connection_slots:
            return None, ERR_CONNECTION_LIMIT
        conn = ConnectionEntry(mac, self._new_handle(), ConnState.INITIATING, self.air.now, Role.MASTER)
        self.connections[conn.handle] = conn
        peer = self.air.find(mac)
        peer_handle = None
        if peer is not None and peer is not self:
            peer_handle = peer._accept_connection(self.mac)
        if peer_handle is None:
            conn.state = ConnState.FAILED
            status = Status.PAGE_TIMEOUT
        else:
            conn.state = ConnState.ESTABLISHED
            self.air.link(self, conn.handle, peer, peer_handle)
            status = Status.SUCCESS
        self._sync_connections()
        return conn, status

    def _accept_connection(self, mac: bytes) -> int | None:
        if self._base_mode is not Mode.NORMAL:
            return None
        if len(self.connections) >= self.profile.layout.connection_slots:
            return None
        conn = ConnectionEntry(mac, self._new_handle(), ConnState.ESTABLISHED, self.air.now, Role.SLAVE)
        self.connections[conn.handle] = conn
        self._sync_connections()
        self._emit(connection_complete(Status.SUCCESS, conn.handle, mac))
        return conn.handle

    def _link_lost(self, handle: int) -> None:
        if self.connections.pop(handle, None) is None:
            return
        if self._base_mode is not Mode.CRASHED:
            self._sync_connections()
            self._emit(disconnection_complete(handle, ERR_CONNECTION_TIMEOUT))

    def connection(self, handle: int) -> ConnectionEntry:
        conn = self.connections.get(handle)
        if conn is None:
            raise NoSuchConnection(f"no connection with handle {handle:#06x}")
        return conn

    # -- LMP -----------------------------------------------------------------

    def receive_lmp(self, handle: int, raw: bytes) -> None:
        with self.lock:
            conn = self.connections.get(handle)
            if conn is None or self._base_mode in (Mode.CRASHED, Mode.DOWNLOAD):
                return
            self.dispatch_lmp(conn, raw)

    def dispatch_lmp(self, conn: ConnectionEntry, pdu: lmp.LmpPdu | bytes, budget: int | None = None) -> DispatchResult:
        raw = lmp.encode_pdu(pdu) if isinstance(pdu, lmp.LmpPdu) else bytes(pdu)
        with self.lock:
            if conn.handle not in self.connections:
                raise NoSuchConnection(f"no connection with handle {conn.handle:#06x}")
            run = _Run(self.connections[conn.handle], budget or self.step_budget)
            if self._base_mode in (Mode.CRASHED, Mode.DOWNLOAD) or not raw:
                return run.result
            self.counters["dispatched"] += 1
            lay = self.profile.layout
            self.memory.write(lay.lm_cur_cmd, raw[: lay.lm_cur_cmd_size].ljust(lay.lm_cur_cmd_size, b"\x00"))
            run.rx = raw
            # entered from the link manager task loop: its lr and sp
            init = lay.initial_registers
            self.registers.update(
                lr=init.get("lr", 0),
                sp=init.get("sp", 0),
                pc=self.firmware.dispatcher,
                r0=lay.lm_cur_cmd,
                r1=self._conn_entry_address(run.conn),
                r2=raw[0] >> 1,
                r3=len(raw),
            )
            self._guarded(run, lambda: self._call(run, self.firmware.dispatcher))
            self._flush()
            return run.result

    def send_lmp_tx(self, conn: ConnectionEntry, pdu: lmp.LmpPdu | bytes, fuzz: bool = False) -> TxResult:
        raw = lmp.encode_pdu(pdu) if isinstance(pdu, lmp.LmpPdu) else bytes(pdu)
        with self.lock:
            if conn.handle not in self.connections:
                raise NoSuchConnection(f"no connection with handle {conn.handle:#06x}")
            if self._base_mode in (Mode.CRASHED, Mode.DOWNLOAD):
                return TxResult.SILENTLY_DROPPED
            run = _Run(self.connections[conn.handle], self.step_budget)
            result = self._guarded(run, lambda: self._send(run, run.conn, raw, fuzz, True))
            self._flush()
            return result or TxResult.SILENTLY_DROPPED

    def _flush(self) -> None:
        while self._tx_queue:
            handle, raw = self._tx_queue.pop(0)
            self.air.deliver(self, handle, raw)

    # -- execution engine ----------------------------------------------------

    def _guarded(self, run: _Run, body: Callable):
        try:
            return body()
        except _Crash as c:
            self._crash(c.fault, c.reason, run)
        except _Budget:
            run.result.budget_exceeded = True
            self._crash(self.registers.get("pc", 0), CrashReason.WATCHDOG, run)
        return None

    def _exec(self, run: _Run, address: int) -> None:
        run.steps += 1
        if run.steps > run.budget:
            raise _Budget()
        self.registers["pc"] = address
        run.result.trace.append(TraceEvent(TraceKind.BRANCH_ENTER, address))
        if address % 4 == 0:
            word = self.patchram.word_at(address)
            if word is not None and word >> 24 == HOOK_TAG:
                self._run_hooks(run, address, word & 0x00FFFFFF)

    def _call(self, run: _Run, address: int) -> None:
        caller = self.registers.get("pc", 0)
        target = address & ~1
        f = self.firmware.function(target)
        self._exec(run, target)
        self.registers["lr"] = caller | 1
        if f is None:
            self._fault(run, target)
        for step in f.steps:
            if step.call:
                self._call(run, step.address)
            else:
                self._exec(run, step.address)
        self._behave(run, f)

    def _fault(self, run: _Run, address: int) -> None:
        """Executing something that is not code: the first load faults."""
        try:
            fault = struct.unpack("<I", self.read_view(address & ~3, 4))[0]
        except Unmapped:
            fault = address
        run.result.trace.append(TraceEvent(TraceKind.INVALID_MEMORY, fault, {"pc": address}))
        raise _Crash(fault, CrashReason.INVALID_MEMORY)

    def _cur(self) -> bytes:
        lay = self.profile.layout
        return self.memory.read_raw(lay.lm_cur_cmd, lay.lm_cur_cmd_size)

    def _respond(self, run: _Run, pdu: lmp.LmpPdu) -> None:
        run.result.responses.append(pdu)
        if run.conn is not None:
            self._send(run, run.conn, lmp.encode_pdu(pdu), False, False)

    def _behave(self, run: _Run, f: FunctionDef) -> None:
        b = f.behavior
        cur = self._cur()
        tid, opcode = cur[0] & 1, cur[0] >> 1
        lay = self.profile.layout
        if b is Behavior.DISPATCHER:
            if run.result.rejected:
                self._respond(run, lmp.not_accepted(tid, opcode, ERR_PDU_NOT_ALLOWED))
                return
            entry = self.handler_entry(self.firmware.lmp_table_base, opcode)
            self._call(run, entry.handler_ref)
        elif b is Behavior.BPCS_DISPATCH:
            sub = cur[1]
            if sub >= 6 and not self.profile.vulnerable_bpcs:
                self._exec(run, f.arg_address("reject"))
                self._respond(run, lmp.not_accepted(tid, lmp.BPCS, ERR_INVALID_LMP_PARAMETERS))
                return
            entry = self.handler_entry(self.firmware.bpcs_table_base, sub)
            self._call(run, entry.handler_ref)
        elif b is Behavior.RESPOND_NOT_ACCEPTED:
            self._respond(run, lmp.not_accepted(tid, opcode, ERR_UNKNOWN_LMP_PDU))
        elif b is Behavior.RESPOND_NOT_ACCEPTED_EXT:
            self._respond(
                run,
                lmp.LmpPdu(tid, 127, bytes([opcode, cur[1], ERR_UNKNOWN_LMP_PDU]), lmp.LMP_NOT_ACCEPTED_EXT[1]),
            )
        elif b is Behavior.RESPOND_FEATURES:
            self._respond(run, lmp.LmpPdu(tid, lmp.LMP_FEATURES_RES, self.profile.features))
        elif b is Behavior.RESPOND_BPCS_FEATURES:
            self._respond(run, lmp.LmpPdu(tid, lmp.BPCS, b"\x01" + self.profile.features))
        elif b is Behavior.RESPOND_VERSION:
            p = self.profile
            payload = struct.pack("<BHH", p.lmp_version, p.company_id, p.lmp_subversion)
            self._respond(run, lmp.LmpPdu(tid, lmp.LMP_VERSION_RES, payload))
        elif b is Behavior.RECORD_VERSION:
            if run.conn is not None:
                v, company, sub = struct.unpack_from("<BHH", cur, 1)
                run.conn.peer_version = (v, company, sub)
                self._sync_connections()
                run.result.state_changes.append("peer_version")
        elif b is Behavior.SET_AFH:
            self.memory.write(lay.test_config + AFH_STATE_OFFSET, cur[1:16])
            run.result.state_changes.append("afh")
        elif b is Behavior.TEST_ACTIVATE:
            if self.mode in (Mode.TEST_ARMED, Mode.TEST_RUNNING):
                self.memory.write(lay.test_config + TEST_CFG_ACTIVATED, b"\x01")
                run.result.state_changes.append("test_activated")
                self._respond(run, lmp.accepted(tid, lmp.LMP_TEST_ACTIVATE))
            else:
                self._respond(run, lmp.not_accepted(tid, lmp.LMP_TEST_ACTIVATE, ERR_PDU_NOT_ALLOWED))
        elif b is Behavior.TEST_CONTROL:
            activated = self.memory.read_raw(lay.test_config + TEST_CFG_ACTIVATED, 1)[0]
            if activated:
                plain = bytes(x ^ lmp.WHITENING for x in cur[1:10])
                self.memory.write(lay.test_config + TEST_CFG_PARAMS, plain)
                self.memory.write(lay.test_config + TEST_CFG_RUNNING, b"\x01")
                run.result.state_changes.append("test_running")
                self._respond(run, lmp.accepted(tid, lmp.LMP_TEST_CONTROL))
            else:
                self._respond(run, lmp.not_accepted(tid, lmp.LMP_TEST_CONTROL, ERR_PDU_NOT_ALLOWED))
        elif b is Behavior.ENABLE_TEST_MODE:
            self.memory.write(lay.test_config + TEST_CFG_ENABLED, b"\x01")
            run.result.state_changes.append("test_mode_armed")
        elif b is Behavior.HCI_HANDLER_WRONG_ARGS:
            # an HCI handler fed an LMP buffer: treats payload bytes as a code pointer
            target = struct.unpack_from("<I", cur, 2)[0]
            self._call(run, target)
        elif b is Behavior.ARG_BRANCH:
            arg = cur[int(f.args.get("byte", 2))]
            mask = num(f.args.get("mask", 1))
            for block in f.arg_blocks("taken" if arg & mask else "not_taken"):
                self._exec(run, block)
        elif b is Behavior.HANG:
            loop = f.arg_address("loop")
            while True:
                self._exec(run, loop)
        # BENIGN and SEND_PATH have no side effects of their own

    def _send(self, run: _Run, conn: ConnectionEntry, raw: bytes, fuzz: bool, stamp: bool) -> TxResult:
        if stamp and not fuzz and raw:
            raw = bytes([(raw[0] & 0xFE) | int(conn.role)]) + raw[1:]
        run.tx = raw
        send = self.firmware.function(self.firmware.send_path)
        self._exec(run, send.address)
        run.tx = None
        for step in send.steps:
            self._exec(run, step.address)
        if not fuzz:
            self._exec(run, send.arg_address("length_check"))
            if not self._tx_allowed(raw):
                self.counters["dropped"] += 1
                return TxResult.SILENTLY_DROPPED
        self.counters["sent"] += 1
        self._tx_queue.append((conn.handle, raw))
        return TxResult.SENT

    def _tx_allowed(self, raw: bytes) -> bool:
        if not raw or len(raw) > self.profile.layout.lmp_tx_buffer_size:
            return False
        opcode = raw[0] >> 1
        if opcode == lmp.BPCS:
            if len(raw) < 2:
                return False
            expected = self.handler_entry(self.firmware.bpcs_table_base, raw[1]).declared_len
        elif opcode in lmp.ESCAPE_OPCODES:
            expected = self.catalog.expected_length(opcode, raw[1] if len(raw) > 1 else None)
        else:
            expected = self.catalog.expected_length(opcode)
        return expected is not None and len(raw) == expected

    # -- hooks ---------------------------------------------------------------

    def _run_hooks(self, run: _Run, address: int, ptr: int) -> None:
        seen = 0
        while ptr and seen < MAX_HOOK_CHAIN:
            seen += 1
            try:
                kind, active, _, nxt, args_len = struct.unpack("<BBHII", self.memory.read_raw(ptr, HOOK_HEADER))
                args = self.memory.read_raw(ptr + HOOK_HEADER, args_len)
            except Unmapped:
                run.result.trace.append(TraceEvent(TraceKind.INVALID_MEMORY, ptr, {"pc": address}))
                raise _Crash(ptr, CrashReason.INVALID_MEMORY)
            if active:
                if kind == HookKind.LMP_RX_MONITOR and run.rx is not None and run.conn is not None:
                    rec = LmpCaptureRecord(LmpDirection.RX, run.conn.handle, run.rx)
                    self._emit(vendor_event(VendorEvent.LMP_MONITOR, rec.to_bytes()[:254]))
                elif kind == HookKind.LMP_TX_MONITOR and run.tx is not None and run.conn is not None:
                    rec = LmpCaptureRecord(LmpDirection.TX, run.conn.handle, run.tx)
                    self._emit(vendor_event(VendorEvent.LMP_MONITOR, rec.to_bytes()[:254]))
                elif kind == HookKind.TRACEPOINT:
                    self._tracepoint_hit(run, address, ptr)
                elif kind == HookKind.MAC_FILTER and run.rx is not None and run.conn is not None:
                    count = args[0] if args else 0
                    allowed = {bytes(args[1 + 6 * i : 7 + 6 * i]) for i in range(count)}
                    if run.conn.peer_mac not in allowed:
                        run.result.rejected = True
            ptr = nxt

    def _tracepoint_hit(self, run: _Run, address: int, ptr: int) -> None:
        regs = dict(self.registers)
        regs["pc"] = address
        run.result.trace.append(TraceEvent(TraceKind.REGISTER_DUMP, address, regs))
        self.memory.write(ptr + 1, b"\x00")
        self._emit(vendor_event(VendorEvent.TRACEPOINT_REGISTERS, struct.pack("<I", address) + pack_registers(regs)))
        start, end = self.profile.layout.trace_dump
        chunk = 249
        for at in range(start, end, chunk):
            n = min(chunk, end - at)
            flags = 1 if at + n >= end else 0
            data = self.memory.read_raw(at, n)
            self._emit(vendor_event(VendorEvent.TRACEPOINT_MEMORY, struct.pack("<BI", flags, at) + data))

    # -- crashes -------------------------------------------------------------

    def _crash(self, fault: int, reason: CrashReason, run: _Run | None = None) -> None:
        self._base_mode = Mode.CRASHED
        regs = dict(self.registers)
        if run is not None:
            run.result.crashed = True
            run.result.trace.append(TraceEvent(TraceKind.CRASH, regs.get("pc", 0), reason.name.lower()))
        self._tx_queue.clear()
        self._emit(vendor_event(VendorEvent.CRASH_DUMP, struct.pack("<BI", reason, fault) + pack_registers(regs)))
        for handle in list(self.connections):
            self.air.unlink(self, handle)
        self.connections.clear()


def connection_complete(status: int, handle: int, mac: bytes) -> HciEvent:
    return HciEvent(
        hci.EventCode.CONNECTION_COMPLETE,
        struct.pack("<BH", status, handle) + bytes(reversed(mac)) + b"\x01\x00",
    )


def disconnection_complete(handle: int, reason: int) -> HciEvent:
    return HciEvent(hci.EventCode.DISCONNECTION_COMPLETE, struct.pack("<BHB", 0, handle, reason))


@dataclass(frozen=True)
class CrashDump:
    reason: CrashReason
    fault: int
    registers: dict[str, int]

    @classmethod
    def from_event_payload(cls, payload: bytes) -> "CrashDump":
        reason, fault = struct.unpack_from("<BI", payload)
        return cls(CrashReason(reason), fault, unpack_registers(payload[5:73]))
