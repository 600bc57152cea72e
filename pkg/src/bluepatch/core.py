"""Host framework: a Session drives a controller purely over HCI.

Everything here goes through vendor commands the way a host tool on a phone
would: memory access is chunked Read_RAM/Write_RAM, ROM patches are written
into the Patchram tables, hooks are descriptors placed in free RAM and
reached through a patched ROM word, and LMP injection writes a small stub
that Launch_RAM executes.
"""

from __future__ import annotations

import enum
import logging
import queue
import re
import socket
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from . import hci, lmp
from .capture import (
    LmpCaptureRecord,
    LmpDirection,
    RecordReader,
    SnoopHeader,
    hci_record,
    packet_from_record,
)
from .hcd import HcdFile, read_hcd
from .hci import (
    EventCode,
    HciCommand,
    HciEvent,
    LaunchRam,
    ReadRam,
    Status,
    VendorEvent,
    WriteRam,
    DownloadMinidriver,
    build_vendor_command,
    parse_command_complete,
)
from .sim.controller import (
    CONN_ENTRY_SIZE,
    HOOK_HEADER,
    HOOK_TAG,
    STUB_HEADER,
    STUB_MAGIC,
    STUB_SEND,
    STUB_SEND_RAW,
    Air,
    ConnectionEntry,
    Controller,
    CrashDump,
    HookKind,
    NoSuchConnection,
    CommandDisallowedInMode,
    TraceEvent,
    TraceKind,
    TxResult,
    format_mac,
    unpack_registers,
)
from .sim.memory import RegionKind
from .sim.profile import ControllerProfile, load_profile

log = logging.getLogger(__name__)

DEFAULT_MAC = "00:1a:7d:da:71:0a"
DEFAULT_PEER_MAC = "de:ad:be:ef:00:00"
SCAN_TIMEOUT = 5.0
DEFAULT_PROBE = 0x06
HOOK_BLOCK = 128
MAC_FILTER_CAPACITY = 16

__all__ = [
    "Session",
    "TraceEvent",
    "TraceKind",
    "TxResult",
    "NoSuchConnection",
    "CommandDisallowedInMode",
]


class CoreError(Exception):
    pass


class ChipCrashed(CoreError):
    def __init__(self, message: str, dump: CrashDump | None = None):
        super().__init__(message)
        self.dump = dump


class OutOfMap(CoreError):
    pass


class VerifyMismatch(CoreError):
    pass


class NoFreeSlots(CoreError):
    pass


class NotRom(CoreError):
    pass


class Unaligned(CoreError):
    pass


class MalformedMac(CoreError):
    pass


class AlreadyArmed(CoreError):
    pass


class ReentrantCall(CoreError):
    pass


class CommandFailed(CoreError):
    def __init__(self, message: str, status: int):
        super().__init__(message)
        self.status = status


class TransportError(CoreError):
    pass


class ScanVerdict(enum.Enum):
    VULNERABLE = "Vulnerable"
    NOT_VULNERABLE = "NotVulnerable"
    NO_RESPONSE = "NoResponse"


_MAC_RE = re.compile(r"^([0-9a-fA-F]{2})([:-]?)([0-9a-fA-F]{2})(\2[0-9a-fA-F]{2}){4}$")


def parse_mac(mac: str | bytes) -> bytes:
    if isinstance(mac, (bytes, bytearray)):
        if len(mac) != 6:
            raise MalformedMac(f"MAC needs 6 bytes, got {len(mac)}")
        return bytes(mac)
    text = mac.strip()
    if not _MAC_RE.match(text):
        raise MalformedMac(f"malformed MAC address {mac!r}")
    return bytes.fromhex(text.replace(":", "").replace("-", ""))


# -- transports ---------------------------------------------------------------


class Transport:
    def submit(self, cmd: HciCommand) -> list[HciEvent]:
        raise NotImplementedError

    def poll(self) -> list[HciEvent]:
        return []

    def now_us(self) -> int:
        return 0

    def close(self) -> None:
        pass


class InProcessTransport(Transport):
    """Direct calls into a simulated controller; replies are synchronous."""

    def __init__(self, controller: Controller):
        self.controller = controller
        self._events: list[HciEvent] = []
        controller.listeners.append(self._events.append)

    def submit(self, cmd: HciCommand) -> list[HciEvent]:
        self.controller.handle_hci_command(cmd)
        return self.poll()

    def poll(self) -> list[HciEvent]:
        with self.controller.lock:
            out, self._events[:] = list(self._events), []
        return out

    def now_us(self) -> int:
        return int(round(self.controller.air.now * 1e6))

    def tick(self, dt: float) -> None:
        self.controller.tick(dt)

    def close(self) -> None:
        try:
            self.controller.listeners.remove(self._events.append)
        except ValueError:
            pass


class TcpTransport(Transport):
    """Client of a running bridge: commands go to the inject port, every
    packet comes back on the snoop port."""

    def __init__(self, host: str = "127.0.0.1", out_port: int = 8872, in_port: int = 8873,
                 reply_timeout: float = 5.0):
        self.reply_timeout = reply_timeout
        try:
            self._rx = socket.create_connection((host, out_port), timeout=reply_timeout)
            self._tx = socket.create_connection((host, in_port), timeout=reply_timeout)
        except OSError as exc:
            raise TransportError(f"cannot reach bridge at {host}:{out_port}/{in_port}: {exc}") from exc
        self._rx.settimeout(None)
        self._events: queue.Queue = queue.Queue()
        self._header = SnoopHeader()
        self._tx.sendall(self._header.encode())
        self._last_ts = 0
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _read_loop(self) -> None:
        try:
            with self._rx.makefile("rb") as stream:
                for rec in RecordReader(stream):
                    packet = packet_from_record(rec)
                    self._last_ts = rec.timestamp_us
                    if isinstance(packet, HciEvent):
                        self._events.put(packet)
        except (OSError, ValueError) as exc:
            log.debug("bridge stream ended: %s", exc)
        finally:
            self._events.put(None)

    def submit(self, cmd: HciCommand) -> list[HciEvent]:
        self._tx.sendall(hci_record(cmd).encode(self._header.dialect))
        out = []
        while True:
            try:
                evt = self._events.get(timeout=self.reply_timeout)
            except queue.Empty:
                return out
            if evt is None:
                raise TransportError("bridge closed the snoop stream")
            out.append(evt)
            if _answers(evt, cmd.opcode) or _is_crash(evt):
                return out

    def poll(self) -> list[HciEvent]:
        out = []
        while True:
            try:
                evt = self._events.get_nowait()
            except queue.Empty:
                return out
            if evt is not None:
                out.append(evt)

    def now_us(self) -> int:
        return self._last_ts

    def close(self) -> None:
        for s in (self._tx, self._rx):
            try:
                s.close()
            except OSError:
                pass


def _answers(evt: HciEvent, opcode: int) -> bool:
    if evt.event_code == EventCode.COMMAND_COMPLETE and len(evt.params) >= 3:
        return struct.unpack_from("<H", evt.params, 1)[0] == opcode
    if evt.event_code == EventCode.COMMAND_STATUS and len(evt.params) >= 4:
        return struct.unpack_from("<H", evt.params, 2)[0] == opcode
    return False


def _is_crash(evt: HciEvent) -> bool:
    return evt.event_code == EventCode.VENDOR and evt.params[:1] == bytes([VendorEvent.CRASH_DUMP])


# -- session ------------------------------------------------------------------


@dataclass
class TracepointHit:
    address: int
    registers: dict[str, int]
    memory_start: int
    memory: bytes = b""


@dataclass
class _Tracepoint:
    descriptor: int
    armed: bool = True


@dataclass
class _Chain:
    slot: int
    descriptors: list[int] = field(default_factory=list)


@dataclass(frozen=True)
class WriteResult:
    chunks: int
    note: str | None = None


@dataclass(frozen=True)
class ScanResult:
    verdict: ScanVerdict
    peer_version: tuple[int, int, int] | None
    replies: tuple[lmp.LmpPdu, ...] = ()

    @property
    def version_text(self) -> str:
        if self.peer_version is None:
            return "unknown"
        return f"{self.peer_version[0]}/{self.peer_version[2]}"


class Session:
    def __init__(self, transport: Transport, profile: ControllerProfile):
        self.transport = transport
        self.profile = profile
        self.table = profile.vendor_opcodes
        self._lock = threading.RLock()
        self._delivery: queue.Queue = queue.Queue()
        self._delivery_thread: threading.Thread | None = None
        self._packet_observers: list[Callable] = []
        self._lmp_sinks: list = []
        self._crash_observers: list[Callable] = []
        self._tracepoint_observers: list[Callable] = []
        self._free_descriptors: list[int] = []
        self._next_descriptor = profile.layout.hook_area[0]
        self._partial_hit: TracepointHit | None = None
        self._hit_chunks: list[bytes] = []
        self.used_slots: set[int] = set()
        self.hooks: dict[int, _Chain] = {}
        self.tracepoints: dict[int, _Tracepoint] = {}
        self.tracepoint_hits: list[TracepointHit] = []
        self.monitor_hooks: tuple[int, int] | None = None
        self.mac_filter: tuple[int, set[bytes]] | None = None
        self.crash_dump: CrashDump | None = None
        self.commands_sent = 0
        self._sync_slots()

    # -- construction ----------------------------------------------------------

    @classmethod
    def simulated(cls, profile: str | ControllerProfile = "bcm4339", mac: str | bytes = DEFAULT_MAC,
                  air: Air | None = None) -> "Session":
        prof = load_profile(profile) if isinstance(profile, str) else profile
        ctrl = Controller(prof, parse_mac(mac), air)
        return cls(InProcessTransport(ctrl), prof)

    @classmethod
    def remote(cls, profile: str | ControllerProfile = "bcm4339", host: str = "127.0.0.1",
               out_port: int = 8872, in_port: int = 8873) -> "Session":
        prof = load_profile(profile) if isinstance(profile, str) else profile
        return cls(TcpTransport(host, out_port, in_port), prof)

    @property
    def controller(self) -> Controller | None:
        return getattr(self.transport, "controller", None)

    def close(self) -> None:
        if self._delivery_thread is not None:
            self._delivery.put(None)
            self._delivery_thread.join(timeout=5)
            self._delivery_thread = None
        self.transport.close()

    def __enter__(self) -> "Session":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- observers -------------------------------------------------------------

    def add_packet_observer(self, fn: Callable[[hci.HciPacket, int], None]) -> None:
        with self._lock:
            self._packet_observers.append(fn)

    def remove_packet_observer(self, fn: Callable) -> None:
        with self._lock:
            if fn in self._packet_observers:
                self._packet_observers.remove(fn)

    def add_crash_observer(self, fn: Callable[[CrashDump], None]) -> None:
        self._crash_observers.append(fn)

    def add_tracepoint_observer(self, fn: Callable[[TracepointHit], None]) -> None:
        self._tracepoint_observers.append(fn)

    def now_us(self) -> int:
        return self.transport.now_us()

    def _observe(self, packet: hci.HciPacket) -> None:
        ts = self.transport.now_us()
        for fn in list(self._packet_observers):
            fn(packet, ts)

    # -- delivery context ------------------------------------------------------

    def _in_delivery(self) -> bool:
        return threading.current_thread() is self._delivery_thread

    def _deliver_loop(self) -> None:
        while True:
            item = self._delivery.get()
            try:
                if item is None:
                    return
                fn, arg = item
                try:
                    fn(arg)
                except Exception:
                    log.exception("monitor sink failed")
            finally:
                self._delivery.task_done()

    def _schedule(self, fn: Callable, arg) -> None:
        if self._delivery_thread is None:
            self._delivery_thread = threading.Thread(target=self._deliver_loop, daemon=True, name="bluepatch-delivery")
            self._delivery_thread.start()
        self._delivery.put((fn, arg))

    def defer(self, fn: Callable, arg) -> None:
        """Run ``fn(arg)`` on the delivery context, after anything queued so far."""
        self._schedule(fn, arg)

    def flush(self) -> None:
        """Take in pending events, then block until every sink delivery has run."""
        if self._in_delivery():
            raise ReentrantCall("flush() from a sink would wait on itself")
        self.poll()
        if self._delivery_thread is not None:
            self._delivery.join()

    # -- HCI command path --------------------------------------------------------

    def send_raw(self, cmd: HciCommand) -> list[HciEvent]:
        """Send one command; returns every event that arrived with the reply."""
        if self._in_delivery():
            raise ReentrantCall("session commands may not be issued from a monitor sink")
        with self._lock:
            events = self.transport.poll()
            self._process(events)
            self._observe(cmd)
            self.commands_sent += 1
            reply = self.transport.submit(cmd)
            self._process(reply)
            return events + reply

    def poll(self) -> list[HciEvent]:
        """Collect events that arrived without a command (peer traffic)."""
        if self._in_delivery():
            raise ReentrantCall("session commands may not be issued from a monitor sink")
        with self._lock:
            events = self.transport.poll()
            self._process(events)
            return events

    def tick(self, dt: float) -> None:
        tick = getattr(self.transport, "tick", None)
        if tick is None:
            raise CoreError("sim time only exists for the in-process transport")
        with self._lock:
            tick(dt)
            self._process(self.transport.poll())

    def _process(self, events: list[HciEvent]) -> None:
        for evt in events:
            self._observe(evt)
            if evt.event_code != EventCode.VENDOR or not evt.params:
                continue
            sub, body = evt.params[0], evt.params[1:]
            if sub == VendorEvent.CRASH_DUMP:
                self.crash_dump = CrashDump.from_event_payload(body)
                for fn in self._crash_observers:
                    self._schedule(fn, self.crash_dump)
            elif sub == VendorEvent.TRACEPOINT_REGISTERS:
                address = struct.unpack_from("<I", body)[0]
                self._partial_hit = TracepointHit(
                    address, unpack_registers(body[4:72]), self.profile.layout.trace_dump[0]
                )
                self._hit_chunks = []
                tp = self.tracepoints.get(address)
                if tp is not None:
                    tp.armed = False
            elif sub == VendorEvent.TRACEPOINT_MEMORY and self._partial_hit is not None:
                flags, _ = struct.unpack_from("<BI", body)
                self._hit_chunks.append(body[5:])
                if flags & 1:
                    hit = self._partial_hit
                    hit.memory = b"".join(self._hit_chunks)
                    self._partial_hit, self._hit_chunks = None, []
                    self.tracepoint_hits.append(hit)
                    for fn in self._tracepoint_observers:
                        self._schedule(fn, hit)
            elif sub == VendorEvent.LMP_MONITOR:
                rec = LmpCaptureRecord.from_bytes(body)
                for sink in self._lmp_sinks:
                    self._schedule(_sink_callable(sink), rec)

    def _expect_complete(self, cmd: HciCommand) -> hci.CommandComplete:
        events = self.send_raw(cmd)
        for evt in events:
            if evt.event_code == EventCode.COMMAND_COMPLETE and _answers(evt, cmd.opcode):
                cc = parse_command_complete(evt)
                if cc.status == Status.COMMAND_DISALLOWED:
                    raise CommandDisallowedInMode(f"{cmd.opcode:#06x} not accepted in the current mode")
                return cc
        if any(_is_crash(e) for e in events) or self.crash_dump is not None:
            raise ChipCrashed("controller crashed; use reset", self.crash_dump)
        raise TransportError(f"no Command Complete for {cmd.opcode:#06x}")

    def _vendor(self, kind) -> hci.CommandComplete:
        cc = self._expect_complete(build_vendor_command(kind, self.table))
        if cc.status not in (Status.SUCCESS, None):
            raise CommandFailed(f"{type(kind).__name__} failed with status {cc.status:#04x}", cc.status)
        return cc

    @property
    def crashed(self) -> bool:
        return self.crash_dump is not None

    # -- memory ----------------------------------------------------------------

    def _region(self, address: int, length: int = 1):
        for r in self.profile.regions:
            if r.contains(address, length):
                return r
        return None

    def _mapped(self, address: int, length: int) -> bool:
        pos, end = address, address + length
        while pos < end:
            r = self._region(pos)
            if r is None:
                return False
            pos = r.end
        return True

    def read_memory(self, address: int, length: int, force: bool = False) -> bytes:
        if length <= 0:
            raise ValueError("read length must be positive")
        if not force and not self._mapped(address, length):
            raise OutOfMap(f"{address:#x}+{length} leaves the memory map (use force to read anyway)")
        out = bytearray()
        step = hci.READ_RAM_MAX_CHUNK
        for off in range(0, length, step):
            n = min(step, length - off)
            out += self._vendor(ReadRam(address + off, n)).payload
        return bytes(out)

    def write_memory(self, address: int, data: bytes, verify: bool = False, force: bool = False) -> WriteResult:
        data = bytes(data)
        if not data:
            raise ValueError("nothing to write")
        if not force and not self._mapped(address, len(data)):
            raise OutOfMap(f"{address:#x}+{len(data)} leaves the memory map")
        before = None
        region = self._region(address, len(data))
        on_rom = region is not None and region.kind is RegionKind.ROM
        if verify and on_rom:
            before = self.read_memory(address, len(data))
        step = hci.WRITE_RAM_MAX_CHUNK
        chunks = 0
        for off in range(0, len(data), step):
            self._vendor(WriteRam(address + off, data[off : off + step]))
            chunks += 1
        note = None
        if verify:
            after = self.read_memory(address, len(data))
            if on_rom:
                if after == before and after != data:
                    note = "no effect, use patch_rom"
            elif after != data:
                raise VerifyMismatch(f"write at {address:#x} did not stick")
        return WriteResult(chunks, note)

    def search_memory(self, needle: bytes, regions=None) -> list[int]:
        if not needle:
            raise ValueError("empty search pattern")
        hits = []
        for r in regions or self.profile.regions:
            data = self.read_memory(r.start, r.size)
            at = data.find(needle)
            while at >= 0:
                hits.append(r.start + at)
                at = data.find(needle, at + 1)
        return hits

    def launch(self, address: int) -> hci.CommandComplete:
        return self._vendor(LaunchRam(address))

    def read_local_version(self) -> tuple[int, int, int]:
        """(lmp_version, company, lmp_subversion) of the local controller."""
        cc = self._expect_complete(HciCommand(hci.READ_LOCAL_VERSION))
        _, _, version, company, sub = struct.unpack("<BHBHH", cc.payload)
        return version, company, sub

    # -- Patchram ------------------------------------------------------------------

    def _sync_slots(self) -> None:
        """Adopt slots the firmware (or an HCD) already occupies."""
        if self.controller is None:
            return
        pl = self.profile.patchram_layout
        try:
            bitmap = self.read_memory(pl.enable_bitmap, (pl.slots + 7) // 8)
        except CoreError:
            return
        self.used_slots = {s for s in range(pl.slots) if bitmap[s // 8] >> (s % 8) & 1}

    def _check_rom_word(self, address: int) -> None:
        region = self._region(address, 4)
        if region is None:
            raise OutOfMap(f"{address:#x} is not mapped")
        if region.kind is not RegionKind.ROM:
            raise NotRom(f"{address:#x} is in {region.label}, not ROM")
        if address % 4:
            raise Unaligned(f"{address:#x} is not word aligned")

    def _alloc_slot(self) -> int:
        for s in range(self.profile.patchram_slots):
            if s not in self.used_slots:
                return s
        raise NoFreeSlots(f"all {self.profile.patchram_slots} Patchram slots in use")

    def _write_slot(self, slot: int, address: int, value: int) -> None:
        pl = self.profile.patchram_layout
        self.write_memory(pl.value_table + 4 * slot, struct.pack("<I", value))
        self.write_memory(pl.address_table + 4 * slot, struct.pack("<I", address))
        self._set_slot_enabled(slot, True)

    def _set_slot_enabled(self, slot: int, enabled: bool) -> None:
        pl = self.profile.patchram_layout
        at = pl.enable_bitmap + slot // 8
        byte = self.read_memory(at, 1)[0]
        bit = 1 << (slot % 8)
        self.write_memory(at, bytes([byte | bit if enabled else byte & ~bit & 0xFF]))

    def patch_rom(self, address: int, word: int) -> int:
        self._check_rom_word(address)
        slot = self._alloc_slot()
        self._write_slot(slot, address, word & 0xFFFFFFFF)
        self.used_slots.add(slot)
        return slot

    def release_slot(self, slot: int) -> None:
        if slot in self.used_slots:
            self._set_slot_enabled(slot, False)
            self.used_slots.discard(slot)

    def load_hcd(self, source: str | Path | HcdFile) -> int:
        """Flash an HCD file; returns the number of records sent."""
        hcd = source if isinstance(source, HcdFile) else read_hcd(source, self.table)
        self._vendor(DownloadMinidriver())
        for rec in hcd.records:
            cc = self._expect_complete(rec)
            if cc.status not in (Status.SUCCESS, None):
                raise CommandFailed(f"HCD record {rec.opcode:#06x} failed with status {cc.status:#04x}", cc.status)
        self._sync_slots()
        return len(hcd.records)

    # -- hooks -----------------------------------------------------------------------

    def _alloc_descriptor(self) -> int:
        if self._free_descriptors:
            return self._free_descriptors.pop()
        start, end = self.profile.layout.hook_area
        if self._next_descriptor + HOOK_BLOCK > end:
            raise CoreError("hook area exhausted")
        ptr = self._next_descriptor
        self._next_descriptor += HOOK_BLOCK
        return ptr

    @staticmethod
    def _descriptor(kind: HookKind, args: bytes, nxt: int = 0, active: bool = True) -> bytes:
        if HOOK_HEADER + len(args) > HOOK_BLOCK:
            raise CoreError("hook arguments too large")
        return struct.pack("<BBHII", kind, 1 if active else 0, 0, nxt, len(args)) + args

    def _install_hook(self, address: int, kind: HookKind, args: bytes = b"") -> int:
        self._check_rom_word(address)
        chain = self.hooks.get(address)
        if chain is None:
            slot = self._alloc_slot()
            chain = _Chain(slot)
        ptr = self._alloc_descriptor()
        self.write_memory(ptr, self._descriptor(kind, args))
        if chain.descriptors:
            self.write_memory(chain.descriptors[-1] + 4, struct.pack("<I", ptr))
        else:
            self._write_slot(chain.slot, address, (HOOK_TAG << 24) | ptr)
            self.used_slots.add(chain.slot)
            self.hooks[address] = chain
        chain.descriptors.append(ptr)
        return ptr

    def _remove_hook(self, address: int, ptr: int) -> None:
        chain = self.hooks.get(address)
        if chain is None or ptr not in chain.descriptors:
            return
        i = chain.descriptors.index(ptr)
        nxt = chain.descriptors[i + 1] if i + 1 < len(chain.descriptors) else 0
        if i > 0:
            self.write_memory(chain.descriptors[i - 1] + 4, struct.pack("<I", nxt))
        elif nxt:
            self._write_slot(chain.slot, address, (HOOK_TAG << 24) | nxt)
        chain.descriptors.pop(i)
        self._free_descriptors.append(ptr)
        if not chain.descriptors:
            self.release_slot(chain.slot)
            del self.hooks[address]

    # -- LMP monitor and injection -------------------------------------------------

    def install_lmp_monitor(self, sink=None) -> None:
        if self.monitor_hooks is None:
            rx = self._install_hook(self.profile.dispatcher_address, HookKind.LMP_RX_MONITOR)
            try:
                tx = self._install_hook(self.profile.send_path_address, HookKind.LMP_TX_MONITOR)
            except CoreError:
                self._remove_hook(self.profile.dispatcher_address, rx)
                raise
            self.monitor_hooks = (rx, tx)
        if sink is not None and sink not in self._lmp_sinks:
            self._lmp_sinks.append(sink)

    def remove_lmp_monitor(self, sink=None) -> None:
        if sink is not None:
            if sink in self._lmp_sinks:
                self._lmp_sinks.remove(sink)
            if self._lmp_sinks:
                return
        self._lmp_sinks.clear()
        if self.monitor_hooks is not None:
            rx, tx = self.monitor_hooks
            self._remove_hook(self.profile.dispatcher_address, rx)
            self._remove_hook(self.profile.send_path_address, tx)
            self.monitor_hooks = None

    def send_lmp(self, handle: int, opcode: int, payload: bytes = b"", fuzz: bool = False,
                 ext_opcode: int | None = None) -> TxResult:
        raw = lmp.encode_pdu(lmp.LmpPdu(0, opcode, bytes(payload), ext_opcode))
        return self.send_lmp_raw(handle, raw, fuzz)

    def send_lmp_raw(self, handle: int, raw: bytes, fuzz: bool = False) -> TxResult:
        start, end = self.profile.layout.scratch_window
        if STUB_HEADER + len(raw) > end - start:
            raise CoreError(f"{len(raw)}-byte PDU does not fit the scratch window")
        action = STUB_SEND_RAW if fuzz else STUB_SEND
        stub = struct.pack("<4I", STUB_MAGIC, action, handle, len(raw)) + raw
        self.write_memory(start, stub)
        cc = self._expect_complete(build_vendor_command(LaunchRam(start), self.table))
        if cc.status == Status.UNKNOWN_CONNECTION:
            raise NoSuchConnection(f"no connection with handle {handle:#06x}")
        if cc.status != Status.SUCCESS:
            raise CommandFailed(f"LMP injection failed with status {cc.status:#04x}", cc.status)
        return TxResult.SENT if cc.payload[:1] == b"\x01" else TxResult.SILENTLY_DROPPED

    # -- connections ---------------------------------------------------------------

    def connect(self, mac: str | bytes) -> ConnectionEntry:
        peer = parse_mac(mac)
        events = self.send_raw(HciCommand(hci.CREATE_CONNECTION, bytes(reversed(peer))))
        handle = None
        for evt in events:
            if evt.event_code == EventCode.CONNECTION_COMPLETE and len(evt.params) >= 9:
                status, h = struct.unpack_from("<BH", evt.params)
                if bytes(reversed(evt.params[3:9])) == peer:
                    handle = h
                    if status not in (Status.SUCCESS, Status.PAGE_TIMEOUT):
                        raise CommandFailed(f"connection refused with status {status:#04x}", status)
        if handle is None:
            if self.crashed:
                raise ChipCrashed("controller crashed; use reset", self.crash_dump)
            raise TransportError("no Connection Complete event")
        for conn in self.connections():
            if conn.handle == handle:
                return conn
        raise NoSuchConnection(f"handle {handle:#06x} vanished")

    def connections(self) -> list[ConnectionEntry]:
        """Read the controller's connection list out of its RAM."""
        lay = self.profile.layout
        raw = self.read_memory(lay.connection_table, CONN_ENTRY_SIZE * lay.connection_slots)
        out = []
        for i in range(lay.connection_slots):
            entry = ConnectionEntry.from_bytes(raw[i * CONN_ENTRY_SIZE : (i + 1) * CONN_ENTRY_SIZE])
            if entry is not None:
                out.append(entry)
        return out

    # -- tracepoints -------------------------------------------------------------------

    def add_tracepoint(self, address: int) -> None:
        tp = self.tracepoints.get(address)
        if tp is not None:
            if tp.armed:
                raise AlreadyArmed(f"tracepoint {address:#x} already armed")
            self.write_memory(tp.descriptor + 1, b"\x01")
            tp.armed = True
            return
        ptr = self._install_hook(address, HookKind.TRACEPOINT)
        self.tracepoints[address] = _Tracepoint(ptr)

    def remove_tracepoint(self, address: int) -> None:
        tp = self.tracepoints.pop(address, None)
        if tp is None:
            raise CoreError(f"no tracepoint at {address:#x}")
        self._remove_hook(address, tp.descriptor)

    # -- MAC filter --------------------------------------------------------------------

    def install_mac_filter(self, whitelist) -> None:
        macs = {parse_mac(m) for m in whitelist}
        if len(macs) > MAC_FILTER_CAPACITY:
            raise CoreError(f"MAC filter holds at most {MAC_FILTER_CAPACITY} addresses")
        args = bytes([len(macs)]) + b"".join(sorted(macs))
        if self.mac_filter is None:
            ptr = self._install_hook(self.profile.dispatcher_address, HookKind.MAC_FILTER, args)
        else:
            ptr = self.mac_filter[0]
            self.write_memory(ptr + 8, struct.pack("<I", len(args)) + args)
        self.mac_filter = (ptr, macs)

    def add_mac_filter(self, mac) -> None:
        current = self.mac_filter[1] if self.mac_filter else set()
        self.install_mac_filter(current | {parse_mac(mac)})

    def remove_mac_filter(self, mac=None) -> None:
        if self.mac_filter is None:
            return
        if mac is not None:
            self.install_mac_filter(self.mac_filter[1] - {parse_mac(mac)})
            return
        self._remove_hook(self.profile.dispatcher_address, self.mac_filter[0])
        self.mac_filter = None

    # -- BPCS scanner --------------------------------------------------------------------

    def scan_bpcs(self, handle: int, probe: int = DEFAULT_PROBE, timeout: float = SCAN_TIMEOUT) -> ScanResult:
        records: list[LmpCaptureRecord] = []
        temporary = self.monitor_hooks is None
        self.install_lmp_monitor(records)
        try:
            version, company, sub = self.read_local_version()
            self.send_lmp(handle, lmp.LMP_VERSION_REQ, struct.pack("<BHH", version, company, sub))
            self._settle(timeout)
            peer_version = None
            for rec in list(records):
                if rec.direction is LmpDirection.RX and rec.pdu_bytes[:1] and rec.pdu_bytes[0] >> 1 == lmp.LMP_VERSION_RES:
                    v, c, s = struct.unpack_from("<BHH", rec.pdu_bytes.ljust(6, b"\x00"), 1)
                    peer_version = (v, c, s)
            mark = len(records)
            self.send_lmp_raw(handle, bytes([lmp.BPCS << 1, probe]), fuzz=True)
            self._settle(timeout)
            replies = tuple(
                lmp.decode_pdu(r.pdu_bytes)
                for r in records[mark:]
                if r.direction is LmpDirection.RX and r.pdu_bytes
            )
        finally:
            if temporary:
                self.remove_lmp_monitor()
            else:
                self.remove_lmp_monitor(records)
        rejected = any(p.opcode == lmp.LMP_NOT_ACCEPTED and p.payload[:1] == bytes([lmp.BPCS]) for p in replies)
        if rejected:
            verdict = ScanVerdict.NOT_VULNERABLE
        elif peer_version is None and not replies:
            verdict = ScanVerdict.NO_RESPONSE
        else:
            verdict = ScanVerdict.VULNERABLE
        return ScanResult(verdict, peer_version, replies)

    def _settle(self, timeout: float) -> None:
        """Give the peer ``timeout`` seconds to answer, then drain deliveries.

        In-process replies are synchronous, so only a remote transport waits.
        """
        if isinstance(self.transport, TcpTransport):
            deadline = threading.Event()
            deadline.wait(min(timeout, 0.5))
        self.poll()
        self.flush()

    # -- reset -------------------------------------------------------------------------

    def reset(self) -> None:
        """HCI_Reset: the chip drops every patch, hook and connection."""
        self._expect_complete(HciCommand(hci.HCI_RESET))
        self.crash_dump = None
        self.used_slots.clear()
        self.hooks.clear()
        self.tracepoints.clear()
        self.monitor_hooks = None
        self.mac_filter = None
        self._lmp_sinks.clear()
        self._free_descriptors.clear()
        self._next_descriptor = self.profile.layout.hook_area[0]
        self._partial_hit = None
        self._sync_slots()


def _sink_callable(sink) -> Callable:
    if isinstance(sink, list):
        return sink.append
    if callable(sink):
        return sink
    write = getattr(sink, "write_lmp", None) or getattr(sink, "write", None)
    if write is None:
        raise TypeError(f"cannot deliver LMP records to {sink!r}")
    return write


class LmpCaptureSink:
    """Writes monitor records to a capture file with the LMP link type."""

    def __init__(self, path: str | Path, session: Session, dialect=None):
        from .capture import CaptureWriter, Dialect, lmp_header

        self.session = session
        self.writer = CaptureWriter(path, lmp_header(dialect or Dialect.BTSNOOP))

    def write_lmp(self, record: LmpCaptureRecord) -> None:
        self.writer.write(record.snoop_record(self.session.now_us(), self.writer.header.dialect))

    def close(self) -> None:
        self.writer.close()


class HciCaptureSink:
    """Packet observer that appends every HCI packet to a capture file."""

    def __init__(self, path, session: Session, dialect=None):
        from .capture import CaptureWriter, Dialect

        self.session = session
        self.writer = CaptureWriter(path, SnoopHeader(dialect or Dialect.BTSNOOP))
        session.add_packet_observer(self)

    def __call__(self, packet: hci.HciPacket, timestamp_us: int) -> None:
        self.writer.write(hci_record(packet, timestamp_us, self.writer.header.dialect))

    def close(self) -> None:
        self.session.remove_packet_observer(self)
        self.writer.close()


# module-level aliases; each forwards to the Session method
read_memory = Session.read_memory
write_memory = Session.write_memory
patch_rom = Session.patch_rom
install_lmp_monitor = Session.install_lmp_monitor
send_lmp = Session.send_lmp
connect = Session.connect
add_tracepoint = Session.add_tracepoint
scan_bpcs = Session.scan_bpcs
install_mac_filter = Session.install_mac_filter
