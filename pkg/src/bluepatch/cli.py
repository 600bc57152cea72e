"""Line-oriented front end: parse commands, run them against a Session."""

from __future__ import annotations

import argparse
import os
import re
import shlex
import struct
import sys
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, TextIO

from . import hci, lmp, security
from .capture import BindFailure, LmpCaptureRecord, run_bridge
from .core import (
    ChipCrashed,
    CoreError,
    HciCaptureSink,
    LmpCaptureSink,
    Session,
    TracepointHit,
    TransportError,
    format_mac,
    parse_mac,
)
from .sim.controller import Air, Controller, ControllerError, CrashDump, REGISTER_NAMES
from .sim.profile import ProfileError, load_profile

PROMPT = "bluepatch> "
HISTORY_ENV = "BLUEPATCH_HISTORY"
DEFAULT_HISTORY = "~/.bluepatch_history"
HISTORY_LIMIT = 1000
DEFAULT_PEER = "de:ad:be:ef:00:00=bcm4339"
HEX_PREVIEW = 32


class ParseError(Exception):
    def __init__(self, message: str, position: int, expected: str = ""):
        hint = f" (expected {expected})" if expected else ""
        super().__init__(f"{message} at column {position}{hint}")
        self.position = position
        self.expected = expected


# -- command structures -------------------------------------------------------------


@dataclass(frozen=True)
class Connect:
    mac: str


@dataclass(frozen=True)
class InfoConnections:
    pass


@dataclass(frozen=True)
class ReadMem:
    address: int
    length: int


@dataclass(frozen=True)
class WriteMem:
    address: int
    data: bytes


@dataclass(frozen=True)
class SearchMem:
    pattern: bytes
    ascii: bool = False


@dataclass(frozen=True)
class Launch:
    address: int


@dataclass(frozen=True)
class PatchRom:
    address: int
    word: int


@dataclass(frozen=True)
class LoadHcd:
    path: str


@dataclass(frozen=True)
class SendHci:
    data: bytes


@dataclass(frozen=True)
class SendLmp:
    opcode: int
    payload: bytes = b""
    fuzz: bool = False


@dataclass(frozen=True)
class Monitor:
    kind: str
    action: str
    file: str | None = None


@dataclass(frozen=True)
class Tracepoint:
    action: str
    address: int


@dataclass(frozen=True)
class ScanBpcs:
    pass


@dataclass(frozen=True)
class MacFilter:
    action: str
    mac: str | None = None


@dataclass(frozen=True)
class Demo:
    name: str
    args: tuple[str, ...] = ()


@dataclass(frozen=True)
class Reset:
    pass


@dataclass(frozen=True)
class Help:
    pass


@dataclass(frozen=True)
class Quit:
    pass


Command = (Connect | InfoConnections | ReadMem | WriteMem | SearchMem | Launch | PatchRom | LoadHcd | SendHci
           | SendLmp | Monitor | Tracepoint | ScanBpcs | MacFilter | Demo | Reset | Help | Quit)

GRAMMAR = """\
connect <mac>
info connections
readmem <addr> <len>
writemem <addr> <hexbytes>
searchmem <hexbytes|ascii:text>
launch <addr>
patchrom <addr> <word>
loadhcd <path>
sendhci <hexbytes>
sendlmp [--fuzz] <opcode> [hexpayload]
monitor hci|lmp start|stop [--file <path>]
tp add|remove <addr>
scan bpcs
macfilter add|clear [<mac>]
demo nino|ecdh|jammer [args]
reset
help
quit"""


# -- parser -----------------------------------------------------------------------------


_HEX_RE = re.compile(r"^(?:0x)?([0-9a-fA-F]*)$")


class _Tokens:
    def __init__(self, line: str):
        self.line = line
        self.items = [(m.group(), m.start()) for m in re.finditer(r"\S+", line)]
        self.i = 0

    def peek(self) -> str | None:
        return self.items[self.i][0] if self.i < len(self.items) else None

    def pos(self) -> int:
        return self.items[self.i][1] if self.i < len(self.items) else len(self.line)

    def take(self, expected: str) -> tuple[str, int]:
        if self.i >= len(self.items):
            raise ParseError("unexpected end of line", len(self.line), expected)
        tok = self.items[self.i]
        self.i += 1
        return tok

    def choice(self, options: tuple[str, ...]) -> str:
        tok, pos = self.take("|".join(options))
        if tok.lower() not in options:
            raise ParseError(f"unknown keyword {tok!r}", pos, "|".join(options))
        return tok.lower()

    def rest(self) -> list[tuple[str, int]]:
        out = self.items[self.i :]
        self.i = len(self.items)
        return out

    def rest_text(self) -> str:
        if self.i >= len(self.items):
            return ""
        start = self.items[self.i][1]
        self.i = len(self.items)
        return self.line[start:]

    def done(self) -> None:
        if self.i < len(self.items):
            tok, pos = self.items[self.i]
            raise ParseError(f"unexpected {tok!r}", pos, "end of line")


def _number(tok: str, pos: int, what: str, hex_default: bool = False) -> int:
    try:
        if tok.lower().startswith("0x"):
            return int(tok[2:], 16)
        return int(tok, 16 if hex_default else 10)
    except ValueError:
        raise ParseError(f"bad {what} {tok!r}", pos, what) from None


def _hexbytes(parts: list[tuple[str, int]], what: str) -> bytes:
    out = bytearray()
    for tok, pos in parts:
        m = _HEX_RE.match(tok)
        if not m or len(m.group(1)) % 2:
            raise ParseError(f"bad hex {tok!r}", pos, what)
        out += bytes.fromhex(m.group(1))
    return bytes(out)


def _mac(tok: str, pos: int) -> str:
    try:
        return format_mac(parse_mac(tok))
    except CoreError:
        raise ParseError(f"malformed MAC {tok!r}", pos, "aa:bb:cc:dd:ee:ff") from None


def parse_command(line: str) -> Command:
    t = _Tokens(line)
    word, pos = t.take("a command")
    verb = word.lower()
    if verb == "connect":
        cmd = Connect(_mac(*t.take("<mac>")))
    elif verb == "info":
        t.choice(("connections",))
        cmd = InfoConnections()
    elif verb == "readmem":
        addr = _number(*t.take("<addr>"), "address")
        length = _number(*t.take("<len>"), "length")
        if length <= 0:
            raise ParseError("length must be positive", t.items[t.i - 1][1], "<len> > 0")
        cmd = ReadMem(addr, length)
    elif verb == "writemem":
        addr = _number(*t.take("<addr>"), "address")
        if t.peek() is None:
            raise ParseError("missing data", t.pos(), "<hexbytes>")
        data = _hexbytes(t.rest(), "<hexbytes>")
        if not data:
            raise ParseError("empty data", t.pos(), "<hexbytes>")
        cmd = WriteMem(addr, data)
    elif verb == "searchmem":
        if t.peek() is None:
            raise ParseError("missing pattern", t.pos(), "<hexbytes|ascii:text>")
        if t.peek().lower().startswith("ascii:"):
            text = t.rest_text()[len("ascii:") :]
            if not text:
                raise ParseError("empty ascii pattern", len(line), "ascii:text")
            try:
                pattern = text.encode("ascii")
            except UnicodeEncodeError:
                raise ParseError("pattern is not ASCII", len(line) - len(text), "ascii:text") from None
            cmd = SearchMem(pattern, True)
        else:
            pattern = _hexbytes(t.rest(), "<hexbytes>")
            if not pattern:
                raise ParseError("empty pattern", t.pos(), "<hexbytes>")
            cmd = SearchMem(pattern)
    elif verb == "launch":
        cmd = Launch(_number(*t.take("<addr>"), "address"))
    elif verb == "patchrom":
        addr = _number(*t.take("<addr>"), "address")
        word = _number(*t.take("<word>"), "word")
        if word > 0xFFFFFFFF:
            raise ParseError("word does not fit 32 bits", t.items[t.i - 1][1], "<word>")
        cmd = PatchRom(addr, word)
    elif verb == "loadhcd":
        text = t.rest_text().strip()
        if not text:
            raise ParseError("missing path", len(line), "<path>")
        cmd = LoadHcd(text)
    elif verb == "sendhci":
        if t.peek() is None:
            raise ParseError("missing packet", t.pos(), "<hexbytes>")
        data = _hexbytes(t.rest(), "<hexbytes>")
        if len(data) < 3:
            raise ParseError("an HCI command is at least 3 bytes", pos, "opcode, length, params")
        cmd = SendHci(data)
    elif verb == "sendlmp":
        fuzz = False
        if t.peek() == "--fuzz":
            t.take("--fuzz")
            fuzz = True
        tok, opos = t.take("<opcode>")
        opcode = _number(tok, opos, "opcode")
        if not 0 <= opcode < 128:
            raise ParseError(f"LMP opcode {opcode} outside 0..127", opos, "<opcode>")
        cmd = SendLmp(opcode, _hexbytes(t.rest(), "<hexpayload>"), fuzz)
    elif verb == "monitor":
        kind = t.choice(("hci", "lmp"))
        action = t.choice(("start", "stop"))
        path = None
        if t.peek() is not None:
            flag, fpos = t.take("--file")
            if flag != "--file":
                raise ParseError(f"unexpected {flag!r}", fpos, "--file")
            path = t.rest_text().strip()
            if not path:
                raise ParseError("missing path", len(line), "<path>")
        cmd = Monitor(kind, action, path)
    elif verb == "tp":
        action = t.choice(("add", "remove"))
        cmd = Tracepoint(action, _number(*t.take("<addr>"), "address"))
    elif verb == "scan":
        t.choice(("bpcs",))
        cmd = ScanBpcs()
    elif verb == "macfilter":
        action = t.choice(("add", "clear"))
        if action == "add" or t.peek() is not None:
            cmd = MacFilter(action, _mac(*t.take("<mac>")))
        else:
            cmd = MacFilter(action)
    elif verb == "demo":
        name = t.choice(("nino", "ecdh", "jammer"))
        cmd = Demo(name, tuple(tok for tok, _ in t.rest()))
    elif verb == "reset":
        cmd = Reset()
    elif verb in ("help", "?"):
        cmd = Help()
    elif verb in ("quit", "exit"):
        cmd = Quit()
    else:
        raise ParseError(f"unknown command {word!r}", pos, "a command, try help")
    t.done()
    return cmd


def format_command(cmd: Command) -> str:
    """Canonical text for a command; parse_command reads it back unchanged."""
    match cmd:
        case Connect(mac):
            return f"connect {mac}"
        case InfoConnections():
            return "info connections"
        case ReadMem(a, n):
            return f"readmem {a:#x} {n}"
        case WriteMem(a, data):
            return f"writemem {a:#x} {data.hex()}"
        case SearchMem(p, True):
            return f"searchmem ascii:{p.decode('ascii')}"
        case SearchMem(p, False):
            return f"searchmem {p.hex()}"
        case Launch(a):
            return f"launch {a:#x}"
        case PatchRom(a, w):
            return f"patchrom {a:#x} {w:#x}"
        case LoadHcd(path):
            return f"loadhcd {path}"
        case SendHci(data):
            return f"sendhci {data.hex()}"
        case SendLmp(op, payload, fuzz):
            parts = ["sendlmp"] + (["--fuzz"] if fuzz else []) + [str(op)] + ([payload.hex()] if payload else [])
            return " ".join(parts)
        case Monitor(kind, action, path):
            return f"monitor {kind} {action}" + (f" --file {path}" if path else "")
        case Tracepoint(action, a):
            return f"tp {action} {a:#x}"
        case ScanBpcs():
            return "scan bpcs"
        case MacFilter(action, mac):
            return f"macfilter {action}" + (f" {mac}" if mac else "")
        case Demo(name, args):
            return " ".join(("demo", name) + args)
        case Reset():
            return "reset"
        case Help():
            return "help"
        case Quit():
            return "quit"
    raise TypeError(f"not a command: {cmd!r}")


# -- rendering ---------------------------------------------------------------------------


def hexdump(data: bytes, address: int = 0) -> list[str]:
    lines = []
    for off in range(0, len(data), 16):
        row = data[off : off + 16]
        hexpart = " ".join(f"{b:02x}" for b in row).ljust(47)
        text = "".join(chr(b) if 0x20 <= b < 0x7F else "." for b in row)
        lines.append(f"{address + off:08x}: {hexpart}  |{text}|")
    return lines


def _register_pairs() -> list[tuple[str, ...]]:
    # two per row as the tracepoint dump prints them; r10 sits alone so the
    # last row pairs r11 with r12
    g = [("pc", "lr"), ("sp", "cpsr")]
    g += [(f"r{i}", f"r{i + 1}") for i in range(0, 10, 2)]
    return g + [("r10",), ("r11", "r12")]


def render_registers(regs: dict[str, int]) -> list[str]:
    out = []
    for row in _register_pairs():
        cells = [f"{(name + ':').ljust(5)}{regs.get(name, 0):#010x}" for name in row]
        if len(cells) == 2:
            cells[1] = f"{row[1] + ':':<6}{regs.get(row[1], 0):#010x}"
        out.append("    " + "\t".join(cells))
    return out


def render_crash(dump: CrashDump) -> list[str]:
    what = dump.reason.name.lower().replace("_", " ")
    return [f"[!] Controller crashed ({what}), fault address {dump.fault:#010x}:"] + render_registers(
        dump.registers
    ) + ["[!] The chip is unresponsive until `reset`."]


def render_hit(hit: TracepointHit) -> list[str]:
    return [f"[*] Tracepoint {hit.address:#x} was hit and deactivated:"] + render_registers(hit.registers) + [
        f"    memory: {len(hit.memory)} bytes from {hit.memory_start:#x}"
    ]


def render_packet(packet: hci.HciPacket) -> str:
    text = hci.describe_packet(packet)
    head, _, params = text.rpartition(" ")
    if len(params) > 2 * HEX_PREVIEW:
        params = params[: 2 * HEX_PREVIEW] + "..."
    return f"[HCI] {head} {params}".rstrip()


def render_lmp(rec: LmpCaptureRecord) -> str:
    direction = "RX" if rec.direction == 0 else "TX"
    try:
        text = lmp.describe(lmp.decode_pdu(rec.pdu_bytes)).text
    except lmp.LmpError as exc:
        text = f"undecodable ({exc})"
    return f"[LMP {direction} {rec.connection_handle:#06x}] {text}"


# -- history -------------------------------------------------------------------------------


class History:
    def __init__(self, path: str | Path | None, limit: int = HISTORY_LIMIT):
        self.path = Path(path).expanduser() if path else None
        self.limit = limit
        self.entries: list[str] = []
        if self.path is not None and self.path.exists():
            self.entries = self.path.read_text().splitlines()[-limit:]

    def add(self, line: str) -> None:
        line = line.strip()
        if not line or (self.entries and self.entries[-1] == line):
            return
        self.entries.append(line)
        del self.entries[: -self.limit]
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("\n".join(self.entries) + "\n")

    def previous(self, steps: int = 1) -> str | None:
        if steps <= 0 or steps > len(self.entries):
            return None
        return self.entries[-steps]


# -- REPL -------------------------------------------------------------------------------------


class Repl:
    def __init__(self, session: Session, out: TextIO | None = None, history: History | None = None,
                 seed: int = 0):
        self.session = session
        self.out = out or sys.stdout
        self.history = history or History(None)
        self.seed = seed
        self._print_lock = threading.Lock()
        self._hci_monitor: Callable | None = None
        self._hci_file: HciCaptureSink | None = None
        self._lmp_printer: Callable | None = None
        self._lmp_file: LmpCaptureSink | None = None
        session.add_crash_observer(lambda dump: self.emit(render_crash(dump)))
        session.add_tracepoint_observer(lambda hit: self.emit(render_hit(hit)))

    def emit(self, lines: str | list[str]) -> None:
        if isinstance(lines, str):
            lines = [lines]
        with self._print_lock:
            for line in lines:
                self.out.write(line + "\n")
            self.out.flush()

    # one command; False ends the loop
    def execute(self, line: str) -> bool:
        line = line.strip()
        if not line or line.startswith("#"):
            return True
        self.history.add(line)
        try:
            cmd = parse_command(line)
        except ParseError as exc:
            self.emit(f"parse error: {exc}")
            return True
        if isinstance(cmd, Quit):
            return False
        try:
            result = self.dispatch(cmd)
        except TransportError:
            raise
        except ChipCrashed:
            result = ["error: the controller crashed; run `reset`"]
        except (CoreError, ControllerError, security.SecurityError, hci.HciError, lmp.LmpError,
                OSError, ValueError, ProfileError) as exc:
            result = [f"error: {exc}"]
        self.session.flush()
        if self.session.crashed and not isinstance(cmd, Reset) and not result:
            result = ["the controller is crashed; run `reset`"]
        self.emit(result)
        return True

    def run(self, lines) -> int:
        try:
            for line in lines:
                if not self.execute(line):
                    break
        except TransportError as exc:
            self.emit(f"transport lost: {exc}")
            return 1
        finally:
            self.stop_monitors()
        return 0

    def stop_monitors(self) -> None:
        if self._hci_monitor is not None:
            self.session.remove_packet_observer(self._hci_monitor)
            self._hci_monitor = None
        if self._hci_file is not None:
            self._hci_file.close()
            self._hci_file = None
        if self._lmp_file is not None:
            self.session.flush()
            self._lmp_file.close()
            self._lmp_file = None

    def _established(self) -> int:
        for conn in self.session.connections():
            if conn.state.name == "ESTABLISHED":
                return conn.handle
        raise CoreError("no established connection; use connect first")

    def dispatch(self, cmd: Command) -> list[str]:
        s = self.session
        match cmd:
            case Connect(mac):
                conn = s.connect(mac)
                return [f"connection {conn.handle:#06x} to {format_mac(conn.peer_mac)}: {conn.state.name.title()}"]
            case InfoConnections():
                rows = ["handle  peer               state        role    version"]
                for c in s.connections():
                    v = f"{c.peer_version[0]}/{c.peer_version[2]}" if c.peer_version else "-"
                    rows.append(f"{c.handle:#06x}  {format_mac(c.peer_mac)}  {c.state.name.title():<11}  "
                                f"{c.role.name.lower():<6}  {v}")
                return rows if len(rows) > 1 else ["no connections"]
            case ReadMem(a, n):
                return hexdump(s.read_memory(a, n), a)
            case WriteMem(a, data):
                res = s.write_memory(a, data, verify=True)
                msg = f"wrote {len(data)} bytes at {a:#x}"
                return [msg + (f" ({res.note})" if res.note else "")]
            case SearchMem(pattern, _):
                hits = s.search_memory(pattern)
                return [f"{h:#010x}" for h in hits] or ["no match"]
            case Launch(a):
                s.launch(a)
                return [f"launched {a:#x}"]
            case PatchRom(a, w):
                slot = s.patch_rom(a, w)
                return [f"patched {a:#x} -> {w:#010x} (slot {slot})"]
            case LoadHcd(path):
                return [f"loaded {s.load_hcd(path)} records from {path}"]
            case SendHci(data):
                packet = hci.decode_packet(data, hci.Direction.HOST_TO_CONTROLLER)
                return [render_packet(e) for e in s.send_raw(packet)]
            case SendLmp(op, payload, fuzz):
                handle = self._established()
                result = s.send_lmp_raw(handle, bytes([op << 1]) + payload, fuzz)
                return [f"LMP {op} to {handle:#06x}: {result.value}"]
            case Monitor(kind, action, path):
                return self._monitor(kind, action, path)
            case Tracepoint("add", a):
                s.add_tracepoint(a)
                return [f"tracepoint at {a:#x} armed"]
            case Tracepoint(_, a):
                s.remove_tracepoint(a)
                return [f"tracepoint at {a:#x} removed"]
            case ScanBpcs():
                handle = self._established()
                r = s.scan_bpcs(handle)
                return [f"BPCS scan on {handle:#06x}: version {r.version_text}, {r.verdict.value}"]
            case MacFilter("add", mac):
                s.add_mac_filter(mac)
                return [f"MAC filter allows {', '.join(sorted(format_mac(m) for m in s.mac_filter[1]))}"]
            case MacFilter(_, mac):
                s.remove_mac_filter(mac)
                return ["MAC filter cleared" if mac is None or s.mac_filter is None else f"removed {mac}"]
            case Demo(name, args):
                return self._demo(name, args)
            case Reset():
                s.reset()
                self._hci_monitor_file_reset()
                return ["controller reset"]
            case Help():
                return GRAMMAR.splitlines()
        raise CoreError(f"unhandled command {cmd!r}")

    def _hci_monitor_file_reset(self) -> None:
        # the LMP hooks died with the reset; keep the HCI capture going
        if self._lmp_file is not None:
            self._lmp_file.close()
            self._lmp_file = None
        self._lmp_printer = None

    def _monitor(self, kind: str, action: str, path: str | None) -> list[str]:
        s = self.session
        if kind == "hci":
            if action == "start":
                if self._hci_monitor is None:
                    def show(packet, _ts):
                        s.defer(self.emit, render_packet(packet))
                    self._hci_monitor = show
                    s.add_packet_observer(show)
                if path:
                    if self._hci_file is not None:
                        self._hci_file.close()
                    self._hci_file = HciCaptureSink(path, s)
                return ["HCI monitor on" + (f", writing {path}" if path else "")]
            if self._hci_monitor is not None:
                s.remove_packet_observer(self._hci_monitor)
                self._hci_monitor = None
            if self._hci_file is not None:
                self._hci_file.close()
                self._hci_file = None
            return ["HCI monitor off"]
        if action == "start":
            if self._lmp_printer is None:
                self._lmp_printer = lambda rec: self.emit(render_lmp(rec))
                s.install_lmp_monitor(self._lmp_printer)
            if path:
                if self._lmp_file is not None:
                    s.remove_lmp_monitor(self._lmp_file)
                    self._lmp_file.close()
                self._lmp_file = LmpCaptureSink(path, s)
                s.install_lmp_monitor(self._lmp_file)
            return ["LMP monitor on" + (f", writing {path}" if path else "")]
        s.remove_lmp_monitor()
        self._lmp_printer = None
        if self._lmp_file is not None:
            s.flush()
            self._lmp_file.close()
            self._lmp_file = None
        return ["LMP monitor off"]

    def _demo(self, name: str, args: tuple[str, ...]) -> list[str]:
        s = self.session
        if name == "nino":
            peer = security.IoCapability.DISPLAY_YES_NO
            if args:
                labels = {c.label.lower(): c for c in security.IoCapability}
                if args[0].lower() not in labels:
                    raise ValueError(f"unknown IO capability {args[0]!r}")
                peer = labels[args[0].lower()]
            before = security.simulate_pairing(s, peer)
            security.nino_override(s)
            after = security.simulate_pairing(s, peer)
            strict = security.simulate_pairing(s, peer, peer_enforces_consistency=True)
            at = s.profile.layout.io_capability
            return [
                f"before: advertise {before.advertised.label}, {before.model.value}",
                f"wrote 03 to {at:#x}; readback {s.read_memory(at, 1).hex()}",
                f"after: advertise {after.advertised.label}, {after.model.value}, "
                f"user confirmation {'required' if after.user_confirmation else 'skipped'}, {after.result.value}",
                f"consistency-checking peer: {strict.result.value}",
            ]
        if name == "ecdh":
            trials = int(args[0]) if args else 10_000
            rows = []
            for parity, validates in (("random", False), ("even", False), ("random", True)):
                r = security.invalid_curve_experiment(trials, parity, validates, seed=self.seed)
                rows.append(r.table().splitlines()[1])
            return ["curve     parity  validates  trials  successes  rate"] + rows
        handle = int(args[0], 0) if args else self._established()
        outcome = security.jammer_sequence(s, handle)
        lines = []
        for i, (step, got) in enumerate(zip(security.JAMMER_STEPS, outcome.replies), start=1):
            seen = ", ".join(lmp.describe(p).text for p in got) or "no reply"
            lines.append(f"step {i}: sendlmp {'--fuzz ' if step.fuzz else ''}{step.opcode} {step.payload.hex()} -> {seen}")
        if outcome.victim_mode is None:
            lines.append("victim state not observable over this transport")
        else:
            p = outcome.test_params
            lines.append(f"victim: {outcome.victim_mode.value}, AFH mode {outcome.afh.mode}")
            if p is not None:
                hop = "single frequency" if p.single_frequency else "hopping"
                lines.append(f"victim transmits {hop} at {outcome.frequency_mhz} MHz")
        return lines


# -- entry point --------------------------------------------------------------------------------


def _build_session(args) -> tuple[Session, list[Controller], object]:
    if args.transport == "tcp":
        return Session.remote(args.profile, args.host, args.snoop_port, args.inject_port), [], None
    air = Air()
    session = Session.simulated(args.profile, args.mac, air)
    peers = []
    for spec in args.peer or [DEFAULT_PEER]:
        mac, _, prof = spec.partition("=")
        peers.append(Controller(load_profile(prof or "bcm4339"), parse_mac(mac), air))
    bridge = None
    if args.serve:
        bridge = run_bridge(session, args.snoop_port, args.inject_port)
    return session, peers, bridge


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="bluepatch", description="Broadcom controller research shell")
    ap.add_argument("--profile", default="bcm4339", help="controller profile name or JSON path")
    ap.add_argument("--transport", choices=("sim", "tcp"), default="sim")
    ap.add_argument("--host", default="127.0.0.1", help="bridge host for the tcp transport")
    ap.add_argument("--snoop-port", type=int, default=8872)
    ap.add_argument("--inject-port", type=int, default=8873)
    ap.add_argument("--serve", action="store_true", help="expose the simulated chip on the bridge ports")
    ap.add_argument("--script", help="run commands from a file instead of a prompt")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--history", default=None, help=f"history file (default ${HISTORY_ENV} or {DEFAULT_HISTORY})")
    ap.add_argument("--mac", default="00:1a:7d:da:71:0a", help="MAC of the simulated local chip")
    ap.add_argument("--peer", action="append", help="simulated peer as MAC=profile (repeatable)")
    args = ap.parse_args(argv)

    try:
        session, _peers, bridge = _build_session(args)
    except (CoreError, ProfileError, BindFailure) as exc:
        print(f"bluepatch: {exc}", file=sys.stderr)
        return 2

    history_path = args.history or os.environ.get(HISTORY_ENV)
    if history_path is None and not args.script:
        history_path = DEFAULT_HISTORY
    repl = Repl(session, history=History(history_path), seed=args.seed)
    try:
        if args.script:
            with open(args.script) as fh:
                return repl.run(fh)
        return repl.run(_interactive(repl.history))
    finally:
        if bridge is not None:
            bridge.close()
        session.close()


def _interactive(history: History):
    try:
        import readline
    except ImportError:  # pragma: no cover - platform without readline
        readline = None
    if readline is not None:
        readline.clear_history()
        for entry in history.entries:
            readline.add_history(entry)
    while True:
        try:
            yield input(PROMPT)
        except EOFError:
            print()
            return
        except KeyboardInterrupt:
            print()


if __name__ == "__main__":
    sys.exit(main())
