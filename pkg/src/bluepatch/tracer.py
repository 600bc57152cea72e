"""Offline execution of LMP handlers from a captured controller state.

A snapshot is everything writable plus registers.  Feeding a PDU into a
controller rebuilt from it gives a deterministic basic-block trace, and the
BPCS fuzzer does that once per subcommand and argument variant.
"""

from __future__ import annotations

import base64
import enum
import json
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import lmp
from .sim.controller import (
    DEFAULT_STEP_BUDGET,
    ConnectionEntry,
    ConnState,
    Controller,
    ControllerSnapshot,
    Mode,
    Role,
    TraceEvent,
    TraceKind,
)
from .sim.memory import RegionKind
from .sim.profile import ControllerProfile

SNAPSHOT_FORMAT = "bluepatch-snapshot"
SNAPSHOT_VERSION = 1
ARG_VARIANTS: tuple[bytes, ...] = (b"", b"\x00", b"\x01", b"\x55", b"\xff")
SYNTHETIC_PEER = bytes.fromhex("0000c0ffee00")
SYNTHETIC_HANDLE = 0x000C


class TracerError(Exception):
    pass


class RangeMismatch(TracerError):
    pass


class SnapshotError(TracerError):
    pass


class Verdict(enum.Enum):
    CRASH = "Crash"
    STATE_CHANGE = "StateChange"
    ARG_SENSITIVE = "ArgSensitive"
    INERT = "Inert"


# -- snapshots ------------------------------------------------------------------


def snapshot_to_dict(snap: ControllerSnapshot) -> dict:
    return {
        "format": SNAPSHOT_FORMAT,
        "version": SNAPSHOT_VERSION,
        "profile": snap.profile,
        "registers": snap.registers,
        "base_mode": snap.base_mode,
        "mac": snap.mac.hex(),
        "memory": {
            f"{start:#x}": base64.b64encode(zlib.compress(data, 6)).decode()
            for start, data in sorted(snap.memory.items())
        },
    }


def snapshot_from_dict(d: dict) -> ControllerSnapshot:
    if d.get("format") != SNAPSHOT_FORMAT:
        raise SnapshotError("not a snapshot file")
    if d.get("version") != SNAPSHOT_VERSION:
        raise SnapshotError(f"unsupported snapshot version {d.get('version')}")
    try:
        memory = {int(k, 16): zlib.decompress(base64.b64decode(v)) for k, v in d["memory"].items()}
        return ControllerSnapshot(
            d["profile"], memory, {k: int(v) for k, v in d["registers"].items()},
            d.get("base_mode", Mode.NORMAL.value), bytes.fromhex(d.get("mac", "00" * 6)),
        )
    except (KeyError, ValueError, zlib.error) as exc:
        raise SnapshotError(f"corrupt snapshot: {exc}") from None


def save_snapshot(path: str | Path, snap: ControllerSnapshot) -> None:
    Path(path).write_text(json.dumps(snapshot_to_dict(snap)))


def load_snapshot(path: str | Path) -> ControllerSnapshot:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SnapshotError(f"{path}: {exc}") from None
    return snapshot_from_dict(data)


def snapshot_from_session(session, hit=None) -> ControllerSnapshot:
    """Pull a snapshot off a live chip over HCI.

    RAM comes from the tracepoint dump when one is given, so it reflects the
    instant of the hit; the remaining writable regions are read afterwards.
    """
    profile: ControllerProfile = session.profile
    memory: dict[int, bytes] = {}
    for r in profile.regions:
        if r.kind is RegionKind.ROM:
            continue
        if hit is not None and hit.memory_start <= r.start and r.end <= hit.memory_start + len(hit.memory):
            off = r.start - hit.memory_start
            memory[r.start] = bytes(hit.memory[off : off + r.size])
        else:
            memory[r.start] = session.read_memory(r.start, r.size)
    registers = dict(hit.registers) if hit is not None else dict(profile.layout.initial_registers)
    mac = b"\x00" * 6
    ctrl = session.controller
    if ctrl is not None:
        mac = ctrl.mac
    return ControllerSnapshot(profile.to_dict(), memory, registers, Mode.NORMAL.value, mac)


# -- tracing -----------------------------------------------------------------------


@dataclass
class TraceResult:
    trace: list[TraceEvent]
    final_state: Mode
    mem_dump: dict[int, bytes]
    responses: list[lmp.LmpPdu] = field(default_factory=list)
    crashed: bool = False
    budget_exceeded: bool = False
    state_hash: str = ""

    @property
    def crash_event(self) -> TraceEvent | None:
        for e in reversed(self.trace):
            if e.kind is TraceKind.CRASH:
                return e
        return None

    def lines(self) -> list[str]:
        return [str(e) for e in self.trace]


def _controller_for(snapshot: ControllerSnapshot, profile: ControllerProfile | None, budget: int,
                    handle: int | None) -> tuple[Controller, ConnectionEntry]:
    ctrl = Controller.from_snapshot(snapshot, profile, budget)
    if handle is not None:
        return ctrl, ctrl.connection(handle)
    for conn in ctrl.connections.values():
        if conn.state is ConnState.ESTABLISHED:
            return ctrl, conn
    # no live link in the snapshot: attach an unlinked peer, answers go nowhere
    conn = ConnectionEntry(SYNTHETIC_PEER, SYNTHETIC_HANDLE, ConnState.ESTABLISHED, 0.0, Role.SLAVE)
    while conn.handle in ctrl.connections:
        conn.handle += 1
    ctrl.connections[conn.handle] = conn
    ctrl._sync_connections()
    return ctrl, conn


def run_trace(snapshot: ControllerSnapshot, pdu: bytes | lmp.LmpPdu, *, profile: ControllerProfile | None = None,
              handle: int | None = None, budget: int = DEFAULT_STEP_BUDGET) -> TraceResult:
    """Deliver one PDU to a controller rebuilt from ``snapshot``."""
    raw = lmp.encode_pdu(pdu) if isinstance(pdu, lmp.LmpPdu) else bytes(pdu)
    if not raw:
        raise TracerError("empty PDU")
    ctrl, conn = _controller_for(snapshot, profile, budget, handle)
    result = ctrl.dispatch_lmp(conn, raw)
    return TraceResult(
        list(result.trace),
        ctrl.mode,
        ctrl.memory.dump(),
        list(result.responses),
        result.crashed,
        result.budget_exceeded,
        ctrl.state_hash(),
    )


# -- memory diffs ---------------------------------------------------------------------


@dataclass(frozen=True)
class DiffRange:
    start: int
    end: int
    old: bytes = field(default=b"", compare=False, repr=False)
    new: bytes = field(default=b"", compare=False, repr=False)

    @property
    def address(self) -> int:
        return self.start

    def __len__(self) -> int:
        return self.end - self.start

    def __str__(self) -> str:
        return f"{self.start:#x}-{self.end:#x}"


def diff_memory(before: dict[int, bytes], after: dict[int, bytes],
                exclude: Iterable[tuple[int, int]] = ()) -> list[DiffRange]:
    """Contiguous byte ranges that differ, minus the ``exclude`` windows."""
    if set(before) != set(after):
        raise RangeMismatch(f"dumps cover different regions: {sorted(before)} vs {sorted(after)}")
    out: list[DiffRange] = []
    for start in sorted(before):
        a, b = before[start], after[start]
        if len(a) != len(b):
            raise RangeMismatch(f"region {start:#x}: {len(a)} vs {len(b)} bytes")
        changed = np.frombuffer(a, np.uint8) != np.frombuffer(b, np.uint8)
        for lo, hi in exclude:
            s, e = max(lo - start, 0), min(hi - start, len(a))
            if s < e:
                changed[s:e] = False
        idx = np.flatnonzero(changed)
        if idx.size == 0:
            continue
        breaks = np.flatnonzero(np.diff(idx) > 1)
        firsts = np.concatenate(([idx[0]], idx[breaks + 1]))
        lasts = np.concatenate((idx[breaks], [idx[-1]]))
        out.extend(
            DiffRange(start + int(f), start + int(l) + 1, a[f : l + 1], b[f : l + 1])
            for f, l in zip(firsts.tolist(), lasts.tolist())
        )
    return out


# -- fuzzing ------------------------------------------------------------------------


@dataclass
class FuzzResult:
    sub: int
    verdict: Verdict
    steps: int
    crash: str | None = None
    changes: list[DiffRange] = field(default_factory=list)
    distinct_traces: int = 1

    def to_dict(self) -> dict:
        return {
            "sub": self.sub,
            "verdict": self.verdict.value,
            "steps": self.steps,
            "crash": self.crash,
            "changes": [[c.start, c.end] for c in self.changes],
            "distinct_traces": self.distinct_traces,
        }


@dataclass
class FuzzReport:
    results: list[FuzzResult]
    profile: str = ""

    def by_verdict(self, verdict: Verdict) -> list[int]:
        return [r.sub for r in self.results if r.verdict is verdict]

    def to_json(self) -> str:
        return json.dumps({"profile": self.profile, "results": [r.to_dict() for r in self.results]}, indent=1)

    def to_text(self) -> str:
        counts = {v: len(self.by_verdict(v)) for v in Verdict}
        head = ", ".join(f"{v.value} {n}" for v, n in counts.items())
        lines = [f"BPCS fuzz on {self.profile or 'snapshot'}: {head}", "sub   verdict       steps  detail"]
        for r in self.results:
            detail = r.crash or ", ".join(str(c) for c in r.changes[:3])
            if r.verdict is Verdict.ARG_SENSITIVE:
                detail = f"{r.distinct_traces} distinct traces"
            lines.append(f"{r.sub:#04x}  {r.verdict.value:<12} {r.steps:>6}  {detail}")
        return "\n".join(lines)


def classify(sub: int, runs: Sequence[TraceResult], baseline: dict[int, bytes],
             exclude: Iterable[tuple[int, int]]) -> FuzzResult:
    steps = max(len(r.trace) for r in runs)
    for r in runs:
        if r.crashed:
            ev = r.crash_event
            what = f"{ev.detail} at {ev.address:#07x}" if ev else "crash"
            return FuzzResult(sub, Verdict.CRASH, steps, crash=what)
    exclude = list(exclude)
    changes: list[DiffRange] = []
    for r in runs:
        for c in diff_memory(baseline, r.mem_dump, exclude):
            if c not in changes:
                changes.append(c)
    traces = {tuple(r.lines()) for r in runs}
    if changes:
        return FuzzResult(sub, Verdict.STATE_CHANGE, steps, changes=changes, distinct_traces=len(traces))
    if len(traces) > 1:
        return FuzzResult(sub, Verdict.ARG_SENSITIVE, steps, distinct_traces=len(traces))
    return FuzzResult(sub, Verdict.INERT, steps)


def fuzz_bpcs(snapshot: ControllerSnapshot, subs: Iterable[int] = range(256), *,
              variants: Sequence[bytes] = ARG_VARIANTS, workers: int | None = None,
              budget: int = DEFAULT_STEP_BUDGET, handle: int | None = None) -> FuzzReport:
    """Try every BPCS subcommand with a few trailing argument bytes.

    Each trial starts from the same snapshot, so results do not depend on
    order or on the worker count.
    """
    profile = ControllerProfile.from_dict(snapshot.profile)
    subs = [int(s) for s in subs]
    if any(not 0 <= s <= 0xFF for s in subs):
        raise TracerError("BPCS subcommands are single bytes")
    lay = profile.layout
    exclude = [(lay.lm_cur_cmd, lay.lm_cur_cmd + lay.lm_cur_cmd_size)]
    baseline_ctrl, _ = _controller_for(snapshot, profile, budget, handle)
    baseline = baseline_ctrl.memory.dump()
    head = bytes([lmp.BPCS << 1])

    def one(sub: int) -> FuzzResult:
        runs = [
            run_trace(snapshot, head + bytes([sub]) + v, profile=profile, handle=handle, budget=budget)
            for v in variants
        ]
        return classify(sub, runs, baseline, exclude)

    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, subs))
    else:
        results = [one(s) for s in subs]
    return FuzzReport(results, profile.name)
