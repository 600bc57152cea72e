"""Acceptance criteria 1-10, each timed against its limit.

Every test prints one PASS/FAIL line; the lines are also collected and shown
in the terminal summary at the end of the run.
"""

import io
import socket
import struct
import threading
import time
from contextlib import contextmanager, redirect_stdout

import numpy as np
import pytest

from bluepatch import capture, cli, hcd, hci, lmp, security, tracer
from bluepatch.capture import Bridge, Dialect, SnoopHeader, SnoopRecord
from bluepatch.core import HciCaptureSink, LmpCaptureSink, NoSuchConnection, ScanVerdict, Session
from bluepatch.hcd import PatchramEntry
from bluepatch.hci import Direction, HciCommand, HciEvent, Status
from bluepatch.lmp import LmpPdu
from bluepatch.sim.controller import Air, ConnState, Controller, Mode, TraceKind, TxResult
from bluepatch.sim.memory import Memory, MemoryRegion, Patchram, PatchramLayout, RegionKind, SlotOutOfRange
from bluepatch.sim.profile import builtin_profiles, load_profile

from conftest import ACCEPTANCE, ATTACKER_MAC, DATA, GOLDEN, VICTIM_MAC, read_hex
from oracles import check_scalar_mult_exhaustively, patched_image, unwhiten


@contextmanager
def criterion(number: int, title: str, limit: float):
    t0 = time.perf_counter()
    ok = False
    try:
        yield
        ok = True
    finally:
        elapsed = time.perf_counter() - t0
        in_time = elapsed < limit
        verdict = "PASS" if ok and in_time else "FAIL"
        line = f"criterion {number:>2} {verdict}  {title}  ({elapsed:.2f} s, limit {limit:g} s)"
        ACCEPTANCE.append(line)
        print(line)
    assert in_time, f"criterion {number} took {elapsed:.2f} s, limit {limit} s"


def _complete(events):
    return [hci.parse_command_complete(e) for e in events if e.event_code == hci.EventCode.COMMAND_COMPLETE]


def _linked(victim_profile: str):
    """Attacker chip plus a victim chip, already connected; returns the
    victim controller and its side of the link."""
    air = Air()
    victim = Controller(load_profile(victim_profile), VICTIM_MAC, air)
    attacker = Controller(load_profile("bcm4339"), ATTACKER_MAC, air)
    attacker.handle_hci_command(HciCommand(hci.CREATE_CONNECTION, bytes(reversed(victim.mac))))
    (conn,) = victim.connections.values()
    return victim, conn


# -- 1 ----------------------------------------------------------------------------------


def test_criterion_01_memory_map():
    with criterion(1, "memory map fidelity", 1.0):
        prof = load_profile("bcm4339")
        assert [(r.start, r.size, r.kind) for r in prof.regions] == [
            (0x000000, 0x90000, RegionKind.ROM),
            (0x0D0000, 0x8000, RegionKind.RAM),
            (0x200000, 0x28000, RegionKind.RAM),
            (0x260000, 0x8000, RegionKind.ROM),
            (0x310000, 0x400, RegionKind.IO),
        ]
        ctrl = Controller(prof)
        for r in prof.regions:
            for at in (r.start, r.end - 16):
                (cc,) = _complete(ctrl.handle_hci_command(hci.build_vendor_command(hci.ReadRam(at, 16))))
                assert cc.status == Status.SUCCESS and len(cc.payload) == 16
        ctrl.handle_hci_command(hci.build_vendor_command(hci.ReadRam(0x100000, 4)))
        assert ctrl.mode is Mode.CRASHED


# -- 2 ----------------------------------------------------------------------------------


def test_criterion_02_patchram():
    with criterion(2, "patchram semantics", 10.0):
        rng = np.random.default_rng(2)
        prof = load_profile("bcm4339")
        ctrl = Controller(prof)
        rom = ctrl.memory.read_raw(0, 0x90000)
        live: dict[int, tuple[int, int]] = {}
        for _ in range(500):
            slot = int(rng.integers(0, 128))
            addr = 4 * int(rng.integers(0, 0x90000 // 4))
            value = int(rng.integers(0, 2**32))
            ctrl.apply_patchram([PatchramEntry(slot, addr, value)])
            live[slot] = (addr, value)
            assert ctrl.memory.read_u32(0xD0000 + 4 * slot) == value
            assert ctrl.memory.read_u32(0x310000 + 4 * slot) == addr
            winner = min(s for s, (a, _) in live.items() if a == addr)
            assert ctrl.read_view(addr, 4) == struct.pack("<I", live[winner][1])
        assert ctrl.memory.read_raw(0, 0x90000) == rom
        assert ctrl.read_view(0, 0x90000) == patched_image(rom, live)
        with pytest.raises(SlotOutOfRange):
            ctrl.apply_patchram([PatchramEntry(128, 0, 0)])
        ctrl.reset()
        assert ctrl.read_view(0, 0x90000) == rom
        assert ctrl.patchram.enabled_slots() == []

        # 64 kB image against the byte-wise oracle, many random patch sets
        image = rng.integers(0, 256, 0x10000, dtype=np.uint8).tobytes()
        regions = [
            MemoryRegion(0x0, 0x10000, RegionKind.ROM, "rom"),
            MemoryRegion(0x20000, 0x400, RegionKind.RAM, "values"),
            MemoryRegion(0x30000, 0x400, RegionKind.IO, "io"),
        ]
        for _ in range(40):
            mem = Memory(regions, {0: image})
            pr = Patchram(mem, PatchramLayout(0x20000, 0x30000, 0x30300, 128))
            patches = {}
            for slot in rng.choice(128, size=int(rng.integers(1, 128)), replace=False):
                addr = 4 * int(rng.integers(0, 0x4000))
                value = int(rng.integers(0, 2**32))
                pr.apply(int(slot), addr, value)
                patches[int(slot)] = (addr, value)
            want = patched_image(image, patches)
            assert pr.read_view(0, 0x10000) == want
            for _ in range(50):
                s = int(rng.integers(0, 0x10000 - 16))
                n = int(rng.integers(1, 16))
                assert pr.read_view(s, n) == want[s : s + n]


# -- 3 ----------------------------------------------------------------------------------

N_FUZZ = 10_000


def _blob(rng, lo, hi):
    return rng.bytes(int(rng.integers(lo, hi + 1)))


def test_criterion_03_format_roundtrips():
    with criterion(3, "format round-trips", 30.0):
        rng = np.random.default_rng(3)

        # golden vectors
        tlv = read_hex("patchram_tlv.hex")
        assert tlv == bytes.fromhex("080f0000f4f3030044332211000000000000")
        assert hcd.encode_patchram_block([PatchramEntry(0, 0x3F3F4, 0x11223344)]) == tlv
        raw_hcd = read_hex("sample.hcd.hex")
        assert hcd.serialize_hcd(hcd.parse_hcd(raw_hcd)) == raw_hcd
        assert hci.encode_command(HciCommand(0)) == bytes(3)
        assert hci.encode_command(hci.build_vendor_command(hci.LaunchRam(0xFFFFFFFF))) == bytes.fromhex("4efc04ffffffff")
        assert hci.build_vendor_command(hci.WriteRam(0x200000, bytes.fromhex("deadbeef"))).params == bytes.fromhex(
            "00002000deadbeef")
        assert hci.build_vendor_command(hci.ReadRam(0xD0000, 32)).params == bytes.fromhex("00000d0020")
        assert hci.parse_command_complete(
            hci.decode_packet(bytes.fromhex("0e04014dfc00"), Direction.CONTROLLER_TO_HOST)).status == 0
        assert lmp.encode_pdu(LmpPdu(1, 0, b"\x95")) == bytes.fromhex("0195")
        assert lmp.encode_pdu(LmpPdu(0, 4, b"\x00\x02")) == bytes.fromhex("080002")
        assert lmp.encode_pdu(LmpPdu(0, 60, bytes(15)))[0] == 0x78
        assert SnoopHeader().encode() == bytes.fromhex("6274736e6f6f700000000001000003ea")
        assert SnoopHeader(Dialect.RFC1761, 1001).encode() == bytes.fromhex("736e6f6f7000000000000002000003e9")

        for _ in range(N_FUZZ):
            # HCI
            cmd = HciCommand(int(rng.integers(0, 0x10000)), _blob(rng, 0, 255))
            assert hci.decode_packet(hci.encode_command(cmd), Direction.HOST_TO_CONTROLLER) == cmd
            evt = HciEvent(int(rng.integers(0, 0x100)), _blob(rng, 0, 255))
            assert hci.decode_packet(hci.encode_event(evt), Direction.CONTROLLER_TO_HOST) == evt

            # LMP
            op = int(rng.integers(0, 128))
            ext = int(rng.integers(0, 256)) if op in lmp.ESCAPE_OPCODES else None
            pdu = LmpPdu(int(rng.integers(0, 2)), op, _blob(rng, 0 if ext is not None else 0, 30), ext)
            wire = lmp.encode_pdu(pdu)
            assert wire[0] == (op << 1) | pdu.tid
            assert lmp.decode_pdu(wire) == pdu

            # HCD
            records = [HciCommand(int(rng.integers(0, 0x10000)), _blob(rng, 0, 64))
                       for _ in range(int(rng.integers(0, 5)))]
            raw = b"".join(hci.encode_command(r) for r in records)
            parsed = hcd.parse_hcd(raw)
            assert parsed.records == records and hcd.serialize_hcd(parsed) == raw

            # Patchram TLV
            slots = rng.choice(256, size=int(rng.integers(1, 5)), replace=False)
            entries = [PatchramEntry(int(s), 4 * int(rng.integers(0, 2**30)), int(rng.integers(0, 2**32)),
                                     rng.bytes(2), rng.bytes(4)) for s in slots]
            block = hcd.encode_patchram_block(entries)
            assert len(block) == 18 * len(entries)
            assert hcd.decode_patchram_block(block) == entries

            # snoop, both dialects
            bt = [SnoopRecord(_blob(rng, 0, 40), None, int(rng.integers(0, 4)), int(rng.integers(0, 2**32)),
                              int(rng.integers(-(2**62), 2**62))) for _ in range(int(rng.integers(0, 4)))]
            header = SnoopHeader(Dialect.BTSNOOP, int(rng.integers(0, 2**32)))
            assert capture.read_capture(capture.encode_capture(header, bt)) == (header, bt)
            rf = [SnoopRecord(_blob(rng, 0, 40), None, 0, int(rng.integers(0, 2**32)),
                              int(rng.integers(0, 2**32)) * 1_000_000 + int(rng.integers(0, 1_000_000)),
                              _blob(rng, 0, 6)) for _ in range(int(rng.integers(0, 4)))]
            header = SnoopHeader(Dialect.RFC1761, 1001)
            raw = capture.encode_capture(header, rf)
            assert capture.read_capture(raw) == (header, rf)


# -- 4 ----------------------------------------------------------------------------------


def test_criterion_04_bpcs_overflow():
    with criterion(4, "BPCS overflow reproduction", 10.0):
        snap = Controller(load_profile("bcm4339")).snapshot()
        result = tracer.run_trace(snap, bytes.fromhex("000a"))
        tail = result.trace[-3:]
        assert [e.kind for e in tail] == [TraceKind.BRANCH_ENTER, TraceKind.INVALID_MEMORY, TraceKind.CRASH]
        assert tail[0].address == 0x00000
        assert result.final_state is Mode.CRASHED

        # 0x95 over the air: victim armed, its host sees no HCI traffic for it
        air = Air()
        victim = Session.simulated("bcm4339", VICTIM_MAC, air)
        attacker = Session.simulated("bcm4339", ATTACKER_MAC, air)
        handle = attacker.connect(VICTIM_MAC).handle
        victim.flush()
        seen = []
        victim.add_packet_observer(lambda p, ts: seen.append(p))
        attacker.send_lmp(handle, 0, b"\x95", fuzz=True)
        victim.flush()
        assert victim.controller.mode is Mode.TEST_ARMED
        assert seen == []
        attacker.close()
        victim.close()

        # fixed profile: every out-of-range sub rejected, nothing crashes
        fixed, conn = _linked("bcm4339_fixed")
        for sub in range(6, 256):
            res = fixed.dispatch_lmp(conn, bytes([0, sub]))
            assert not res.crashed
            assert [r.opcode for r in res.responses] == [lmp.LMP_NOT_ACCEPTED]
        assert fixed.mode is Mode.NORMAL


# -- 5 ----------------------------------------------------------------------------------


def _jam(victim_profile, whitelist=None):
    air = Air()
    victim = Session.simulated(victim_profile, VICTIM_MAC, air)
    if whitelist is not None:
        victim.install_mac_filter(whitelist)
    attacker = Session.simulated("bcm4339", ATTACKER_MAC, air)
    handle = attacker.connect(VICTIM_MAC).handle
    try:
        return security.jammer_sequence(attacker, handle)
    finally:
        attacker.close()
        victim.close()


def test_criterion_05_jammer():
    with criterion(5, "remote jammer end to end", 5.0):
        first = _jam("bcm4339")
        assert first.victim_mode is Mode.TEST_RUNNING
        assert first.test_params.single_frequency
        assert 2402 <= first.frequency_mhz <= 2480
        assert unwhiten(bytes.fromhex("545575755555555255"))[2] + 2402 == first.frequency_mhz
        again = _jam("bcm4339")
        assert (again.victim_mode, again.afh, again.test_params) == (first.victim_mode, first.afh, first.test_params)
        with pytest.raises(security.StepFailed) as fixed:
            _jam("bcm4339_fixed")
        assert fixed.value.index == 2
        with pytest.raises(security.StepFailed) as filtered:
            _jam("bcm4339", whitelist={"aa:aa:aa:aa:aa:aa"})
        assert filtered.value.index == 1


# -- 6 ----------------------------------------------------------------------------------

TABLE_VERSIONS = {"bcm4331": (6, 8859), "bcm4339": (7, 24841), "bcm43430a1": (7, 8713), "bcm4345": (8, 24857)}


def test_criterion_06_scanner():
    with criterion(6, "BPCS scanner verdicts", 5.0):
        names = [n for n in builtin_profiles() if n != "broadcom_base"]
        assert set(TABLE_VERSIONS) <= set(names)
        for name in names:
            prof = load_profile(name)
            air = Air()
            Controller(prof, VICTIM_MAC, air)
            with Session.simulated("bcm4339", ATTACKER_MAC, air) as s:
                result = s.scan_bpcs(s.connect(VICTIM_MAC).handle)
            want = ScanVerdict.VULNERABLE if prof.vulnerable_bpcs else ScanVerdict.NOT_VULNERABLE
            assert result.verdict is want, name
            ver, _, sub = result.peer_version
            assert (ver, sub) == (prof.lmp_version, prof.lmp_subversion)
            if name in TABLE_VERSIONS:
                assert (ver, sub) == TABLE_VERSIONS[name]


# -- 7 ----------------------------------------------------------------------------------


def test_criterion_07_invalid_curve():
    with criterion(7, "invalid-curve ECDH experiment", 60.0):
        guarded = security.invalid_curve_experiment(10_000, "random", victim_validates=True, seed=7)
        assert guarded.successes == 0
        guarded_even = security.invalid_curve_experiment(10_000, "even", victim_validates=True, seed=7)
        assert guarded_even.successes == 0
        rand = security.invalid_curve_experiment(10_000, "random", seed=7)
        assert abs(rand.success_rate - 0.25) < 0.02
        even = security.invalid_curve_experiment(10_000, "even", seed=7)
        assert abs(even.success_rate - 0.50) < 0.02
        check_scalar_mult_exhaustively(security.scalar_mult)


# -- 8 ----------------------------------------------------------------------------------

SAFE_OPS = (3, 4, 37, 38, 39, 40)


def _random_pdu(rng) -> bytes:
    if rng.random() < 0.3:
        return bytes([0, int(rng.integers(0, 6))]) + _blob(rng, 0, 4)
    op = SAFE_OPS[int(rng.integers(0, len(SAFE_OPS)))]
    return bytes([op << 1]) + _blob(rng, 0, 40)


def test_criterion_08_monitor_completeness(tmp_path):
    with criterion(8, "monitor completeness and bridge stream", 30.0):
        rng = np.random.default_rng(8)
        air = Air()
        victim = Controller(load_profile("bcm4339"), VICTIM_MAC, air)
        session = Session.simulated("bcm4339", ATTACKER_MAC, air)
        handle = session.connect(VICTIM_MAC).handle
        (vconn,) = victim.connections.values()

        bridge = Bridge(session, 0, 0)
        sock = socket.create_connection(("127.0.0.1", bridge.out_port), timeout=10)
        stream = io.BytesIO()

        def drain():
            while chunk := sock.recv(65536):
                stream.write(chunk)

        reader = threading.Thread(target=drain)
        reader.start()
        deadline = time.monotonic() + 5
        while bridge.client_count < 1 and time.monotonic() < deadline:
            time.sleep(0.01)
        direct = HciCaptureSink(tmp_path / "direct.log", session)
        lmp_file = LmpCaptureSink(tmp_path / "lmp.log", session)
        session.install_lmp_monitor(lmp_file)
        ctrl = session.controller
        before = dict(ctrl.counters)

        dropped = sends = 0
        for _ in range(1000):
            raw = _random_pdu(rng)
            if rng.random() < 0.5:
                fuzz = bool(rng.random() < 0.2)
                sends += 1
                if session.send_lmp_raw(handle, raw, fuzz) is TxResult.SILENTLY_DROPPED:
                    dropped += 1
            else:
                victim.send_lmp_tx(vconn, raw, fuzz=True)
        session.flush()
        assert ctrl.mode is Mode.NORMAL and victim.mode is Mode.NORMAL

        expected = sum(ctrl.counters[k] - before[k] for k in ("dispatched", "sent", "dropped"))
        assert ctrl.counters["dropped"] - before["dropped"] == dropped > 0
        session.remove_lmp_monitor(lmp_file)
        lmp_file.close()
        _, lmp_records = capture.read_capture(tmp_path / "lmp.log")
        assert len(lmp_records) == expected

        direct.close()
        bridge.close()
        reader.join(timeout=10)
        sock.close()
        saved = tmp_path / "stream.log"
        saved.write_bytes(stream.getvalue())
        header, records = capture.read_capture(saved)
        assert header.dialect is Dialect.BTSNOOP and len(records) >= sends > 0
        assert saved.read_bytes() == (tmp_path / "direct.log").read_bytes()
        session.close()


# -- 9 ----------------------------------------------------------------------------------


def test_criterion_09_connection_expiry():
    with criterion(9, "failed connection expiry", 1.0):
        with Session.simulated("bcm4339", ATTACKER_MAC, Air()) as s:
            conn = s.connect("11:22:33:44:55:66")
            assert conn.state is ConnState.FAILED
            s.tick(29)
            assert [c.handle for c in s.connections()] == [conn.handle]
            assert s.send_lmp(conn.handle, lmp.LMP_VERSION_REQ, bytes(5)) is TxResult.SENT
            s.tick(2)
            assert s.connections() == []
            with pytest.raises(NoSuchConnection):
                s.send_lmp(conn.handle, lmp.LMP_VERSION_REQ, bytes(5))


# -- 10 ---------------------------------------------------------------------------------

PRODUCTIONS = [
    "connect de:ad:be:ef:00:00",
    "info connections",
    "readmem 0x200000 40",
    "writemem 0x201000 deadbeef",
    "searchmem ascii:needle",
    "searchmem dead",
    "launch 0x226000",
    "patchrom 0x1000 0x11223344",
    "loadhcd /tmp/patch.hcd",
    "sendhci 011000",
    "sendlmp --fuzz 0 95",
    "sendlmp 37 070f000961",
    "monitor hci start --file /tmp/hci.log",
    "monitor lmp stop",
    "tp add 0x3f3f4",
    "tp remove 0x3f3f4",
    "scan bpcs",
    "macfilter add 00:1a:7d:da:71:0a",
    "macfilter clear",
    "demo nino",
    "demo ecdh 1000",
    "demo jammer",
    "reset",
    "help",
    "quit",
]


def test_criterion_10_cli():
    with criterion(10, "CLI grammar and scripted session", 10.0):
        for line in PRODUCTIONS:
            cmd = cli.parse_command(line)
            assert cli.format_command(cmd) == line
            assert cli.parse_command(cli.format_command(cmd)) == cmd
        out = io.StringIO()
        with redirect_stdout(out):
            code = cli.main(["--script", str(DATA / "cli_session.txt"), "--seed", "0"])
        assert code == 0
        assert out.getvalue() == (GOLDEN / "cli_session.out").read_text()
        out2 = io.StringIO()
        with redirect_stdout(out2):
            cli.main(["--script", str(DATA / "cli_session.txt"), "--seed", "0"])
        assert out2.getvalue() == out.getvalue()
