import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bluepatch import core, hci, lmp
from bluepatch.capture import LmpDirection
from bluepatch.core import (
    AlreadyArmed,
    ChipCrashed,
    MalformedMac,
    NoFreeSlots,
    NoSuchConnection,
    NotRom,
    OutOfMap,
    ScanVerdict,
    Session,
    Unaligned,
    VerifyMismatch,
)
from bluepatch.sim.controller import Air, ConnState, Controller, Mode, TxResult
from bluepatch.sim.profile import builtin_profiles, load_profile

from conftest import ATTACKER_MAC, VICTIM_MAC


def count_commands(session):
    seen = []
    session.add_packet_observer(lambda p, ts: isinstance(p, hci.HciCommand) and seen.append(p))
    return seen


# -- memory ---------------------------------------------------------------------


def test_read_chunks_into_four_commands(session):
    sent = count_commands(session)
    data = session.read_memory(0x200000, 1000)
    assert len(data) == 1000
    assert len(sent) == -(-1000 // 251) == 4


def test_forced_unmapped_read_crashes(session):
    with pytest.raises(OutOfMap):
        session.read_memory(0x100000, 4)
    with pytest.raises(ChipCrashed) as exc:
        session.read_memory(0x100000, 4, force=True)
    assert exc.value.dump is not None
    assert session.controller.mode is Mode.CRASHED


def test_zero_length_read_sends_nothing(session):
    sent = count_commands(session)
    with pytest.raises(ValueError):
        session.read_memory(0x200000, 0)
    assert sent == []


def test_write_verify_ram_and_rom(session):
    assert session.write_memory(0x201000, b"\x01\x02\x03\x04", verify=True).note is None
    assert session.write_memory(0x1000, b"\xaa\xbb\xcc\xdd", verify=True).note == "no effect, use patch_rom"


def test_long_write_is_chunked(session):
    data = bytes(range(256)) * 2 + bytes(88)
    result = session.write_memory(0x201000, data)
    assert result.chunks == 3
    assert session.read_memory(0x201000, len(data)) == data


def test_verify_mismatch_on_io_that_does_not_hold(session, monkeypatch):
    orig = session.read_memory
    monkeypatch.setattr(session, "read_memory", lambda a, n, force=False: bytes(n))
    with pytest.raises(VerifyMismatch):
        session.write_memory(0x201000, b"\x01", verify=True)
    monkeypatch.setattr(session, "read_memory", orig)


@settings(max_examples=60)
@given(st.integers(0x200000, 0x225000 - 600), st.binary(min_size=1, max_size=600))
def test_ram_write_read_identity(address, data):
    with Session.simulated("bcm4339") as s:
        s.write_memory(address, data)
        assert s.read_memory(address, len(data)) == data


def test_search_memory_finds_ascii(session):
    session.write_memory(0x201234, b"needle!")
    assert 0x201234 in session.search_memory(b"needle!")


# -- patchram ----------------------------------------------------------------------


def test_patch_rom_slots(session):
    assert session.patch_rom(0x1000, 0x11223344) == 0
    assert session.read_memory(0x1000, 4) == bytes.fromhex("44332211")
    assert session.patch_rom(0x1004, 1) == 1
    with pytest.raises(NotRom):
        session.patch_rom(0x200000, 1)
    with pytest.raises(Unaligned):
        session.patch_rom(0x1002, 1)
    with pytest.raises(OutOfMap):
        session.patch_rom(0x100000, 1)


def test_slots_run_out_at_capacity(session):
    for i in range(128):
        assert session.patch_rom(0x8000 + 4 * i, i) == i
    with pytest.raises(NoFreeSlots):
        session.patch_rom(0x9000, 0)
    assert len(session.controller.patchram.enabled_slots()) == 128
    session.reset()
    assert session.patch_rom(0x9000, 0) == 0


def test_released_slot_is_reused(session):
    for i in range(3):
        session.patch_rom(0x2000 + 4 * i, i)
    session.release_slot(1)
    assert session.patch_rom(0x3000, 9) == 1


def test_load_hcd_applies_patch(session, tmp_path):
    from bluepatch.hcd import PatchramEntry, build_patch_hcd, write_hcd

    path = tmp_path / "p.hcd"
    write_hcd(path, build_patch_hcd([PatchramEntry(7, 0x3000, 0xDEADBEEF)], 0xD1000))
    session.load_hcd(path)
    assert session.read_memory(0x3000, 4) == bytes.fromhex("efbeadde")
    assert session.patch_rom(0x3004, 1) == 0
    assert 7 in session.controller.patchram.enabled_slots()


# -- connections --------------------------------------------------------------------


def test_connect_established_and_failed(pair):
    session, _ = pair
    ok = session.connect(VICTIM_MAC)
    assert ok.state is ConnState.ESTABLISHED
    bad = session.connect("11:22:33:44:55:66")
    assert bad.state is ConnState.FAILED
    assert session.send_lmp(bad.handle, lmp.LMP_VERSION_REQ, bytes(5)) is TxResult.SENT
    session.tick(31)
    with pytest.raises(NoSuchConnection):
        session.send_lmp(bad.handle, lmp.LMP_VERSION_REQ, bytes(5))
    with pytest.raises(MalformedMac):
        session.connect("de:ad:be")


# -- monitor and injection ----------------------------------------------------------


def test_monitor_sees_rx_version_req(linked):
    session, victim, handle = linked
    records = []
    session.install_lmp_monitor(records)
    (vconn,) = victim.connections.values()
    victim.send_lmp_tx(vconn, lmp.LmpPdu(0, lmp.LMP_VERSION_REQ, bytes(5)))
    session.flush()
    rx = [r for r in records if r.direction is LmpDirection.RX]
    assert lmp.decode_pdu(rx[0].pdu_bytes).opcode == 37


def test_monitor_sees_dropped_oversize(linked):
    session, _, handle = linked
    records = []
    session.install_lmp_monitor(records)
    assert session.send_lmp(handle, lmp.LMP_VERSION_REQ, bytes(32)) is TxResult.SILENTLY_DROPPED
    session.flush()
    assert [r.direction for r in records] == [LmpDirection.TX]
    session.remove_lmp_monitor()
    session.send_lmp(handle, lmp.LMP_VERSION_REQ, bytes(5))
    session.flush()
    assert len(records) == 1


def test_exploit_pdu_arms_victim(linked):
    session, victim, handle = linked
    assert session.send_lmp(handle, 0, bytes([0x95]), fuzz=True) is TxResult.SENT
    assert victim.mode is Mode.TEST_ARMED


def test_long_declared_content_needs_fuzz(linked):
    session, _, handle = linked
    payload = bytes([0x95]) + bytes(218)
    assert session.send_lmp(handle, 0, payload) is TxResult.SILENTLY_DROPPED
    assert session.send_lmp(handle, 0, payload, fuzz=True) is TxResult.SENT


def test_unknown_handle_rejected(session):
    with pytest.raises(NoSuchConnection):
        session.send_lmp(0x0FFF, 37, bytes(5))


# -- tracepoints -------------------------------------------------------------------


def test_tracepoint_fires_once(linked):
    session, victim, _ = linked
    hits = []
    session.add_tracepoint_observer(hits.append)
    session.add_tracepoint(0x3F3F4)
    (vconn,) = victim.connections.values()
    victim.send_lmp_tx(vconn, lmp.LmpPdu(0, lmp.LMP_VERSION_REQ, bytes(5)))
    victim.send_lmp_tx(vconn, lmp.LmpPdu(0, lmp.LMP_VERSION_REQ, bytes(5)))
    session.flush()
    assert len(hits) == 1
    assert hits[0].registers["pc"] == 0x3F3F4
    assert hits[0].memory_start == 0x200000 and len(hits[0].memory) == 160 * 1024
    session.add_tracepoint(0x3F3F4)  # disarmed by the hit, so this re-arms it
    with pytest.raises(AlreadyArmed):
        session.add_tracepoint(0x3F3F4)


def test_two_tracepoints_in_call_order(linked):
    session, victim, _ = linked
    hits = []
    session.add_tracepoint_observer(hits.append)
    session.add_tracepoint(0x3F44C)
    session.add_tracepoint(0x3F3F4)
    (vconn,) = victim.connections.values()
    victim.send_lmp_tx(vconn, lmp.LmpPdu(0, 0, b"\x01"), fuzz=True)
    session.flush()
    assert [h.address for h in hits] == [0x3F3F4, 0x3F44C]


def test_tracepoint_on_unmapped_address(session):
    with pytest.raises(OutOfMap):
        session.add_tracepoint(0x100000)


def test_crash_dump_after_tracepoint(linked):
    session, victim, _ = linked
    crashes = []
    session.add_crash_observer(crashes.append)
    (vconn,) = victim.connections.values()
    # crash the local chip: its own dispatcher takes the NULL entry
    victim.send_lmp_tx(vconn, lmp.LmpPdu(0, 0, b"\x0a"), fuzz=True)
    session.flush()
    assert session.controller.mode is Mode.CRASHED
    assert crashes and crashes[0].reason.name == "INVALID_MEMORY"
    session.reset()
    assert session.controller.mode is Mode.NORMAL


# -- scanner ------------------------------------------------------------------------


@pytest.mark.parametrize("name", sorted(set(builtin_profiles()) - {"broadcom_base"}))
def test_scan_matches_profile_flag(name):
    air = Air()
    prof = load_profile(name)
    Controller(prof, VICTIM_MAC, air)
    with Session.simulated("bcm4339", ATTACKER_MAC, air) as s:
        conn = s.connect(VICTIM_MAC)
        result = s.scan_bpcs(conn.handle)
        want = ScanVerdict.VULNERABLE if prof.vulnerable_bpcs else ScanVerdict.NOT_VULNERABLE
        assert result.verdict is want
        assert result.peer_version[0] == prof.lmp_version
        assert result.peer_version[2] == prof.lmp_subversion


def test_scan_records_table_version(linked):
    session, _, handle = linked
    assert session.scan_bpcs(handle).version_text == "7/24841"


def test_scan_failed_link_is_no_response(pair):
    session, _ = pair
    conn = session.connect("11:22:33:44:55:66")
    assert session.scan_bpcs(conn.handle).verdict is ScanVerdict.NO_RESPONSE


# -- MAC filter --------------------------------------------------------------------


def _victim_session(air, whitelist):
    victim = Session.simulated("bcm4339", VICTIM_MAC, air)
    victim.install_mac_filter(whitelist)
    return victim


def test_mac_filter_trusted_peer_passes(air):
    victim = _victim_session(air, {ATTACKER_MAC})
    with Session.simulated("bcm4339", ATTACKER_MAC, air) as attacker:
        h = attacker.connect(VICTIM_MAC).handle
        attacker.send_lmp(h, 0, b"\x0a", fuzz=True)
    assert victim.controller.mode is Mode.CRASHED
    victim.close()


def test_mac_filter_blocks_everything_for_untrusted(air):
    victim = _victim_session(air, {"aa:aa:aa:aa:aa:aa"})
    with Session.simulated("bcm4339", ATTACKER_MAC, air) as attacker:
        h = attacker.connect(VICTIM_MAC).handle
        for sub in range(256):
            attacker.send_lmp(h, 0, bytes([sub]), fuzz=True)
            assert victim.controller.mode is Mode.NORMAL
    victim.close()


def test_empty_whitelist_rejects_all(air):
    victim = _victim_session(air, set())
    with Session.simulated("bcm4339", ATTACKER_MAC, air) as attacker:
        h = attacker.connect(VICTIM_MAC).handle
        attacker.send_lmp(h, 0, b"\x95", fuzz=True)
    assert victim.controller.mode is Mode.NORMAL
    victim.close()


# -- misc ----------------------------------------------------------------------------


def test_parse_mac_forms():
    assert core.parse_mac("00-1A-7D-DA-71-0A") == bytes.fromhex("001a7dda710a")
    assert core.parse_mac(bytes(6)) == bytes(6)
    with pytest.raises(MalformedMac):
        core.parse_mac("zz:zz:zz:zz:zz:zz")


def test_module_aliases_forward(session):
    assert core.read_memory(session, 0x200000, 4) == session.read_memory(0x200000, 4)


def test_reentrant_call_from_delivery_thread(linked):
    session, victim, _ = linked
    errors = []

    def sink(record):
        try:
            session.read_memory(0x200000, 4)
        except core.ReentrantCall as exc:
            errors.append(exc)

    session.install_lmp_monitor(sink)
    session.send_lmp(linked[2], lmp.LMP_VERSION_REQ, bytes(5))
    session.flush()
    assert errors
