import struct

import pytest
from hypothesis import given
from hypothesis import strategies as st

from bluepatch import hci
from bluepatch.hci import Direction, HciCommand, HciEvent

params = st.binary(max_size=255)


def test_nop_encodes_to_three_zero_bytes():
    assert hci.encode_command(HciCommand(hci.NOP)) == bytes.fromhex("000000")


def test_opcode_splits_into_ogf_and_ocf():
    op = hci.HciOpcode.from_value(0xFC4D)
    assert (op.ogf, op.ocf) == (0x3F, 0x04D)
    assert op.value == 0xFC4D
    assert hci.vendor_opcode(0x4C) == 0xFC4C


def test_launch_ram_reboot_vector():
    cmd = hci.build_vendor_command(hci.LaunchRam(hci.LAUNCH_RAM_REBOOT))
    assert hci.encode_command(cmd) == bytes.fromhex("4efc04ffffffff")


def test_write_ram_vector():
    cmd = hci.build_vendor_command(hci.WriteRam(0x200000, bytes.fromhex("deadbeef")))
    assert cmd.params == bytes.fromhex("00002000deadbeef")
    assert hci.encode_command(cmd)[2] == 8


def test_read_ram_vector():
    cmd = hci.build_vendor_command(hci.ReadRam(0xD0000, 32))
    assert cmd.params == bytes.fromhex("00000d0020")
    assert hci.encode_command(cmd)[:2] == bytes.fromhex("4dfc")


def test_command_complete_decode():
    evt = hci.decode_packet(bytes.fromhex("0e04014dfc00"), Direction.CONTROLLER_TO_HOST)
    cc = hci.parse_command_complete(evt)
    assert cc.num_packets == 1
    assert cc.opcode.value == 0xFC4D
    assert cc.status == 0
    assert cc.payload == b""


def test_command_complete_rejects_other_events():
    with pytest.raises(hci.WrongEventCode):
        hci.parse_command_complete(HciEvent(0x0F, bytes(4)))


def test_truncated_reports_offset():
    with pytest.raises(hci.Truncated) as exc:
        hci.decode_packet(bytes.fromhex("0e0501"), Direction.CONTROLLER_TO_HOST)
    assert exc.value.offset == 3
    with pytest.raises(hci.Truncated):
        hci.decode_packet(b"\x4d", Direction.HOST_TO_CONTROLLER)


def test_trailing_bytes_are_a_length_mismatch():
    with pytest.raises(hci.LengthMismatch):
        hci.decode_packet(bytes.fromhex("000000ff"), Direction.HOST_TO_CONTROLLER)


def test_oversized_params_rejected():
    with pytest.raises(hci.OversizedParams):
        hci.encode_command(HciCommand(0x0C03, bytes(256)))
    with pytest.raises(hci.OversizedParams):
        hci.build_vendor_command(hci.WriteRam(0, bytes(252)))
    with pytest.raises(ValueError):
        hci.build_vendor_command(hci.ReadRam(0, 252))


def test_vendor_opcodes_come_from_the_table():
    table = hci.VendorOpcodeTable(read_ram=0xFC99)
    cmd = hci.build_vendor_command(hci.ReadRam(4, 1), table)
    assert cmd.opcode == 0xFC99
    assert hci.parse_vendor_command(cmd, table) == hci.ReadRam(4, 1)
    assert hci.parse_vendor_command(cmd) is None
    assert hci.VendorOpcodeTable.from_dict(table.to_dict()) == table


@given(st.integers(0, 0xFFFF), params)
def test_command_roundtrip(opcode, body):
    cmd = HciCommand(opcode, body)
    wire = hci.encode_command(cmd)
    assert wire[:3] == struct.pack("<HB", opcode, len(body))
    assert hci.decode_packet(wire, Direction.HOST_TO_CONTROLLER) == cmd


@given(st.integers(0, 0xFF), params)
def test_event_roundtrip(code, body):
    evt = HciEvent(code, body)
    assert hci.decode_packet(hci.encode_event(evt), Direction.CONTROLLER_TO_HOST) == evt


vendor_kinds = st.one_of(
    st.builds(hci.ReadRam, st.integers(0, 0xFFFFFFFF), st.integers(1, 251)),
    st.builds(hci.WriteRam, st.integers(0, 0xFFFFFFFF), st.binary(max_size=251)),
    st.builds(hci.LaunchRam, st.integers(0, 0xFFFFFFFF)),
    st.just(hci.DownloadMinidriver()),
)


@given(vendor_kinds)
def test_vendor_command_roundtrip(kind):
    assert hci.parse_vendor_command(hci.build_vendor_command(kind)) == kind


def test_describe_packet_names_events():
    text = hci.describe_packet(hci.command_complete(0x1001))
    assert text.startswith("EVT COMMAND_COMPLETE plen=4")
    assert hci.describe_packet(HciCommand(0xFC4D, b"\x01")).startswith("CMD ")
