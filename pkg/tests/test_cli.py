import io
import string

import pytest
from hypothesis import given
from hypothesis import strategies as st

from bluepatch import cli
from bluepatch.cli import ParseError, format_command, parse_command
from bluepatch.core import Session

u32 = st.integers(0, 0xFFFFFFFF)
macs = st.binary(min_size=6, max_size=6).map(lambda b: ":".join(f"{x:02x}" for x in b))
word = st.text(string.ascii_letters + string.digits + "._/-", min_size=1, max_size=12)
path = st.lists(word, min_size=1, max_size=3).map(" ".join)
ascii_text = st.text(string.ascii_letters + string.digits + " !#$%&()*+,-./:;<=>?@[]^_{|}~", min_size=1,
                     max_size=20).filter(lambda t: t.strip() == t)

commands = st.one_of(
    st.builds(cli.Connect, macs),
    st.just(cli.InfoConnections()),
    st.builds(cli.ReadMem, u32, st.integers(1, 1 << 20)),
    st.builds(cli.WriteMem, u32, st.binary(min_size=1, max_size=40)),
    st.builds(cli.SearchMem, st.binary(min_size=1, max_size=16), st.just(False)),
    st.builds(cli.SearchMem, ascii_text.map(str.encode), st.just(True)),
    st.builds(cli.Launch, u32),
    st.builds(cli.PatchRom, u32, u32),
    st.builds(cli.LoadHcd, path),
    st.builds(cli.SendHci, st.binary(min_size=3, max_size=40)),
    st.builds(cli.SendLmp, st.integers(0, 127), st.binary(max_size=40), st.booleans()),
    st.builds(cli.Monitor, st.sampled_from(["hci", "lmp"]), st.sampled_from(["start", "stop"]), st.none() | path),
    st.builds(cli.Tracepoint, st.sampled_from(["add", "remove"]), u32),
    st.just(cli.ScanBpcs()),
    st.builds(cli.MacFilter, st.just("add"), macs),
    st.builds(cli.MacFilter, st.just("clear"), st.none() | macs),
    st.builds(cli.Demo, st.sampled_from(["nino", "ecdh", "jammer"]), st.lists(word, max_size=3).map(tuple)),
    st.just(cli.Reset()),
    st.just(cli.Help()),
    st.just(cli.Quit()),
)


@given(commands)
def test_format_parse_roundtrip(cmd):
    text = format_command(cmd)
    assert parse_command(text) == cmd
    assert format_command(parse_command(text)) == text


@pytest.mark.parametrize("line,cmd", [
    ("connect DE:AD:BE:EF:00:00", cli.Connect("de:ad:be:ef:00:00")),
    ("info connections", cli.InfoConnections()),
    ("readmem 0x200000 40", cli.ReadMem(0x200000, 40)),
    ("writemem 0x201000 de ad be ef", cli.WriteMem(0x201000, bytes.fromhex("deadbeef"))),
    ("searchmem ascii:hello world", cli.SearchMem(b"hello world", True)),
    ("searchmem 0xdead", cli.SearchMem(b"\xde\xad")),
    ("launch 0x226000", cli.Launch(0x226000)),
    ("patchrom 0x1000 0x11223344", cli.PatchRom(0x1000, 0x11223344)),
    ("loadhcd /tmp/a b.hcd", cli.LoadHcd("/tmp/a b.hcd")),
    ("sendhci 011000", cli.SendHci(bytes.fromhex("011000"))),
    ("sendlmp --fuzz 0 95", cli.SendLmp(0, b"\x95", True)),
    ("sendlmp 60 0000000000ffffffffffffffff0000", cli.SendLmp(60, bytes.fromhex("0000000000ffffffffffffffff0000"))),
    ("monitor lmp start --file /tmp/x.log", cli.Monitor("lmp", "start", "/tmp/x.log")),
    ("monitor hci stop", cli.Monitor("hci", "stop")),
    ("tp add 0x3f3f4", cli.Tracepoint("add", 0x3F3F4)),
    ("tp remove 259060", cli.Tracepoint("remove", 0x3F3F4)),
    ("scan bpcs", cli.ScanBpcs()),
    ("macfilter add 00:1a:7d:da:71:0a", cli.MacFilter("add", "00:1a:7d:da:71:0a")),
    ("macfilter clear", cli.MacFilter("clear")),
    ("demo ecdh 500", cli.Demo("ecdh", ("500",))),
    ("reset", cli.Reset()),
    ("help", cli.Help()),
    ("quit", cli.Quit()),
])
def test_every_production(line, cmd):
    assert parse_command(line) == cmd


@pytest.mark.parametrize("line,column", [
    ("bogus", 0),
    ("readmem 0x200000", 16),
    ("readmem zz 4", 8),
    ("sendlmp 200", 8),
    ("connect de:ad:be", 8),
    ("scan everything", 5),
    ("writemem 0x10 abc", 14),
    ("reset now", 6),
])
def test_parse_errors_carry_position(line, column):
    with pytest.raises(ParseError) as exc:
        parse_command(line)
    assert exc.value.position == column


def test_hexdump_layout():
    lines = cli.hexdump(b"ABCDEFGHIJKLMNOPQ", 0x200000)
    assert lines[0] == "00200000: 41 42 43 44 45 46 47 48 49 4a 4b 4c 4d 4e 4f 50  |ABCDEFGHIJKLMNOP|"
    assert lines[1].startswith("00200010: 51 ")
    assert lines[1].endswith("|Q|")


def test_register_rows():
    regs = {n: i for i, n in enumerate(cli.REGISTER_NAMES)}
    rows = cli.render_registers(regs)
    assert rows[0] == "    pc:  0x00000000\tlr:   0x00000001"
    assert rows[-2] == "    r10: 0x0000000e"
    assert rows[-1].startswith("    r11: 0x0000000f\tr12:")


def _run(lines, **kw):
    out = io.StringIO()
    with Session.simulated("bcm4339") as s:
        code = cli.Repl(s, out, **kw).run(lines)
    return code, out.getvalue()


def test_repl_reports_parse_errors_and_continues():
    code, text = _run(["bogus", "readmem 0x200000 4"])
    assert code == 0
    assert "parse error" in text and "00200000:" in text


def test_repl_recovers_after_crash():
    code, text = _run(["readmem 0x100000 4", "sendhci 4dfc050000100004", "reset", "readmem 0x200000 4"])
    assert code == 0
    assert "[!] Controller crashed" in text
    assert text.rstrip().endswith("|....|")


def test_history_file(tmp_path):
    hist = tmp_path / "hist"
    _run(["help", "reset"], history=cli.History(hist))
    assert hist.read_text().splitlines() == ["help", "reset"]


def test_main_script_mode(tmp_path, capsys):
    script = tmp_path / "s.txt"
    script.write_text("readmem 0x200000 4\nquit\nreadmem 0x200000 8\n")
    assert cli.main(["--script", str(script)]) == 0
    out = capsys.readouterr().out
    assert out.count("00200000:") == 1


def test_main_bad_profile(capsys):
    assert cli.main(["--profile", "no-such-chip", "--script", "/dev/null"]) == 2
