"""Snoop capture files (RFC 1761 and btsnoop), LMP pseudo-records, TCP bridge.

Both dialects share a 16-byte big-endian file header and a 24-byte record
header.  They differ in the third record word (btsnoop: direction flags,
RFC 1761: total record length including pad) and in the timestamp (btsnoop:
one signed 64-bit microsecond count from year 0; RFC 1761: seconds and
microseconds since 1970).
"""

from __future__ import annotations

import enum
import io
import logging
import queue
import socket
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator

from .hci import Direction, HciCommand, HciEvent, HciPacket, decode_packet, encode_packet

log = logging.getLogger(__name__)

HEADER_SIZE = 16
RECORD_HEADER_SIZE = 24
RFC1761_MAGIC = b"snoop\x00\x00\x00"
BTSNOOP_MAGIC = b"btsnoop\x00"
DATALINK_HCI_H4 = 1002
# DLT_USER0; our LMP pseudo-header captures are not a registered link type
DATALINK_LMP = 147
BTSNOOP_EPOCH_DELTA_US = 0x00DCDDB30F2F8000

H4_COMMAND = 0x01
H4_EVENT = 0x04

FLAG_RECEIVED = 0x01
FLAG_COMMAND_OR_EVENT = 0x02

DEFAULT_OUT_PORT = 8872
DEFAULT_IN_PORT = 8873


class CaptureError(Exception):
    pass


class BadMagic(CaptureError):
    pass


class Truncated(CaptureError):
    def __init__(self, message: str, record_index: int | None = None):
        super().__init__(message)
        self.record_index = record_index


class SinkFailure(CaptureError):
    pass


class BindFailure(CaptureError):
    pass


class Dialect(enum.Enum):
    RFC1761 = "rfc1761"
    BTSNOOP = "btsnoop"

    @property
    def magic(self) -> bytes:
        return RFC1761_MAGIC if self is Dialect.RFC1761 else BTSNOOP_MAGIC

    @property
    def version(self) -> int:
        return 2 if self is Dialect.RFC1761 else 1


@dataclass(frozen=True)
class SnoopHeader:
    dialect: Dialect = Dialect.BTSNOOP
    datalink: int = DATALINK_HCI_H4
    version: int | None = None

    @property
    def effective_version(self) -> int:
        return self.dialect.version if self.version is None else self.version

    def encode(self) -> bytes:
        return self.dialect.magic + struct.pack(">II", self.effective_version, self.datalink)

    @classmethod
    def decode(cls, raw: bytes) -> "SnoopHeader":
        if len(raw) < HEADER_SIZE:
            raise Truncated(f"file header needs {HEADER_SIZE} bytes, got {len(raw)}")
        magic = bytes(raw[:8])
        for d in Dialect:
            if magic == d.magic:
                version, datalink = struct.unpack_from(">II", raw, 8)
                return cls(d, datalink, None if version == d.version else version)
        raise BadMagic(f"unknown capture magic {magic!r}")


@dataclass(frozen=True)
class SnoopRecord:
    data: bytes
    original_len: int | None = None
    flags: int = 0
    cumulative_drops: int = 0
    timestamp_us: int = 0
    pad: bytes = b""

    @property
    def included_len(self) -> int:
        return len(self.data)

    @property
    def record_len(self) -> int:
        return RECORD_HEADER_SIZE + len(self.data) + len(self.pad)

    def encode(self, dialect: Dialect) -> bytes:
        orig = len(self.data) if self.original_len is None else self.original_len
        if dialect is Dialect.BTSNOOP:
            if self.pad:
                raise CaptureError("btsnoop records carry no pad")
            head = struct.pack(
                ">IIIIq", orig, len(self.data), self.flags, self.cumulative_drops, self.timestamp_us
            )
            return head + self.data
        if self.flags:
            raise CaptureError("RFC 1761 records carry no flags word")
        sec, usec = divmod(self.timestamp_us, 1_000_000)
        head = struct.pack(
            ">IIIIII", orig, len(self.data), self.record_len, self.cumulative_drops, sec, usec
        )
        return head + self.data + self.pad


def _decode_record(head: bytes, body_reader, dialect: Dialect, index: int) -> SnoopRecord:
    if dialect is Dialect.BTSNOOP:
        orig, incl, flags, drops, ts = struct.unpack(">IIIIq", head)
        data = body_reader(incl)
        if len(data) < incl:
            raise Truncated(f"record {index} declares {incl} bytes", index)
        return SnoopRecord(data, None if orig == incl else orig, flags, drops, ts)
    orig, incl, rec_len, drops, sec, usec = struct.unpack(">IIIIII", head)
    if rec_len < RECORD_HEADER_SIZE + incl:
        raise Truncated(f"record {index} length {rec_len} shorter than its data", index)
    body = body_reader(rec_len - RECORD_HEADER_SIZE)
    if len(body) < rec_len - RECORD_HEADER_SIZE:
        raise Truncated(f"record {index} cut short", index)
    return SnoopRecord(
        body[:incl], None if orig == incl else orig, 0, drops, sec * 1_000_000 + usec, body[incl:]
    )


class RecordReader:
    """Pulls a header then records from a byte stream (file or socket)."""

    def __init__(self, stream: BinaryIO):
        self.stream = stream
        self.header: SnoopHeader | None = None
        self.index = 0

    def _read(self, n: int) -> bytes:
        out = bytearray()
        while len(out) < n:
            chunk = self.stream.read(n - len(out))
            if not chunk:
                break
            out += chunk
        return bytes(out)

    def read_header(self) -> SnoopHeader:
        self.header = SnoopHeader.decode(self._read(HEADER_SIZE))
        return self.header

    def next_record(self) -> SnoopRecord | None:
        if self.header is None:
            self.read_header()
        head = self._read(RECORD_HEADER_SIZE)
        if not head:
            return None
        if len(head) < RECORD_HEADER_SIZE:
            raise Truncated(f"record {self.index} header cut short", self.index)
        rec = _decode_record(head, self._read, self.header.dialect, self.index)
        self.index += 1
        return rec

    def __iter__(self) -> Iterator[SnoopRecord]:
        while True:
            rec = self.next_record()
            if rec is None:
                return
            yield rec


def read_capture(source: str | Path | bytes | BinaryIO) -> tuple[SnoopHeader, list[SnoopRecord]]:
    if isinstance(source, (bytes, bytearray)):
        stream: BinaryIO = io.BytesIO(source)
    elif isinstance(source, (str, Path)):
        stream = io.BytesIO(Path(source).read_bytes())
    else:
        stream = source
    reader = RecordReader(stream)
    header = reader.read_header()
    return header, list(reader)


def encode_capture(header: SnoopHeader, records: Iterable[SnoopRecord]) -> bytes:
    return header.encode() + b"".join(r.encode(header.dialect) for r in records)


def write_capture(sink: str | Path | BinaryIO, header: SnoopHeader, records: Iterable[SnoopRecord]) -> int:
    raw = encode_capture(header, records)
    try:
        if isinstance(sink, (str, Path)):
            Path(sink).write_bytes(raw)
        else:
            sink.write(raw)
    except OSError as exc:
        raise SinkFailure(str(exc)) from exc
    return len(raw)


class CaptureWriter:
    """Incremental writer; the header goes out on construction."""

    def __init__(self, sink: str | Path | BinaryIO, header: SnoopHeader = SnoopHeader()):
        self.header = header
        self._owned = isinstance(sink, (str, Path))
        try:
            self._f: BinaryIO = open(sink, "wb") if self._owned else sink
            self._f.write(header.encode())
        except OSError as exc:
            raise SinkFailure(str(exc)) from exc
        self.bytes_written = HEADER_SIZE
        self.count = 0

    def write(self, record: SnoopRecord) -> None:
        raw = record.encode(self.header.dialect)
        try:
            self._f.write(raw)
        except (OSError, ValueError) as exc:
            raise SinkFailure(str(exc)) from exc
        self.bytes_written += len(raw)
        self.count += 1

    def close(self) -> None:
        if self._owned:
            self._f.close()
        else:
            self._f.flush()

    def __enter__(self) -> "CaptureWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


# -- HCI and LMP payloads ----------------------------------------------------


def dialect_timestamp(sim_us: int, dialect: Dialect) -> int:
    return sim_us + BTSNOOP_EPOCH_DELTA_US if dialect is Dialect.BTSNOOP else sim_us


def hci_record(packet: HciPacket, timestamp_us: int = 0, dialect: Dialect = Dialect.BTSNOOP) -> SnoopRecord:
    is_cmd = isinstance(packet, HciCommand)
    data = bytes([H4_COMMAND if is_cmd else H4_EVENT]) + encode_packet(packet)
    flags = 0
    if dialect is Dialect.BTSNOOP:
        flags = FLAG_COMMAND_OR_EVENT | (0 if is_cmd else FLAG_RECEIVED)
    return SnoopRecord(data, flags=flags, timestamp_us=dialect_timestamp(timestamp_us, dialect))


def packet_from_record(record: SnoopRecord) -> HciPacket:
    if not record.data:
        raise CaptureError("empty record")
    kind = record.data[0]
    if kind == H4_COMMAND:
        return decode_packet(record.data[1:], Direction.HOST_TO_CONTROLLER)
    if kind == H4_EVENT:
        return decode_packet(record.data[1:], Direction.CONTROLLER_TO_HOST)
    raise CaptureError(f"unsupported H4 packet type {kind:#04x}")


def record_direction(record: SnoopRecord, dialect: Dialect) -> Direction:
    """Direction from flags (btsnoop) or, lacking them, from the H4 type byte."""
    if dialect is Dialect.BTSNOOP:
        return Direction.CONTROLLER_TO_HOST if record.flags & FLAG_RECEIVED else Direction.HOST_TO_CONTROLLER
    return Direction.HOST_TO_CONTROLLER if record.data[:1] == bytes([H4_COMMAND]) else Direction.CONTROLLER_TO_HOST


class LmpDirection(enum.IntEnum):
    RX = 0
    TX = 1


@dataclass(frozen=True)
class LmpCaptureRecord:
    """LMP PDU behind a 4-byte pseudo-header: direction, handle (LE), reserved."""

    direction: LmpDirection
    connection_handle: int
    pdu_bytes: bytes

    def to_bytes(self) -> bytes:
        return struct.pack("<BHB", self.direction, self.connection_handle, 0) + self.pdu_bytes

    @classmethod
    def from_bytes(cls, raw: bytes) -> "LmpCaptureRecord":
        if len(raw) < 4:
            raise Truncated("LMP pseudo-header needs 4 bytes")
        direction, handle, _ = struct.unpack_from("<BHB", raw)
        return cls(LmpDirection(direction), handle, bytes(raw[4:]))

    def snoop_record(self, timestamp_us: int = 0, dialect: Dialect = Dialect.BTSNOOP) -> SnoopRecord:
        flags = FLAG_RECEIVED if dialect is Dialect.BTSNOOP and self.direction is LmpDirection.RX else 0
        return SnoopRecord(self.to_bytes(), flags=flags, timestamp_us=dialect_timestamp(timestamp_us, dialect))


def lmp_header(dialect: Dialect = Dialect.BTSNOOP) -> SnoopHeader:
    return SnoopHeader(dialect, DATALINK_LMP)


# -- TCP bridge ---------------------------------------------------------------


class _Client:
    def __init__(self, conn: socket.socket, limit: int):
        self.conn = conn
        self.queue: queue.Queue = queue.Queue(maxsize=limit)
        self.thread = threading.Thread(target=self._pump, daemon=True)
        self.alive = True

    def _pump(self) -> None:
        try:
            while True:
                chunk = self.queue.get()
                if chunk is None:
                    break
                self.conn.sendall(chunk)
        except OSError:
            pass
        finally:
            self.alive = False
            try:
                self.conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self.conn.close()


class Bridge:
    """Live HCI stream out on one port, command injection in on the other.

    Every client of the out port receives the file header and then one record
    per HCI packet crossing the session from the moment it connected, so a
    saved socket stream is a valid capture file.  A client whose buffer fills
    up is dropped instead of stalling the session.
    """

    def __init__(self, session, out_port: int = DEFAULT_OUT_PORT, in_port: int = DEFAULT_IN_PORT,
                 host: str = "127.0.0.1", dialect: Dialect = Dialect.BTSNOOP, client_buffer: int = 65536):
        self.session = session
        self.header = SnoopHeader(dialect)
        self.client_buffer = client_buffer
        self._clients: list[_Client] = []
        self._lock = threading.Lock()
        self._closing = threading.Event()
        self._out = self._listen(host, out_port)
        self._in = self._listen(host, in_port)
        self.out_port = self._out.getsockname()[1]
        self.in_port = self._in.getsockname()[1]
        self._threads = [
            threading.Thread(target=self._accept_out, daemon=True),
            threading.Thread(target=self._accept_in, daemon=True),
        ]
        session.add_packet_observer(self._on_packet)
        for t in self._threads:
            t.start()

    @staticmethod
    def _listen(host: str, port: int) -> socket.socket:
        s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            s.bind((host, port))
        except OSError as exc:
            s.close()
            raise BindFailure(f"cannot bind {host}:{port}: {exc}") from exc
        s.listen(8)
        s.settimeout(0.1)
        return s

    def _accept_out(self) -> None:
        while not self._closing.is_set():
            try:
                conn, _ = self._out.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            conn.settimeout(None)
            client = _Client(conn, self.client_buffer)
            with self._lock:
                client.queue.put(self.header.encode())
                self._clients.append(client)
            client.thread.start()

    def _accept_in(self) -> None:
        while not self._closing.is_set():
            try:
                conn, _ = self._in.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            conn.settimeout(None)
            threading.Thread(target=self._inject, args=(conn,), daemon=True).start()

    def _inject(self, conn: socket.socket) -> None:
        with conn, conn.makefile("rb") as stream:
            reader = RecordReader(stream)
            try:
                reader.read_header()
                for rec in reader:
                    packet = packet_from_record(rec)
                    if isinstance(packet, HciCommand):
                        self.session.send_raw(packet)
            except Exception as exc:  # a broken client must not take the bridge down
                log.warning("inject port client dropped: %s", exc)

    def _on_packet(self, packet: HciPacket, timestamp_us: int) -> None:
        raw = hci_record(packet, timestamp_us, self.header.dialect).encode(self.header.dialect)
        with self._lock:
            for client in list(self._clients):
                if not client.alive:
                    self._clients.remove(client)
                    continue
                try:
                    client.queue.put_nowait(raw)
                except queue.Full:
                    log.warning("snoop client too slow, disconnecting")
                    client.alive = False
                    self._clients.remove(client)
                    try:
                        client.conn.shutdown(socket.SHUT_RDWR)
                    except OSError:
                        pass

    @property
    def client_count(self) -> int:
        with self._lock:
            return sum(1 for c in self._clients if c.alive)

    def close(self) -> None:
        """Stop listening, flush what every client has queued, then disconnect."""
        self.session.remove_packet_observer(self._on_packet)
        self._closing.set()
        for s in (self._out, self._in):
            s.close()
        for t in self._threads:
            t.join(timeout=1)
        with self._lock:
            clients, self._clients = self._clients, []
        for c in clients:
            try:
                c.queue.put(None, timeout=5)
            except queue.Full:
                pass
        for c in clients:
            c.thread.join(timeout=5)

    def __enter__(self) -> "Bridge":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def run_bridge(session, out_port: int = DEFAULT_OUT_PORT, in_port: int = DEFAULT_IN_PORT, **kwargs) -> Bridge:
    return Bridge(session, out_port, in_port, **kwargs)
