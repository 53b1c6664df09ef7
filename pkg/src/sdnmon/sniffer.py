"""Port sniffer: listener filter, bounded packet buffer, HTTP boundary extraction.

The listener side (``listener_filter`` + ``PacketBuffer.offer``) never looks
at payloads.  The consumer side owns all parse state and turns each HTTP
header it sees complete into one ``ExtractedRecord``.
"""

from __future__ import annotations

import enum
import logging
import re
import socket
import struct
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Deque, Dict, FrozenSet, Iterable, List, Optional, Tuple

from .analysis import AnalysisEngine, MessageKind, event_from_record
from .packet import PROTO_TCP, CapturedPacket, FiveTuple, TcpFlags

log = logging.getLogger(__name__)

DEFAULT_PORTS = frozenset({80, 8080})
LINE_LIMIT = 8192
FIELD_LIMIT = 255

RECORD_MAGIC = 0x4150
RECORD_VERSION = 1
FLAG_MALFORMED = 0x01
FLAG_URL_TRUNCATED = 0x02
_RECORD_HEAD = struct.Struct("!HBBBQBIIHHH")

_REQUEST_LINE = re.compile(rb"^([!#$%&'*+\-.^_`|~0-9A-Za-z]+) (\S+) HTTP/\d\.\d$")
_STATUS_LINE = re.compile(rb"^HTTP/\d\.\d (\d{3})(?: .*)?$")


class MalformedRecord(ValueError):
    pass


class Offer(enum.Enum):
    ACCEPTED = "accepted"
    DROPPED = "dropped"


@dataclass(frozen=True)
class SnifferConfig:
    watched_ports: FrozenSet[int] = DEFAULT_PORTS
    mode: str = "onsite"  # onsite | forward
    collector: Optional[Tuple[str, int]] = None
    buffer_capacity: int = 1024
    drop_policy: str = "drop-newest"

    def __post_init__(self):
        object.__setattr__(self, "watched_ports", frozenset(self.watched_ports))
        if self.buffer_capacity < 1:
            raise ValueError("buffer capacity must be at least 1")
        if self.mode not in ("onsite", "forward"):
            raise ValueError(f"unknown sniffer mode {self.mode!r}")
        if self.mode == "forward" and self.collector is None:
            raise ValueError("forward mode needs a collector address")
        if self.drop_policy != "drop-newest":
            raise ValueError(f"unsupported drop policy {self.drop_policy!r}")


def listener_filter(cfg: SnifferConfig, p: CapturedPacket) -> bool:
    tcp = p.tcp
    if tcp is None:
        return False
    return tcp.src_port in cfg.watched_ports or tcp.dst_port in cfg.watched_ports


class PacketBuffer:
    """Bounded FIFO shared by one listener and one consumer.

    ``offer`` never blocks: a full buffer drops the new packet.  ``take``
    blocks until a packet arrives or the buffer is closed and empty.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self.capacity = capacity
        self._items: Deque[CapturedPacket] = deque()
        self._cond = threading.Condition()
        self._closed = False
        self.offered = 0
        self.accepted = 0
        self.dropped_count = 0
        self.delivered = 0

    def __len__(self) -> int:
        return len(self._items)

    def offer(self, p: CapturedPacket) -> Offer:
        with self._cond:
            self.offered += 1
            if len(self._items) >= self.capacity:
                self.dropped_count += 1
                return Offer.DROPPED
            self._items.append(p)
            self.accepted += 1
            self._cond.notify()
            return Offer.ACCEPTED

    def poll(self) -> Optional[CapturedPacket]:
        with self._cond:
            if not self._items:
                return None
            self.delivered += 1
            return self._items.popleft()

    def take(self, timeout: Optional[float] = None) -> Optional[CapturedPacket]:
        with self._cond:
            if not self._cond.wait_for(lambda: self._items or self._closed, timeout):
                return None
            if not self._items:
                return None
            self.delivered += 1
            return self._items.popleft()

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    @property
    def closed(self) -> bool:
        return self._closed


@dataclass(frozen=True)
class ExtractedRecord:
    flow: FiveTuple
    kind: MessageKind
    timestamp: int
    method: Optional[str] = None
    url: Optional[str] = None
    status_code: Optional[int] = None
    malformed: bool = False
    url_truncated: bool = False


# HTTP extraction ----------------------------------------------------------

@dataclass
class _Stream:
    expected_seq: Optional[int] = None
    line: bytearray = field(default_factory=bytearray)
    line_overflow: bool = False
    first_line: Optional[bytes] = None
    first_line_overflow: bool = False
    content_length: int = 0
    body_remaining: int = 0


def _seq_lt(a: int, b: int) -> bool:
    return ((a - b) & 0xFFFFFFFF) > 0x7FFFFFFF


@dataclass
class ExtractorStats:
    segments: int = 0
    records: int = 0
    malformed: int = 0
    retransmissions: int = 0
    out_of_order: int = 0


class HttpExtractor:
    """Finds the segment that completes each HTTP header.

    State is kept per direction of each connection: the unfinished header
    line (bounded), the first line of the current message, and how much of
    a Content-Length body is still to be skipped.
    """

    def __init__(self, watched_ports: Iterable[int] = DEFAULT_PORTS):
        self.watched_ports = frozenset(watched_ports)
        self.streams: Dict[FiveTuple, _Stream] = {}
        self.stats = ExtractorStats()

    def extract(self, p: CapturedPacket) -> List[ExtractedRecord]:
        tcp, ip = p.tcp, p.ipv4
        if tcp is None or ip is None:
            return []
        if tcp.dst_port in self.watched_ports:
            kind = MessageKind.REQUEST
        elif tcp.src_port in self.watched_ports:
            kind = MessageKind.RESPONSE
        else:
            return []
        key = FiveTuple(PROTO_TCP, ip.src, tcp.src_port, ip.dst, tcp.dst_port)
        st = self.streams.get(key)
        flags = tcp.flags
        if flags & TcpFlags.RST:
            self.streams.pop(key, None)
            self.streams.pop(key.reversed(), None)
            return []
        if st is None:
            st = self.streams[key] = _Stream()
        seg_len = p.payload_wire_length
        seq = tcp.seq
        if flags & TcpFlags.SYN:
            st.expected_seq = (seq + 1 + seg_len) & 0xFFFFFFFF
            return []
        self.stats.segments += 1
        if st.expected_seq is not None and seg_len:
            if _seq_lt(seq, st.expected_seq):
                self.stats.retransmissions += 1
                return []
            if seq != st.expected_seq:
                self.stats.out_of_order += 1
        end = (seq + seg_len + (1 if flags & TcpFlags.FIN else 0)) & 0xFFFFFFFF
        if st.expected_seq is None or seg_len or flags & TcpFlags.FIN:
            st.expected_seq = end
        records = self._scan(st, key, kind, p.timestamp, p.payload) if p.payload else []
        if flags & TcpFlags.FIN:
            self.streams.pop(key, None)
        self.stats.records += len(records)
        return records

    def _scan(self, st: _Stream, key: FiveTuple, kind: MessageKind, ts: int, data: bytes) -> List[ExtractedRecord]:
        out: List[ExtractedRecord] = []
        pos, n = 0, len(data)
        while pos < n:
            if st.body_remaining:
                step = min(st.body_remaining, n - pos)
                st.body_remaining -= step
                pos += step
                continue
            nl = data.find(b"\n", pos)
            if nl < 0:
                self._append(st, data[pos:])
                break
            self._append(st, data[pos:nl])
            pos = nl + 1
            line = bytes(st.line)
            overflow = st.line_overflow
            st.line.clear()
            st.line_overflow = False
            if line.endswith(b"\r"):
                line = line[:-1]
            if line or overflow:
                if st.first_line is None:
                    st.first_line = line
                    st.first_line_overflow = overflow
                elif line[:15].lower() == b"content-length:":
                    try:
                        st.content_length = int(line[15:].strip())
                    except ValueError:
                        st.content_length = 0
                continue
            if st.first_line is None:
                continue  # stray CRLF between messages
            out.append(self._record(st, key, kind, ts))
            st.body_remaining = max(st.content_length, 0)
            st.first_line = None
            st.first_line_overflow = False
            st.content_length = 0
        return out

    @staticmethod
    def _append(st: _Stream, chunk: bytes) -> None:
        room = LINE_LIMIT - len(st.line)
        if len(chunk) > room:
            st.line += chunk[:room]
            st.line_overflow = True
        else:
            st.line += chunk

    def _record(self, st: _Stream, key: FiveTuple, kind: MessageKind, ts: int) -> ExtractedRecord:
        line = st.first_line or b""
        if not st.first_line_overflow:
            if kind == MessageKind.REQUEST:
                m = _REQUEST_LINE.match(line)
                if m:
                    return ExtractedRecord(key, kind, ts, m.group(1).decode("latin-1"),
                                           m.group(2).decode("latin-1"))
            else:
                m = _STATUS_LINE.match(line)
                if m:
                    return ExtractedRecord(key, kind, ts, status_code=int(m.group(1)))
        self.stats.malformed += 1
        return ExtractedRecord(key, kind, ts, malformed=True)


# wire format --------------------------------------------------------------

def encode_record(r: ExtractedRecord) -> bytes:
    method = (r.method or "").encode("latin-1")[:FIELD_LIMIT]
    url = (r.url or "").encode("latin-1")
    flags = FLAG_MALFORMED if r.malformed else 0
    if len(url) > FIELD_LIMIT or r.url_truncated:
        flags |= FLAG_URL_TRUNCATED
        url = url[:FIELD_LIMIT]
    head = _RECORD_HEAD.pack(
        RECORD_MAGIC, RECORD_VERSION, int(r.kind), flags, r.timestamp, r.flow.protocol,
        struct.unpack("!I", socket.inet_aton(r.flow.src_ip))[0],
        struct.unpack("!I", socket.inet_aton(r.flow.dst_ip))[0],
        r.flow.src_port, r.flow.dst_port, r.status_code or 0,
    )
    return head + bytes([len(method)]) + method + bytes([len(url)]) + url


def decode_record(data: bytes) -> ExtractedRecord:
    if len(data) < _RECORD_HEAD.size + 2:
        raise MalformedRecord(f"record of {len(data)} bytes is too short")
    magic, version, kind, flags, ts, proto, src, dst, sport, dport, status = _RECORD_HEAD.unpack_from(data)
    if magic != RECORD_MAGIC:
        raise MalformedRecord(f"bad magic 0x{magic:04x}")
    if version != RECORD_VERSION:
        raise MalformedRecord(f"unsupported version {version}")
    if kind not in (1, 2):
        raise MalformedRecord(f"bad record kind {kind}")
    off = _RECORD_HEAD.size
    mlen = data[off]
    method = data[off + 1: off + 1 + mlen]
    off += 1 + mlen
    if off >= len(data):
        raise MalformedRecord("record truncated before URL")
    ulen = data[off]
    url = data[off + 1: off + 1 + ulen]
    off += 1 + ulen
    if len(method) != mlen or len(url) != ulen or off != len(data):
        raise MalformedRecord("record length does not match its fields")
    flow = FiveTuple(proto, socket.inet_ntoa(struct.pack("!I", src)), sport,
                     socket.inet_ntoa(struct.pack("!I", dst)), dport)
    kind = MessageKind(kind)
    malformed = bool(flags & FLAG_MALFORMED)
    if kind == MessageKind.RESPONSE and (mlen or ulen):
        raise MalformedRecord("response record carries method/URL")
    if kind == MessageKind.REQUEST and status:
        raise MalformedRecord("request record carries a status code")
    if kind == MessageKind.REQUEST and not malformed:
        return ExtractedRecord(flow, kind, ts, method.decode("latin-1"), url.decode("latin-1"),
                               url_truncated=bool(flags & FLAG_URL_TRUNCATED))
    return ExtractedRecord(flow, kind, ts,
                           method.decode("latin-1") or None, url.decode("latin-1") or None,
                           status or None, malformed, bool(flags & FLAG_URL_TRUNCATED))


# sinks --------------------------------------------------------------------

class OnsiteSink:
    """Feeds records straight into a local analysis engine."""

    def __init__(self, engine: AnalysisEngine):
        self.engine = engine
        self.samples = []

    def __call__(self, record: ExtractedRecord) -> None:
        s = self.engine.observe(event_from_record(record))
        if s is not None:
            self.samples.append(s)


class UdpForwarder:
    """Sends each record as one UDP datagram; failures are counted."""

    def __init__(self, address: Tuple[str, int]):
        self.address = address
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sent = 0
        self.bytes_sent = 0
        self.errors = 0

    def __call__(self, record: ExtractedRecord) -> None:
        data = encode_record(record)
        try:
            self.sock.sendto(data, self.address)
        except OSError as exc:
            self.errors += 1
            log.debug("record send failed: %s", exc)
            return
        self.sent += 1
        self.bytes_sent += len(data)

    def close(self) -> None:
        self.sock.close()


class RecordFileWriter:
    """Writes records as length-prefixed datagrams, for file-only pipelines."""

    def __init__(self, stream):
        self.stream = stream
        self.sent = 0
        self.bytes_sent = 0
        self.errors = 0

    def __call__(self, record: ExtractedRecord) -> None:
        data = encode_record(record)
        self.stream.write(struct.pack("!H", len(data)) + data)
        self.sent += 1
        self.bytes_sent += len(data)


def read_record_file(stream) -> Iterable[bytes]:
    while True:
        head = stream.read(2)
        if not head:
            return
        if len(head) < 2:
            raise MalformedRecord("record file truncated")
        (n,) = struct.unpack("!H", head)
        data = stream.read(n)
        if len(data) < n:
            raise MalformedRecord("record file truncated")
        yield data


# driver -------------------------------------------------------------------

@dataclass
class SnifferStats:
    seen: int = 0
    filtered: int = 0
    buffered: int = 0
    dropped: int = 0
    records: int = 0
    transport_errors: int = 0
    malformed: int = 0
    retransmissions: int = 0
    out_of_order: int = 0


def run_sniffer(cfg: SnifferConfig, source: Iterable[CapturedPacket],
                sink: Callable[[ExtractedRecord], None], threaded: bool = False) -> SnifferStats:
    """Drive packets from ``source`` through filter, buffer and extractor into ``sink``.

    Single-threaded runs drain the buffer after every offer, so nothing is
    dropped.  Threaded runs put the listener on its own thread.
    """
    buf = PacketBuffer(cfg.buffer_capacity)
    extractor = HttpExtractor(cfg.watched_ports)
    stats = SnifferStats()

    def consume(p: CapturedPacket) -> None:
        for rec in extractor.extract(p):
            stats.records += 1
            sink(rec)

    failure: List[BaseException] = []

    def listen() -> None:
        try:
            for p in source:
                stats.seen += 1
                if listener_filter(cfg, p):
                    stats.filtered += 1
                    buf.offer(p)
                    if not threaded:
                        while (q := buf.poll()) is not None:
                            consume(q)
        except BaseException as exc:
            if not threaded:
                raise
            failure.append(exc)
        finally:
            buf.close()

    if threaded:
        t = threading.Thread(target=listen, name="sniffer-listener", daemon=True)
        t.start()
        while (p := buf.take()) is not None:
            consume(p)
        t.join()
        if failure:
            raise failure[0]
    else:
        listen()

    stats.buffered = buf.accepted
    stats.dropped = buf.dropped_count
    stats.transport_errors = getattr(sink, "errors", 0)
    stats.malformed = extractor.stats.malformed
    stats.retransmissions = extractor.stats.retransmissions
    stats.out_of_order = extractor.stats.out_of_order
    return stats
