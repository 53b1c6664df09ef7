"""Synthetic HTTP/1.1-over-TCP workloads written as pcap plus a ground-truth log.

All randomness comes from one ``random.Random(seed)`` instance (Mersenne
Twister MT19937) consumed in a fixed order, so a (spec, seed) pair always
produces the same bytes.  Timestamps are on a virtual microsecond clock that
starts at 0.

Timing model, per connection:

* a message is sent as a burst of MSS-sized segments ``segment_gap_us``
  apart (0 by default: all segments share one timestamp);
* request ``i`` leaves once request ``i-1`` is fully sent and, when
  ``i >= depth``, once response ``i-depth`` has been received, each plus a
  think time;
* response ``i`` starts ``execution`` after request ``i`` was fully received,
  but never before response ``i-1`` finished (responses keep request order).
"""

from __future__ import annotations

import configparser
import http
import json
import random
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .packet import FrameBuilder, TcpFlags, mac_bytes, parse_packet
from .pcap import PcapRecord, dump_bytes

Range = Tuple[int, int]

ACK = TcpFlags.ACK
PSH_ACK = TcpFlags.PSH | TcpFlags.ACK
_FILLER = bytes(range(0x61, 0x7B)) * 400  # a-z, no CR/LF


class SpecError(ValueError):
    pass


@dataclass
class WorkloadSpec:
    connections: int = 1
    requests_per_connection: int = 1
    pipeline_depth: int = 1
    request_header_size: Range = (0, 0)
    request_body: Range = (0, 0)
    response_header_size: Range = (0, 0)
    response_body: Range = (0, 0)
    service_time_us: Range = (1000, 1000)
    service_times: Optional[List[int]] = None
    think_time_us: Range = (10, 10)
    start_spread_us: Range = (0, 0)
    mss: int = 1460
    urls: List[Tuple[str, float]] = field(default_factory=lambda: [("/", 1.0)])
    failures: Dict[int, int] = field(default_factory=dict)
    control_traffic: bool = True
    segment_gap_us: int = 0
    handshake_rtt_us: int = 40
    ack_delay_us: int = 1
    server_ip: str = "10.0.0.2"
    server_port: int = 8080
    client_port_base: int = 40000

    def validate(self) -> None:
        if self.connections < 0 or self.requests_per_connection < 0:
            raise SpecError("counts must be non-negative")
        if self.pipeline_depth < 1:
            raise SpecError("pipeline depth must be at least 1")
        if self.mss < 1:
            raise SpecError("MSS must be positive")
        if self.connections > 60000 or self.client_port_base + self.connections > 65535:
            raise SpecError("too many connections for the client port range")
        for name in ("request_header_size", "request_body", "response_header_size", "response_body",
                     "service_time_us", "think_time_us", "start_spread_us"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise SpecError(f"bad range for {name}: {lo}-{hi}")
        if self.think_time_us[0] < 1:
            raise SpecError("think time must be at least 1 us")
        if self.service_times is not None and (not self.service_times or min(self.service_times) < 0):
            raise SpecError("service_times must be a non-empty list of non-negative values")
        if not self.urls or any(w < 0 for _, w in self.urls) or sum(w for _, w in self.urls) <= 0:
            raise SpecError("URL pool needs positive weights")
        for url, _ in self.urls:
            if not url or any(c.isspace() for c in url):
                raise SpecError(f"bad URL {url!r}")
        for idx, status in self.failures.items():
            if not 100 <= status <= 599:
                raise SpecError(f"bad status {status} for request {idx}")

    @property
    def total_requests(self) -> int:
        return self.connections * self.requests_per_connection

    # INI round trip -------------------------------------------------------

    @classmethod
    def from_ini(cls, text: str) -> "WorkloadSpec":
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise SpecError(str(exc)) from None
        if not cp.has_section("workload"):
            raise SpecError("missing [workload] section")
        sec = cp["workload"]
        spec = cls()
        known = set(cls.__dataclass_fields__)
        for key, raw in sec.items():
            if key not in known:
                raise SpecError(f"unknown workload key {key!r}")
            try:
                setattr(spec, key, _parse_value(key, raw, getattr(spec, key)))
            except ValueError as exc:
                raise SpecError(f"{key}: {exc}") from None
        spec.validate()
        return spec

    def to_ini(self) -> str:
        lines = ["[workload]"]
        for key, value in asdict(self).items():
            if value is None:
                continue
            lines.append(f"{key} = {_format_value(key, value)}")
        return "\n".join(lines) + "\n"


def _parse_range(raw: str) -> Range:
    raw = raw.strip()
    if "-" in raw:
        lo, hi = raw.split("-", 1)
        return int(lo), int(hi)
    n = int(raw)
    return n, n


def _parse_value(key: str, raw: str, current):
    raw = raw.strip()
    if key == "urls":
        out = []
        for item in raw.split(","):
            item = item.strip()
            if not item:
                continue
            url, _, w = item.rpartition("*")
            out.append((url, float(w)) if url else (item, 1.0))
        return out
    if key == "failures":
        out = {}
        for item in raw.split(","):
            if item.strip():
                idx, status = item.split(":")
                out[int(idx)] = int(status)
        return out
    if key == "service_times":
        return [int(x) for x in raw.split(",") if x.strip()]
    if key == "control_traffic":
        if raw.lower() in ("1", "yes", "true", "on"):
            return True
        if raw.lower() in ("0", "no", "false", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(current, tuple):
        return _parse_range(raw)
    if isinstance(current, int):
        return int(raw)
    return raw


def _format_value(key: str, value) -> str:
    if key == "urls":
        return ", ".join(f"{u}*{w:g}" for u, w in value)
    if key == "failures":
        return ", ".join(f"{i}:{s}" for i, s in sorted(value.items()))
    if key == "service_times":
        return ", ".join(str(x) for x in value)
    if isinstance(value, (tuple, list)):
        return f"{value[0]}-{value[1]}"
    if isinstance(value, bool):
        return "yes" if value else "no"
    return str(value)


@dataclass
class OracleEntry:
    connection: int
    index: int
    global_index: int
    client_ip: str
    client_port: int
    server_ip: str
    server_port: int
    method: str
    url: str
    status: int
    request_ts: int  # segment that completes the request header
    request_final_ts: int  # PSH segment
    response_ts: int
    response_final_ts: int
    execution_us: int
    request_segments: int
    response_segments: int
    request_bytes: int
    response_bytes: int

    @property
    def service_time_us(self) -> int:
        return self.response_ts - self.request_ts


@dataclass
class OracleLog:
    seed: int
    requests: List[OracleEntry] = field(default_factory=list)
    packets: int = 0
    data_packets: int = 0
    control_packets: int = 0
    bytes: int = 0

    def service_times(self) -> List[int]:
        return [r.service_time_us for r in self.requests]

    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "packets": self.packets,
            "data_packets": self.data_packets,
            "control_packets": self.control_packets,
            "bytes": self.bytes,
            "requests": [dict(asdict(r), service_time_us=r.service_time_us) for r in self.requests],
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "OracleLog":
        doc = json.loads(text)
        names = set(OracleEntry.__dataclass_fields__)
        reqs = [OracleEntry(**{k: v for k, v in r.items() if k in names}) for r in doc["requests"]]
        return cls(doc["seed"], reqs, doc["packets"], doc["data_packets"], doc["control_packets"], doc["bytes"])


def _draw(rng: random.Random, r: Range) -> int:
    return r[0] if r[0] == r[1] else rng.randint(r[0], r[1])


def _pad_headers(head: str, target: int) -> str:
    # head ends with the last header line's CRLF; the blank line is added later
    missing = target - len(head) - 2
    if missing >= len("X-Pad: \r\n") + 1:
        head += "X-Pad: " + "p" * (missing - len("X-Pad: \r\n")) + "\r\n"
    return head


def build_request(method: str, url: str, host: str, body: int, header_size: int) -> Tuple[bytes, int]:
    head = f"{method} {url} HTTP/1.1\r\nHost: {host}\r\nUser-Agent: sdnmon-gen/1\r\n"
    if body:
        head += f"Content-Length: {body}\r\n"
    head = _pad_headers(head, header_size) + "\r\n"
    raw = head.encode("latin-1")
    return raw + _filler(body), len(raw)


def build_response(status: int, body: int, header_size: int) -> Tuple[bytes, int]:
    try:
        reason = http.HTTPStatus(status).phrase
    except ValueError:
        reason = "Status"
    head = f"HTTP/1.1 {status} {reason}\r\nContent-Type: text/plain\r\nContent-Length: {body}\r\n"
    head = _pad_headers(head, header_size) + "\r\n"
    raw = head.encode("latin-1")
    return raw + _filler(body), len(raw)


def _filler(n: int) -> bytes:
    if n > len(_FILLER):
        return (_FILLER * (n // len(_FILLER) + 1))[:n]
    return _FILLER[:n]


def client_address(conn: int) -> str:
    return f"10.0.{1 + conn // 250}.{1 + conn % 250}"


@dataclass
class _Pkt:
    ts: int
    order: int
    from_client: bool
    flags: TcpFlags
    payload: bytes = b""


class _Conn:
    """Collects one connection's packets and assigns sequence numbers."""

    def __init__(self):
        self.pkts: List[_Pkt] = []

    def add(self, ts: int, from_client: bool, flags: TcpFlags, payload: bytes = b"") -> None:
        self.pkts.append(_Pkt(ts, len(self.pkts), from_client, flags, payload))

    def message(self, start: int, gap: int, from_client: bool, data: bytes, mss: int) -> List[int]:
        times = []
        chunks = [data[i:i + mss] for i in range(0, len(data), mss)] or [b""]
        for j, chunk in enumerate(chunks):
            ts = start + j * gap
            self.add(ts, from_client, PSH_ACK if j == len(chunks) - 1 else ACK, chunk)
            times.append(ts)
        return times


def generate_records(spec: WorkloadSpec, seed: int) -> Tuple[List[PcapRecord], OracleLog]:
    spec.validate()
    rng = random.Random(seed)
    oracle = OracleLog(seed)
    urls = [u for u, _ in spec.urls]
    weights = [w for _, w in spec.urls]
    server_mac = mac_bytes("02:00:00:00:00:02")
    host = f"{spec.server_ip}:{spec.server_port}"
    gap = spec.segment_gap_us
    everything: List[Tuple[int, int, int, bytes]] = []

    for c in range(spec.connections):
        conn = _Conn()
        cip = client_address(c)
        cport = spec.client_port_base + c
        t0 = _draw(rng, spec.start_spread_us)
        hs = spec.handshake_rtt_us // 2
        if spec.control_traffic:
            conn.add(t0, True, TcpFlags.SYN)
            conn.add(t0 + hs, False, TcpFlags.SYN | ACK)
            conn.add(t0 + 2 * hs, True, ACK)
            ready = t0 + 2 * hs + 1
        else:
            ready = t0
        req_final: List[int] = []
        resp_final: List[int] = []
        for i in range(spec.requests_per_connection):
            g = c * spec.requests_per_connection + i
            url = rng.choices(urls, weights)[0]
            req_body = _draw(rng, spec.request_body)
            req_hdr = _draw(rng, spec.request_header_size)
            resp_body = _draw(rng, spec.response_body)
            resp_hdr = _draw(rng, spec.response_header_size)
            if spec.service_times is not None:
                execution = spec.service_times[g % len(spec.service_times)]
            else:
                execution = _draw(rng, spec.service_time_us)
            think = _draw(rng, spec.think_time_us)
            status = spec.failures.get(g, 200)
            method = "POST" if req_body else "GET"

            start = ready if i == 0 else req_final[i - 1] + think
            if i >= spec.pipeline_depth:
                start = max(start, resp_final[i - spec.pipeline_depth] + think)
            req, req_head_len = build_request(method, url, host, req_body, req_hdr)
            times = conn.message(start, gap, True, req, spec.mss)
            req_ts = times[(req_head_len - 1) // spec.mss]
            req_final.append(times[-1])
            if spec.control_traffic:
                conn.add(times[-1] + spec.ack_delay_us, False, ACK)

            rstart = req_final[i] + execution
            if i:
                rstart = max(rstart, resp_final[i - 1] + 1)
            resp, resp_head_len = build_response(status, resp_body, resp_hdr)
            rtimes = conn.message(rstart, gap, False, resp, spec.mss)
            resp_final.append(rtimes[-1])
            if spec.control_traffic:
                conn.add(rtimes[-1] + spec.ack_delay_us, True, ACK)
            oracle.requests.append(OracleEntry(
                c, i, g, cip, cport, spec.server_ip, spec.server_port, method, url, status,
                req_ts, times[-1], rtimes[(resp_head_len - 1) // spec.mss], rtimes[-1], execution,
                len(times), len(rtimes), len(req), len(resp)))
        if spec.control_traffic:
            last = max(resp_final + req_final + [ready])
            conn.add(last + 10, True, TcpFlags.FIN | ACK)
            conn.add(last + 10 + hs, False, TcpFlags.FIN | ACK)
            conn.add(last + 10 + 2 * hs, True, ACK)

        client_mac = bytes([0x02, 0, 0, 0, 0x10 + (c >> 8) % 0xE0, c & 0xFF])
        to_server = FrameBuilder(src_mac=client_mac, dst_mac=server_mac)
        to_client = FrameBuilder(src_mac=server_mac, dst_mac=client_mac)
        c_seq = rng.getrandbits(32)
        s_seq = rng.getrandbits(32)
        for p in sorted(conn.pkts, key=lambda p: (p.ts, p.order)):
            if p.from_client:
                frame = to_server.tcp(cip, cport, spec.server_ip, spec.server_port, c_seq,
                                      s_seq if p.flags & ACK else 0, p.flags, p.payload)
                c_seq += len(p.payload) + (1 if p.flags & (TcpFlags.SYN | TcpFlags.FIN) else 0)
            else:
                frame = to_client.tcp(spec.server_ip, spec.server_port, cip, cport, s_seq,
                                      c_seq, p.flags, p.payload)
                s_seq += len(p.payload) + (1 if p.flags & (TcpFlags.SYN | TcpFlags.FIN) else 0)
            everything.append((p.ts, c, p.order, frame))
            if p.payload:
                oracle.data_packets += 1
            else:
                oracle.control_packets += 1

    everything.sort(key=lambda x: (x[0], x[1], x[2]))
    records = [PcapRecord(ts, frame, len(frame)) for ts, _, _, frame in everything]
    oracle.packets = len(records)
    oracle.bytes = sum(len(r.data) for r in records)
    return records, oracle


def generate(spec: WorkloadSpec, seed: int) -> Tuple[bytes, OracleLog]:
    records, oracle = generate_records(spec, seed)
    return dump_bytes(records), oracle


def failure_indices(total: int, fraction: float, status: int = 500) -> Dict[int, int]:
    """Evenly spaced failure plan: every (1/fraction)-th request fails."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    step = round(1 / fraction)
    return {i: status for i in range(step - 1, total, step)}


def stream_payloads(records: Sequence[PcapRecord]) -> Dict[Tuple[str, int, str, int], bytes]:
    """Concatenated TCP payload per direction, for reassembly checks."""
    out: Dict[Tuple[str, int, str, int], bytearray] = {}
    for r in records:
        p = parse_packet(r.data, r.timestamp, r.wire_length)
        if p.tcp is None or not p.payload:
            continue
        key = (p.ipv4.src, p.tcp.src_port, p.ipv4.dst, p.tcp.dst_port)
        out.setdefault(key, bytearray()).extend(p.payload)
    return {k: bytes(v) for k, v in out.items()}
