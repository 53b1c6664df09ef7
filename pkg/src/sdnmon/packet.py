"""Ethernet / IPv4 / TCP / UDP packet model.

Parsing keeps every byte it does not interpret (IP options, TCP options,
Ethernet padding, unknown upper layers) so that ``serialize_packet`` rebuilds
the captured bytes exactly.  Checksums are carried verbatim.
"""

from __future__ import annotations

import enum
import socket
import struct
import sys
from array import array
from dataclasses import dataclass, field, replace
from typing import Optional

ETH_HEADER_LEN = 14
IPV4_MIN_HEADER_LEN = 20
TCP_MIN_HEADER_LEN = 20
UDP_HEADER_LEN = 8

ETHERTYPE_IPV4 = 0x0800
PROTO_TCP = 6
PROTO_UDP = 17
PROTO_GRE = 47

_ETH = struct.Struct("!6s6sH")
_IPV4 = struct.Struct("!BBHHHBBH4s4s")
_TCP = struct.Struct("!HHIIBBHHH")
_UDP = struct.Struct("!HHHH")


class MalformedHeader(ValueError):
    """A header is cut short or declares an impossible length."""


class NotTcp(ValueError):
    """Raised when a TCP view is required but the packet is not TCP/IPv4."""


class TcpFlags(enum.IntFlag):
    FIN = 0x01
    SYN = 0x02
    RST = 0x04
    PSH = 0x08
    ACK = 0x10
    URG = 0x20
    ECE = 0x40
    CWR = 0x80

    @classmethod
    def from_byte(cls, value: int) -> "TcpFlags":
        if not 0 <= value <= 0xFF:
            raise ValueError(f"flags byte out of range: {value}")
        return cls(value)

    def to_byte(self) -> int:
        return int(self)

    @classmethod
    def parse(cls, text: str) -> "TcpFlags":
        """Parse ``"ACK|PSH"`` style flag lists."""
        flags = cls(0)
        for name in text.replace(",", "|").split("|"):
            name = name.strip().upper()
            if not name:
                continue
            try:
                flags |= cls[name]
            except KeyError:
                raise ValueError(f"unknown TCP flag {name!r}") from None
        return flags

    def names(self) -> str:
        return "|".join(f.name for f in TcpFlags if f in self) or "none"

    fin = property(lambda self: bool(self & TcpFlags.FIN))
    syn = property(lambda self: bool(self & TcpFlags.SYN))
    rst = property(lambda self: bool(self & TcpFlags.RST))
    psh = property(lambda self: bool(self & TcpFlags.PSH))
    ack = property(lambda self: bool(self & TcpFlags.ACK))
    urg = property(lambda self: bool(self & TcpFlags.URG))


def _ip_key(ip: str) -> bytes:
    return socket.inet_aton(ip)


@dataclass(frozen=True, slots=True)
class FiveTuple:
    protocol: int
    src_ip: str
    src_port: int
    dst_ip: str
    dst_port: int

    def reversed(self) -> "FiveTuple":
        return FiveTuple(self.protocol, self.dst_ip, self.dst_port, self.src_ip, self.src_port)

    def canonical(self) -> "FiveTuple":
        """Direction-free form: the lower (address, port) endpoint is the source."""
        if (_ip_key(self.src_ip), self.src_port) <= (_ip_key(self.dst_ip), self.dst_port):
            return self
        return self.reversed()

    def __str__(self) -> str:
        return f"{self.protocol}:{self.src_ip}:{self.src_port}->{self.dst_ip}:{self.dst_port}"


@dataclass(frozen=True, slots=True)
class Ethernet:
    dst: bytes
    src: bytes
    ethertype: int

    def pack(self) -> bytes:
        return _ETH.pack(self.dst, self.src, self.ethertype)


@dataclass(frozen=True, slots=True)
class IPv4:
    version: int
    ihl: int
    tos: int
    total_length: int
    identification: int
    flags_fragment: int
    ttl: int
    protocol: int
    checksum: int
    src: str
    dst: str
    options: bytes = b""

    @property
    def header_length(self) -> int:
        return self.ihl * 4

    def pack(self) -> bytes:
        return _IPV4.pack(
            (self.version << 4) | self.ihl,
            self.tos,
            self.total_length,
            self.identification,
            self.flags_fragment,
            self.ttl,
            self.protocol,
            self.checksum,
            socket.inet_aton(self.src),
            socket.inet_aton(self.dst),
        ) + self.options


@dataclass(frozen=True, slots=True)
class Tcp:
    src_port: int
    dst_port: int
    seq: int
    ack: int
    data_offset: int
    reserved: int
    flags: TcpFlags
    window: int
    checksum: int
    urgent: int
    options: bytes = b""

    @property
    def header_length(self) -> int:
        return self.data_offset * 4

    def pack(self) -> bytes:
        return _TCP.pack(
            self.src_port,
            self.dst_port,
            self.seq,
            self.ack,
            (self.data_offset << 4) | self.reserved,
            int(self.flags),
            self.window,
            self.checksum,
            self.urgent,
        ) + self.options


@dataclass(frozen=True, slots=True)
class Udp:
    src_port: int
    dst_port: int
    length: int
    checksum: int

    def pack(self) -> bytes:
        return _UDP.pack(self.src_port, self.dst_port, self.length, self.checksum)


@dataclass(frozen=True, slots=True)
class CapturedPacket:
    """One captured L2 frame.

    ``ipv4`` is None for non-IPv4 frames and ``tcp``/``udp`` are None when the
    transport is something else; whatever was not parsed sits in ``payload``.
    ``trailer`` holds bytes after the IPv4 datagram (Ethernet padding).
    """

    timestamp: int
    wire_length: int
    eth: Ethernet
    ipv4: Optional[IPv4] = None
    tcp: Optional[Tcp] = None
    udp: Optional[Udp] = None
    payload: bytes = b""
    trailer: bytes = b""

    @property
    def is_tcp(self) -> bool:
        return self.tcp is not None

    @property
    def captured_length(self) -> int:
        n = ETH_HEADER_LEN + len(self.payload) + len(self.trailer)
        if self.ipv4 is not None:
            n += self.ipv4.header_length
        if self.tcp is not None:
            n += self.tcp.header_length
        elif self.udp is not None:
            n += UDP_HEADER_LEN
        return n

    @property
    def truncated(self) -> bool:
        return self.captured_length < self.wire_length

    @property
    def payload_wire_length(self) -> int:
        """Transport payload length as declared by the IPv4 header."""
        if self.ipv4 is None:
            return len(self.payload)
        n = self.ipv4.total_length - self.ipv4.header_length
        if self.tcp is not None:
            n -= self.tcp.header_length
        elif self.udp is not None:
            n -= UDP_HEADER_LEN
        return max(n, 0)

    def with_timestamp(self, timestamp: int) -> "CapturedPacket":
        return replace(self, timestamp=timestamp)


def parse_packet(data: bytes, timestamp: int = 0, wire_length: Optional[int] = None) -> CapturedPacket:
    """Parse an Ethernet frame.

    Headers that are fully present are always parsed even when the capture
    is shorter than the lengths the IPv4 header declares; a header cut part
    way raises MalformedHeader.
    """
    data = bytes(data)
    n = len(data)
    if wire_length is None:
        wire_length = n
    elif wire_length < n:
        raise MalformedHeader(f"wire length {wire_length} shorter than captured {n}")
    if n < ETH_HEADER_LEN:
        raise MalformedHeader(f"frame of {n} bytes has no Ethernet header")
    eth = Ethernet(*_ETH.unpack_from(data, 0))
    if eth.ethertype != ETHERTYPE_IPV4:
        return CapturedPacket(timestamp, wire_length, eth, payload=data[ETH_HEADER_LEN:])

    off = ETH_HEADER_LEN
    if n < off + IPV4_MIN_HEADER_LEN:
        raise MalformedHeader("IPv4 header truncated")
    vihl, tos, total, ident, ffrag, ttl, proto, csum, src, dst = _IPV4.unpack_from(data, off)
    version, ihl = vihl >> 4, vihl & 0x0F
    if version != 4 or ihl < 5:
        raise MalformedHeader(f"bad IPv4 version/IHL {version}/{ihl}")
    ip_hlen = ihl * 4
    if total < ip_hlen:
        raise MalformedHeader(f"IPv4 total length {total} below header length {ip_hlen}")
    if n < off + ip_hlen:
        raise MalformedHeader("IPv4 options truncated")
    if off + total > wire_length:
        raise MalformedHeader(f"IPv4 total length {total} exceeds wire length {wire_length}")
    ip = IPv4(
        version, ihl, tos, total, ident, ffrag, ttl, proto, csum,
        socket.inet_ntoa(src), socket.inet_ntoa(dst),
        data[off + IPV4_MIN_HEADER_LEN: off + ip_hlen],
    )
    ip_end = min(off + total, n)
    trailer = data[ip_end:]
    off += ip_hlen
    # non-first fragments carry no transport header
    if ffrag & 0x1FFF:
        return CapturedPacket(timestamp, wire_length, eth, ip, payload=data[off:ip_end], trailer=trailer)

    if proto == PROTO_TCP:
        if ip_end < off + TCP_MIN_HEADER_LEN:
            raise MalformedHeader("TCP header truncated")
        sport, dport, seq, ack, offres, flags, win, tcsum, urg = _TCP.unpack_from(data, off)
        doff = offres >> 4
        if doff < 5:
            raise MalformedHeader(f"bad TCP data offset {doff}")
        tcp_hlen = doff * 4
        if ip_end < off + tcp_hlen:
            raise MalformedHeader("TCP options truncated")
        if ip_hlen + tcp_hlen > total:
            raise MalformedHeader("TCP header exceeds IPv4 total length")
        tcp = Tcp(sport, dport, seq, ack, doff, offres & 0x0F, TcpFlags(flags), win, tcsum, urg,
                  data[off + TCP_MIN_HEADER_LEN: off + tcp_hlen])
        return CapturedPacket(timestamp, wire_length, eth, ip, tcp=tcp,
                              payload=data[off + tcp_hlen: ip_end], trailer=trailer)
    if proto == PROTO_UDP:
        if ip_end < off + UDP_HEADER_LEN:
            raise MalformedHeader("UDP header truncated")
        udp = Udp(*_UDP.unpack_from(data, off))
        return CapturedPacket(timestamp, wire_length, eth, ip, udp=udp,
                              payload=data[off + UDP_HEADER_LEN: ip_end], trailer=trailer)
    return CapturedPacket(timestamp, wire_length, eth, ip, payload=data[off:ip_end], trailer=trailer)


def serialize_packet(p: CapturedPacket) -> bytes:
    parts = [p.eth.pack()]
    if p.ipv4 is not None:
        parts.append(p.ipv4.pack())
    if p.tcp is not None:
        parts.append(p.tcp.pack())
    elif p.udp is not None:
        parts.append(p.udp.pack())
    parts.append(p.payload)
    parts.append(p.trailer)
    return b"".join(parts)


def flow_key(p: CapturedPacket) -> FiveTuple:
    if p.ipv4 is None or p.tcp is None:
        raise NotTcp("packet is not TCP over IPv4")
    return FiveTuple(PROTO_TCP, p.ipv4.src, p.tcp.src_port, p.ipv4.dst, p.tcp.dst_port)


def internet_checksum(data: bytes) -> int:
    """RFC 1071 ones' complement checksum."""
    if len(data) % 2:
        data += b"\x00"
    words = array("H", data)
    total = sum(words)
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    total = ~total & 0xFFFF
    if sys.byteorder == "little":
        total = ((total & 0xFF) << 8) | (total >> 8)
    return total


def mac_bytes(mac: str) -> bytes:
    parts = mac.split(":")
    if len(parts) != 6:
        raise ValueError(f"bad MAC address {mac!r}")
    return bytes(int(x, 16) for x in parts)


def mac_str(mac: bytes) -> str:
    return ":".join(f"{b:02x}" for b in mac)


@dataclass
class FrameBuilder:
    """Builds IPv4 frames with correct lengths and checksums."""

    src_mac: bytes = b"\x02\x00\x00\x00\x00\x01"
    dst_mac: bytes = b"\x02\x00\x00\x00\x00\x02"
    ttl: int = 64
    _ident: dict = field(default_factory=dict)

    def ipv4(self, src: str, dst: str, proto: int, l4: bytes, df: bool = True) -> bytes:
        ident = self._ident.get((src, dst), 0)
        self._ident[(src, dst)] = (ident + 1) & 0xFFFF
        hdr = _IPV4.pack(0x45, 0, IPV4_MIN_HEADER_LEN + len(l4), ident, 0x4000 if df else 0,
                         self.ttl, proto, 0, socket.inet_aton(src), socket.inet_aton(dst))
        csum = internet_checksum(hdr)
        hdr = hdr[:10] + struct.pack("!H", csum) + hdr[12:]
        return _ETH.pack(self.dst_mac, self.src_mac, ETHERTYPE_IPV4) + hdr + l4

    def tcp(self, src: str, sport: int, dst: str, dport: int, seq: int, ack: int,
            flags: TcpFlags, payload: bytes = b"", window: int = 65535) -> bytes:
        seg = _TCP.pack(sport, dport, seq & 0xFFFFFFFF, ack & 0xFFFFFFFF, 5 << 4, int(flags),
                        window, 0, 0) + payload
        pseudo = socket.inet_aton(src) + socket.inet_aton(dst) + struct.pack("!BBH", 0, PROTO_TCP, len(seg))
        csum = internet_checksum(pseudo + seg)
        seg = seg[:16] + struct.pack("!H", csum) + seg[18:]
        return self.ipv4(src, dst, PROTO_TCP, seg)

    def udp(self, src: str, sport: int, dst: str, dport: int, payload: bytes = b"") -> bytes:
        seg = _UDP.pack(sport, dport, UDP_HEADER_LEN + len(payload), 0) + payload
        return self.ipv4(src, dst, PROTO_UDP, seg)
