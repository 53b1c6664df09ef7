"""GRE and VXLAN encapsulation of whole Ethernet frames."""

from __future__ import annotations

import socket
import struct
import zlib
from dataclasses import dataclass
from typing import Optional, Tuple, Union

from .packet import (
    ETH_HEADER_LEN,
    ETHERTYPE_IPV4,
    IPV4_MIN_HEADER_LEN,
    PROTO_GRE,
    PROTO_UDP,
    UDP_HEADER_LEN,
    CapturedPacket,
    MalformedHeader,
    internet_checksum,
    mac_bytes,
    mac_str,
    parse_packet,
    serialize_packet,
)

VXLAN_PORT = 4789
VXLAN_HEADER_LEN = 8
VXLAN_FLAG_I = 0x08
GRE_BASE_LEN = 4
GRE_FLAG_CSUM = 0x8000
GRE_FLAG_KEY = 0x2000
GRE_FLAG_SEQ = 0x1000
ETHERTYPE_TEB = 0x6558

OUTER_TTL = 64
OUTER_DF = 0x4000
SRC_PORT_BASE = 49152
SRC_PORT_SPAN = 65536 - SRC_PORT_BASE

VXLAN_OVERHEAD = ETH_HEADER_LEN + IPV4_MIN_HEADER_LEN + UDP_HEADER_LEN + VXLAN_HEADER_LEN
GRE_OVERHEAD = ETH_HEADER_LEN + IPV4_MIN_HEADER_LEN + GRE_BASE_LEN
GRE_KEYED_OVERHEAD = GRE_OVERHEAD + 4


class TunnelError(ValueError):
    pass


class NotTunneled(TunnelError):
    pass


class MalformedTunnelHeader(TunnelError):
    pass


@dataclass(frozen=True)
class TunnelSpec:
    id: str
    protocol: str  # "vxlan" | "gre"
    outer_src_mac: str = "00:00:00:00:00:00"
    outer_dst_mac: str = "00:00:00:00:00:00"
    outer_src_ip: str = "0.0.0.0"
    outer_dst_ip: str = "0.0.0.0"
    vni: int = 0
    key: Optional[int] = None

    def __post_init__(self):
        if self.protocol not in ("vxlan", "gre"):
            raise ValueError(f"unknown tunnel protocol {self.protocol!r}")
        if not 0 <= self.vni < 1 << 24:
            raise ValueError(f"VNI {self.vni} does not fit in 24 bits")
        if self.key is not None and not 0 <= self.key < 1 << 32:
            raise ValueError(f"GRE key {self.key} does not fit in 32 bits")
        mac_bytes(self.outer_src_mac)
        mac_bytes(self.outer_dst_mac)
        socket.inet_aton(self.outer_src_ip)
        socket.inet_aton(self.outer_dst_ip)

    @property
    def overhead(self) -> int:
        if self.protocol == "vxlan":
            return VXLAN_OVERHEAD
        return GRE_KEYED_OVERHEAD if self.key is not None else GRE_OVERHEAD


def entropy_port(inner: bytes) -> int:
    """UDP source port derived from the inner flow, folded into 49152-65535."""
    try:
        p = parse_packet(inner)
    except MalformedHeader:
        p = None
    if p is not None and p.ipv4 is not None and (p.tcp or p.udp):
        l4 = p.tcp or p.udp
        t = (p.ipv4.protocol, p.ipv4.src, l4.src_port, p.ipv4.dst, l4.dst_port)
        a, b = (t[1], t[2]), (t[3], t[4])
        if (socket.inet_aton(a[0]), a[1]) > (socket.inet_aton(b[0]), b[1]):
            a, b = b, a
        key = struct.pack("!B4sH4sH", t[0], socket.inet_aton(a[0]), a[1], socket.inet_aton(b[0]), b[1])
    else:
        key = inner[:ETH_HEADER_LEN]
    return SRC_PORT_BASE + zlib.crc32(key) % SRC_PORT_SPAN


def _outer(spec: TunnelSpec, proto: int, body: bytes) -> bytes:
    hdr = struct.pack("!BBHHHBBH4s4s", 0x45, 0, IPV4_MIN_HEADER_LEN + len(body), 0, OUTER_DF,
                      OUTER_TTL, proto, 0,
                      socket.inet_aton(spec.outer_src_ip), socket.inet_aton(spec.outer_dst_ip))
    hdr = hdr[:10] + struct.pack("!H", internet_checksum(hdr)) + hdr[12:]
    eth = struct.pack("!6s6sH", mac_bytes(spec.outer_dst_mac), mac_bytes(spec.outer_src_mac), ETHERTYPE_IPV4)
    return eth + hdr + body


def encapsulate(spec: TunnelSpec, inner: Union[CapturedPacket, bytes]) -> bytes:
    frame = serialize_packet(inner) if isinstance(inner, CapturedPacket) else bytes(inner)
    if spec.protocol == "vxlan":
        vx = struct.pack("!B3sI", VXLAN_FLAG_I, b"\x00\x00\x00", spec.vni << 8)
        udp = struct.pack("!HHHH", entropy_port(frame), VXLAN_PORT,
                          UDP_HEADER_LEN + len(vx) + len(frame), 0)
        return _outer(spec, PROTO_UDP, udp + vx + frame)
    if spec.key is None:
        gre = struct.pack("!HH", 0, ETHERTYPE_TEB)
    else:
        gre = struct.pack("!HHI", GRE_FLAG_KEY, ETHERTYPE_TEB, spec.key)
    return _outer(spec, PROTO_GRE, gre + frame)


def decapsulate(data: bytes, arrival_ts: int = 0) -> Tuple[TunnelSpec, CapturedPacket]:
    """Strip the outer headers and return (observed tunnel, inner packet).

    The inner packet is stamped with ``arrival_ts``, the time it reached us.
    """
    try:
        outer = parse_packet(data)
    except MalformedHeader as exc:
        raise MalformedTunnelHeader(f"outer headers: {exc}") from exc
    ip = outer.ipv4
    if ip is None:
        raise NotTunneled("outer frame is not IPv4")
    if outer.truncated:
        raise MalformedTunnelHeader("outer datagram shorter than its IPv4 total length")
    body = outer.payload
    common = dict(
        outer_src_mac=mac_str(outer.eth.src),
        outer_dst_mac=mac_str(outer.eth.dst),
        outer_src_ip=ip.src,
        outer_dst_ip=ip.dst,
    )
    if outer.udp is not None and outer.udp.dst_port == VXLAN_PORT:
        if len(body) < VXLAN_HEADER_LEN:
            raise MalformedTunnelHeader("VXLAN header truncated")
        flags, _, word = struct.unpack_from("!B3sI", body)
        if not flags & VXLAN_FLAG_I:
            raise MalformedTunnelHeader(f"VXLAN flags 0x{flags:02x} lack the I flag")
        spec = TunnelSpec("observed", "vxlan", vni=word >> 8, **common)
        inner = body[VXLAN_HEADER_LEN:]
    elif outer.udp is None and outer.tcp is None and ip.protocol == PROTO_GRE:
        if len(body) < GRE_BASE_LEN:
            raise MalformedTunnelHeader("GRE header truncated")
        fl, ptype = struct.unpack_from("!HH", body)
        if fl & 0x0007:
            raise MalformedTunnelHeader(f"GRE version {fl & 7} unsupported")
        if ptype != ETHERTYPE_TEB:
            raise MalformedTunnelHeader(f"GRE protocol type 0x{ptype:04x} is not Ethernet bridging")
        off = GRE_BASE_LEN
        key = None
        if fl & GRE_FLAG_CSUM:
            off += 4
        if fl & GRE_FLAG_KEY:
            if len(body) < off + 4:
                raise MalformedTunnelHeader("GRE key truncated")
            (key,) = struct.unpack_from("!I", body, off)
            off += 4
        if fl & GRE_FLAG_SEQ:
            off += 4
        if len(body) < off:
            raise MalformedTunnelHeader("GRE optional fields truncated")
        spec = TunnelSpec("observed", "gre", key=key, **common)
        inner = body[off:]
    else:
        raise NotTunneled("neither VXLAN nor GRE")
    # a truncated mirror may have been tunneled; trust the inner IPv4 length
    wire = len(inner)
    if len(inner) >= ETH_HEADER_LEN + 4 and inner[12:14] == b"\x08\x00":
        (total,) = struct.unpack_from("!H", inner, ETH_HEADER_LEN + 2)
        wire = max(wire, ETH_HEADER_LEN + total)
    try:
        return spec, parse_packet(inner, arrival_ts, wire)
    except MalformedHeader as exc:
        raise MalformedTunnelHeader(f"inner frame: {exc}") from exc
