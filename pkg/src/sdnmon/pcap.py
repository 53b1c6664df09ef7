"""Classic libpcap file reading and writing (Ethernet link type only)."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Optional, Union

from .packet import CapturedPacket, parse_packet, serialize_packet

MAGIC_USEC = 0xA1B2C3D4
MAGIC_NSEC = 0xA1B23C4D
LINKTYPE_ETHERNET = 1
DEFAULT_SNAPLEN = 262144

PathLike = Union[str, Path]


class PcapFormatError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class PcapRecord:
    timestamp: int  # microseconds
    data: bytes
    wire_length: int


class PcapReader:
    """Iterates over the records of a pcap stream.

    Byte order is taken from the magic number; nanosecond captures are
    converted to microseconds.
    """

    def __init__(self, stream: BinaryIO):
        self._stream = stream
        header = stream.read(24)
        if len(header) < 24:
            raise PcapFormatError("pcap global header truncated")
        for endian in ("<", ">"):
            (magic,) = struct.unpack(endian + "I", header[:4])
            if magic in (MAGIC_USEC, MAGIC_NSEC):
                break
        else:
            raise PcapFormatError(f"bad pcap magic {header[:4].hex()}")
        self.nanosecond = magic == MAGIC_NSEC
        self._endian = endian
        _, self.version_major, self.version_minor, _, _, self.snaplen, self.linktype = struct.unpack(
            endian + "IHHiIII", header)
        if self.linktype != LINKTYPE_ETHERNET:
            raise PcapFormatError(f"unsupported link type {self.linktype}")
        self._rec = struct.Struct(endian + "IIII")

    def __iter__(self) -> Iterator[PcapRecord]:
        read = self._stream.read
        rec = self._rec
        while True:
            hdr = read(16)
            if not hdr:
                return
            if len(hdr) < 16:
                raise PcapFormatError("pcap record header truncated")
            sec, frac, incl, orig = rec.unpack(hdr)
            data = read(incl)
            if len(data) < incl:
                raise PcapFormatError("pcap record data truncated")
            usec = frac // 1000 if self.nanosecond else frac
            yield PcapRecord(sec * 1_000_000 + usec, data, max(orig, incl))


class PcapWriter:
    def __init__(self, stream: BinaryIO, snaplen: int = DEFAULT_SNAPLEN, endian: str = "<"):
        self._stream = stream
        self._rec = struct.Struct(endian + "IIII")
        self.count = 0
        stream.write(struct.pack(endian + "IHHiIII", MAGIC_USEC, 2, 4, 0, 0, snaplen, LINKTYPE_ETHERNET))

    def write(self, data: bytes, timestamp: int, wire_length: Optional[int] = None) -> None:
        if wire_length is None:
            wire_length = len(data)
        sec, usec = divmod(timestamp, 1_000_000)
        self._stream.write(self._rec.pack(sec, usec, len(data), wire_length))
        self._stream.write(data)
        self.count += 1

    def write_packet(self, p: CapturedPacket) -> None:
        self.write(serialize_packet(p), p.timestamp, p.wire_length)


def read_records(path: PathLike) -> Iterator[PcapRecord]:
    with open(path, "rb") as f:
        yield from PcapReader(f)


def read_packets(path: PathLike) -> Iterator[CapturedPacket]:
    for r in read_records(path):
        yield parse_packet(r.data, r.timestamp, r.wire_length)


def records_from_bytes(blob: bytes) -> Iterator[PcapRecord]:
    return iter(PcapReader(io.BytesIO(blob)))


def packets_from_bytes(blob: bytes) -> Iterator[CapturedPacket]:
    for r in records_from_bytes(blob):
        yield parse_packet(r.data, r.timestamp, r.wire_length)


def write_records(path: PathLike, records: Iterable[PcapRecord]) -> int:
    with open(path, "wb") as f:
        w = PcapWriter(f)
        for r in records:
            w.write(r.data, r.timestamp, r.wire_length)
        return w.count


def dump_bytes(records: Iterable[PcapRecord]) -> bytes:
    buf = io.BytesIO()
    w = PcapWriter(buf)
    for r in records:
        w.write(r.data, r.timestamp, r.wire_length)
    return buf.getvalue()
