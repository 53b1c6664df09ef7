"""Remote analysis endpoint.

Accepts raw mirrored frames, tunneled frames and sniffer records, turns them
into analysis events and drives one ``AnalysisEngine``.  File mode reads pcap
and record files; socket mode listens on UDP, one frame or record per
datagram.
"""

from __future__ import annotations

import enum
import heapq
import logging
import queue
import socket
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import BinaryIO, Dict, Iterator, List, Optional, Tuple

from .analysis import (
    AnalysisEngine,
    AnalysisEvent,
    WindowAggregate,
    event_from_record,
    header_only_event,
    report_csv,
    report_json,
    totals,
)
from .packet import MalformedHeader, parse_packet
from .pcap import PcapReader, PcapWriter
from .sniffer import DEFAULT_PORTS, HttpExtractor, MalformedRecord, decode_record, read_record_file
from .tunnel import TunnelError, decapsulate

log = logging.getLogger(__name__)


class IngestSource(enum.Enum):
    RAW_MIRROR = "raw"
    TUNNELED = "tunneled"
    RECORDS = "records"


class CollectorError(RuntimeError):
    """Startup failure: unreadable input or unbindable socket."""


@dataclass
class SourceStats:
    ingested: int = 0
    events: int = 0
    malformed: int = 0
    filtered: int = 0


class Collector:
    """Normalizes every input into ``AnalysisEvent``s.

    With ``deep_inspection`` set, mirrored frames are parsed for HTTP headers
    (needs payload, i.e. full or long-truncated mirroring) instead of relying
    on the PSH flag.
    """

    def __init__(self, engine: Optional[AnalysisEngine] = None, watched_ports=DEFAULT_PORTS,
                 deep_inspection: bool = False, dump: Optional[PcapWriter] = None,
                 analyze: bool = True):
        self.engine = engine if engine is not None else AnalysisEngine()
        self.watched_ports = frozenset(watched_ports)
        self.deep_inspection = deep_inspection
        self.dump = dump
        self.analyze = analyze
        self.stats: Dict[IngestSource, SourceStats] = {s: SourceStats() for s in IngestSource}
        self.samples = []
        self.windows: List[WindowAggregate] = []
        self._extractors = {s: HttpExtractor(self.watched_ports) for s in IngestSource}

    def ingest(self, src: IngestSource, data: bytes, arrival_ts: int,
               wire_length: Optional[int] = None) -> List[AnalysisEvent]:
        st = self.stats[src]
        st.ingested += 1
        if self.dump is not None and src != IngestSource.RECORDS:
            self.dump.write(data, arrival_ts, wire_length)
        if not self.analyze:
            st.filtered += 1
            return []
        try:
            if src == IngestSource.RECORDS:
                events = [event_from_record(decode_record(data))]
            else:
                if src == IngestSource.TUNNELED:
                    _, p = decapsulate(data, arrival_ts)
                else:
                    p = parse_packet(data, arrival_ts, wire_length)
                if self.deep_inspection:
                    events = [event_from_record(r) for r in self._extractors[src].extract(p)]
                else:
                    e = header_only_event(p, self.watched_ports)
                    events = [e] if e is not None else []
        except (MalformedHeader, MalformedRecord, TunnelError) as exc:
            st.malformed += 1
            log.debug("malformed %s input: %s", src.value, exc)
            return []
        if events:
            st.events += len(events)
        else:
            st.filtered += 1
        return events

    def process(self, src: IngestSource, data: bytes, arrival_ts: int,
                wire_length: Optional[int] = None) -> List[AnalysisEvent]:
        events = self.ingest(src, data, arrival_ts, wire_length)
        for e in events:
            s = self.engine.observe(e)
            if s is not None:
                self.samples.append(s)
        return events

    def rollup(self, up_to: int) -> List[WindowAggregate]:
        ws = self.engine.rollup(up_to)
        self.windows.extend(ws)
        return ws

    def finish(self) -> List[WindowAggregate]:
        ws = self.engine.flush()
        self.windows.extend(ws)
        return ws

    def summary(self) -> dict:
        return {
            "sources": {s.value: asdict(v) for s, v in self.stats.items()},
            "engine": asdict(self.engine.stats),
            "pending": self.engine.pending_total(),
            "totals": totals(self.windows),
        }


# inputs -------------------------------------------------------------------

def _pcap_items(path, src: IngestSource) -> Iterator[Tuple[int, int, IngestSource, bytes, int]]:
    with open(path, "rb") as f:
        for n, r in enumerate(PcapReader(f)):
            yield r.timestamp, n, src, r.data, r.wire_length


def _record_items(path) -> Iterator[Tuple[int, int, IngestSource, bytes, int]]:
    with open(path, "rb") as f:
        for n, data in enumerate(read_record_file(f)):
            # order by capture time; undecodable records sort first and are counted there
            try:
                ts = decode_record(data).timestamp
            except MalformedRecord:
                ts = 0
            yield ts, n, IngestSource.RECORDS, data, len(data)


@dataclass
class CollectorConfig:
    pcap_in: List[str] = field(default_factory=list)
    tunnel_pcap_in: List[str] = field(default_factory=list)
    records_in: List[str] = field(default_factory=list)
    records_listen: Optional[Tuple[str, int]] = None
    mirror_listen: Optional[Tuple[str, int]] = None
    tunnel_listen: Optional[Tuple[str, int]] = None
    window_us: int = 1_000_000
    report: Optional[str] = None
    dump: Optional[str] = None
    dump_only: bool = False
    deep_inspection: bool = False
    watched_ports: frozenset = DEFAULT_PORTS
    top_n: int = 10
    duration_s: Optional[float] = None

    @property
    def has_sockets(self) -> bool:
        return any((self.records_listen, self.mirror_listen, self.tunnel_listen))


def write_report(path: str, windows: List[WindowAggregate], top_n: int, extra: Optional[dict] = None) -> None:
    text = report_csv(windows, top_n) if path.endswith(".csv") else report_json(windows, top_n, extra)
    Path(path).write_text(text, encoding="utf-8")


def run_collector(cfg: CollectorConfig) -> dict:
    """Run until file inputs are exhausted (or the socket duration ends).

    Returns the exit summary; reports are written to ``cfg.report``.
    """
    for path in cfg.pcap_in + cfg.tunnel_pcap_in + cfg.records_in:
        if not Path(path).is_file():
            raise CollectorError(f"cannot read {path}")
    plan = [(cfg.records_listen, IngestSource.RECORDS), (cfg.mirror_listen, IngestSource.RAW_MIRROR),
            (cfg.tunnel_listen, IngestSource.TUNNELED)]
    socks = []
    try:
        for addr, src in plan:
            if addr is not None:
                socks.append((_bind(addr), src))
    except CollectorError:
        for s, _ in socks:
            s.close()
        raise
    dump_file: Optional[BinaryIO] = open(cfg.dump, "wb") if cfg.dump else None
    try:
        dump = PcapWriter(dump_file) if dump_file else None
        collector = Collector(AnalysisEngine(cfg.window_us), cfg.watched_ports,
                              cfg.deep_inspection, dump, analyze=not cfg.dump_only)
        streams = [_pcap_items(p, IngestSource.RAW_MIRROR) for p in cfg.pcap_in]
        streams += [_pcap_items(p, IngestSource.TUNNELED) for p in cfg.tunnel_pcap_in]
        streams += [_record_items(p) for p in cfg.records_in]
        for ts, _, src, data, wire in heapq.merge(*streams, key=lambda x: (x[0], x[1])):
            collector.process(src, data, ts, wire)
        if socks:
            _serve_sockets(collector, cfg, socks)
        collector.finish()
        summary = collector.summary()
        if dump is not None:
            summary["dumped"] = dump.count
        if cfg.report:
            write_report(cfg.report, collector.windows, cfg.top_n, {"summary": summary})
        summary["windows"] = len(collector.windows)
        return summary
    finally:
        if dump_file:
            dump_file.close()
        for sock, _ in socks:
            sock.close()


def _bind(addr: Tuple[str, int]) -> socket.socket:
    s = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    try:
        s.bind(addr)
    except OSError as exc:
        s.close()
        raise CollectorError(f"cannot bind {addr[0]}:{addr[1]}: {exc}") from None
    s.settimeout(0.2)
    return s


def _serve_sockets(collector: Collector, cfg: CollectorConfig,
                   socks: List[Tuple[socket.socket, IngestSource]]) -> None:
    """One receiver thread per socket, all feeding a single ordered queue."""
    q: "queue.Queue[Tuple[IngestSource, bytes, int]]" = queue.Queue()
    stop = threading.Event()

    def receive(sock: socket.socket, src: IngestSource) -> None:
        while not stop.is_set():
            try:
                data = sock.recv(65535)
            except socket.timeout:
                continue
            except OSError:
                return
            q.put((src, data, time.time_ns() // 1000))

    threads = [threading.Thread(target=receive, args=sp, daemon=True) for sp in socks]
    for t in threads:
        t.start()
    deadline = None if cfg.duration_s is None else time.monotonic() + cfg.duration_s
    grace = cfg.window_us
    try:
        while deadline is None or time.monotonic() < deadline:
            try:
                src, data, ts = q.get(timeout=0.1)
            except queue.Empty:
                collector.rollup(time.time_ns() // 1000 - grace)
                continue
            collector.process(src, data, ts, len(data))
    except KeyboardInterrupt:
        log.info("collector interrupted")
    finally:
        stop.set()
        for t in threads:
            t.join()
        while not q.empty():
            src, data, ts = q.get_nowait()
            collector.process(src, data, ts, len(data))
