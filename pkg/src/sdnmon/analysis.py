"""Request service time, load, success rate and URL frequency from HTTP events.

Requests and responses are matched per connection in FIFO order: when a
response arrives it completes the oldest outstanding request.  Completed
samples, request counts and status codes are folded into tumbling windows
aligned to timestamp 0.
"""

from __future__ import annotations

import csv
import enum
import io
import json
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Deque, Dict, Iterable, List, Optional, Tuple

from .packet import CapturedPacket, FiveTuple, flow_key

DEFAULT_WINDOW_US = 1_000_000
DEFAULT_IDLE_US = 60_000_000
DEFAULT_TOP_N = 10
MAX_GAP_FILL = 10_000


class MessageKind(enum.IntEnum):
    REQUEST = 1
    RESPONSE = 2


@dataclass(frozen=True, slots=True)
class AnalysisEvent:
    flow: FiveTuple
    kind: MessageKind
    timestamp: int
    url: Optional[str] = None
    status_code: Optional[int] = None


@dataclass(frozen=True, slots=True)
class ServiceTimeSample:
    flow: FiveTuple
    url: Optional[str]
    request_ts: int
    response_ts: int

    @property
    def service_time(self) -> int:
        return self.response_ts - self.request_ts


@dataclass
class ConnectionState:
    key: FiveTuple
    pending: Deque[Tuple[int, Optional[str]]] = field(default_factory=deque)
    last_activity: int = 0


@dataclass
class WindowAggregate:
    start_us: int
    length_us: int
    count: int = 0
    total_us: int = 0
    min_us: Optional[int] = None
    max_us: Optional[int] = None
    request_count: int = 0
    response_count: int = 0
    success_count: int = 0
    url_counts: Counter = field(default_factory=Counter)

    @property
    def mean_us(self) -> Optional[float]:
        return self.total_us / self.count if self.count else None

    @property
    def load(self) -> int:
        return self.request_count

    @property
    def success_rate(self) -> Optional[float]:
        return self.success_count / self.response_count if self.response_count else None

    def add_sample(self, service_time: int) -> None:
        self.count += 1
        self.total_us += service_time
        if self.min_us is None or service_time < self.min_us:
            self.min_us = service_time
        if self.max_us is None or service_time > self.max_us:
            self.max_us = service_time

    def top_urls(self, n: int = DEFAULT_TOP_N) -> List[Tuple[str, int]]:
        return sorted(self.url_counts.items(), key=lambda kv: (-kv[1], kv[0]))[:n]

    def to_dict(self, top_n: int = DEFAULT_TOP_N) -> dict:
        return {
            "start_us": self.start_us,
            "len_us": self.length_us,
            "count": self.count,
            "min_us": self.min_us,
            "max_us": self.max_us,
            "mean_us": self.mean_us,
            "load": self.load,
            "responses": self.response_count,
            "successes": self.success_count,
            "success_rate": self.success_rate,
            "urls": [[u, c] for u, c in self.top_urls(top_n)],
        }


def success_classify(status_code: int) -> bool:
    return 100 <= status_code <= 399


@dataclass
class EngineStats:
    requests: int = 0
    responses: int = 0
    samples: int = 0
    orphans: int = 0
    unanswered: int = 0
    late: int = 0


class AnalysisEngine:
    """Single-owner state machine fed by ``observe`` and drained by ``rollup``."""

    def __init__(self, window_us: int = DEFAULT_WINDOW_US, idle_timeout_us: int = DEFAULT_IDLE_US):
        if window_us <= 0:
            raise ValueError("window length must be positive")
        self.window_us = window_us
        self.idle_timeout_us = idle_timeout_us
        self.connections: Dict[FiveTuple, ConnectionState] = {}
        self.stats = EngineStats()
        self._open: Dict[int, WindowAggregate] = {}
        self._next_index: Optional[int] = None  # first window not yet sealed
        self._first_index: Optional[int] = None

    def _window(self, ts: int) -> Optional[WindowAggregate]:
        idx = ts // self.window_us
        if self._next_index is not None and idx < self._next_index:
            self.stats.late += 1
            return None
        w = self._open.get(idx)
        if w is None:
            w = self._open[idx] = WindowAggregate(idx * self.window_us, self.window_us)
            if self._first_index is None or idx < self._first_index:
                self._first_index = idx
        return w

    def observe(self, e: AnalysisEvent) -> Optional[ServiceTimeSample]:
        key = e.flow.canonical()
        conn = self.connections.get(key)
        if conn is None:
            conn = self.connections[key] = ConnectionState(key)
        conn.last_activity = max(conn.last_activity, e.timestamp)
        w = self._window(e.timestamp)
        if e.kind == MessageKind.REQUEST:
            self.stats.requests += 1
            conn.pending.append((e.timestamp, e.url))
            if w is not None:
                w.request_count += 1
                if e.url is not None:
                    w.url_counts[e.url] += 1
            return None

        self.stats.responses += 1
        if w is not None and e.status_code is not None:
            w.response_count += 1
            if success_classify(e.status_code):
                w.success_count += 1
        if not conn.pending:
            self.stats.orphans += 1
            return None
        req_ts, url = conn.pending.popleft()
        sample = ServiceTimeSample(key, url, req_ts, e.timestamp)
        self.stats.samples += 1
        if w is not None:
            w.add_sample(max(sample.service_time, 0))
        return sample

    def evict_idle(self, now: int) -> int:
        """Drop connections idle for longer than the timeout; returns how many."""
        stale = [k for k, c in self.connections.items() if now - c.last_activity > self.idle_timeout_us]
        for k in stale:
            self.stats.unanswered += len(self.connections.pop(k).pending)
        return len(stale)

    def pending_total(self) -> int:
        return sum(len(c.pending) for c in self.connections.values())

    def rollup(self, up_to: int) -> List[WindowAggregate]:
        """Seal and return every window that ends at or before ``up_to``.

        Windows are contiguous from the first one ever touched, so short gaps
        show up as empty aggregates.  Gaps longer than ``MAX_GAP_FILL``
        windows (e.g. a long idle stretch) are skipped rather than filled.
        """
        self.evict_idle(up_to)
        if self._first_index is None:
            return []
        start = self._next_index if self._next_index is not None else self._first_index
        end = up_to // self.window_us  # exclusive
        if end <= start:
            return []
        out = []
        idx = start
        for t in sorted(i for i in self._open if i < end) + [end]:
            if t - idx <= MAX_GAP_FILL:
                out.extend(WindowAggregate(i * self.window_us, self.window_us) for i in range(idx, t))
            if t < end:
                out.append(self._open.pop(t))
            idx = t + 1
        self._next_index = end
        return out

    def flush(self) -> List[WindowAggregate]:
        """Seal everything that is still open."""
        if not self._open:
            return []
        last = max(self._open)
        return self.rollup((last + 1) * self.window_us)


def header_only_event(p: CapturedPacket, watched_ports: Iterable[int]) -> Optional[AnalysisEvent]:
    """Turn a PSH-flagged segment into a request or response event."""
    if p.tcp is None or not p.tcp.flags.psh:
        return None
    ports = watched_ports if isinstance(watched_ports, (set, frozenset)) else set(watched_ports)
    if p.tcp.dst_port in ports:
        kind = MessageKind.REQUEST
    elif p.tcp.src_port in ports:
        kind = MessageKind.RESPONSE
    else:
        return None
    return AnalysisEvent(flow_key(p), kind, p.timestamp)


def event_from_record(record) -> AnalysisEvent:
    return AnalysisEvent(record.flow, MessageKind(int(record.kind)), record.timestamp,
                         record.url, record.status_code)


# reports ------------------------------------------------------------------

CSV_COLUMNS = ["start_us", "len_us", "count", "min_us", "max_us", "mean_us", "load",
               "responses", "successes", "success_rate", "urls"]


def report_json(windows: List[WindowAggregate], top_n: int = DEFAULT_TOP_N, extra: Optional[dict] = None) -> str:
    doc = {"windows": [w.to_dict(top_n) for w in windows]}
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=2)


def report_csv(windows: List[WindowAggregate], top_n: int = DEFAULT_TOP_N) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for w in windows:
        d = w.to_dict(top_n)
        d["urls"] = ";".join(f"{u}:{c}" for u, c in d["urls"])
        writer.writerow(["" if d[c] is None else d[c] for c in CSV_COLUMNS])
    return buf.getvalue()


def load_report(text: str) -> List[dict]:
    return json.loads(text)["windows"]


def totals(windows: Iterable[WindowAggregate]) -> dict:
    ws = list(windows)
    count = sum(w.count for w in ws)
    responses = sum(w.response_count for w in ws)
    mins = [w.min_us for w in ws if w.min_us is not None]
    maxs = [w.max_us for w in ws if w.max_us is not None]
    return {
        "windows": len(ws),
        "count": count,
        "min_us": min(mins) if mins else None,
        "max_us": max(maxs) if maxs else None,
        "mean_us": sum(w.total_us for w in ws) / count if count else None,
        "load": sum(w.request_count for w in ws),
        "responses": responses,
        "successes": sum(w.success_count for w in ws),
        "success_rate": sum(w.success_count for w in ws) / responses if responses else None,
    }
