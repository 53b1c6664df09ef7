import csv
import io
import json

import pytest
from hypothesis import given, settings, strategies as st

from sdnmon.analysis import (
    CSV_COLUMNS,
    AnalysisEngine,
    AnalysisEvent,
    MessageKind,
    WindowAggregate,
    event_from_record,
    header_only_event,
    load_report,
    report_csv,
    report_json,
    success_classify,
    totals,
)
from sdnmon.packet import FiveTuple, TcpFlags, parse_packet
from sdnmon.sniffer import HttpExtractor

from conftest import tcp_frame

C1 = FiveTuple(6, "10.0.0.1", 50000, "10.0.0.2", 8080)
C2 = FiveTuple(6, "10.0.0.3", 50001, "10.0.0.2", 8080)
REQ, RESP = MessageKind.REQUEST, MessageKind.RESPONSE


def req(ts, flow=C1, url=None):
    return AnalysisEvent(flow, REQ, ts, url)


def resp(ts, flow=C1, status=None):
    return AnalysisEvent(flow.reversed(), RESP, ts, status_code=status)


def test_single_sample():
    e = AnalysisEngine()
    assert e.observe(req(1000)) is None
    s = e.observe(resp(3500))
    assert s.service_time == 2500


def test_pipelined_fifo():
    e = AnalysisEngine()
    e.observe(req(0, url="/a"))
    e.observe(req(10, url="/b"))
    a = e.observe(resp(100))
    b = e.observe(resp(150))
    assert (a.url, a.service_time) == ("/a", 100)
    assert (b.url, b.service_time) == ("/b", 140)


def test_orphan_response():
    e = AnalysisEngine()
    assert e.observe(resp(5)) is None
    assert e.stats.orphans == 1 and e.stats.samples == 0


def test_connections_are_independent():
    e = AnalysisEngine()
    e.observe(req(0, C1))
    e.observe(req(5, C2))
    s = e.observe(resp(50, C2))
    assert s.service_time == 45 and e.pending_total() == 1


def test_window_stats():
    w = WindowAggregate(0, 1000)
    for v in (100, 200, 300):
        w.add_sample(v)
    assert (w.count, w.min_us, w.max_us, w.mean_us) == (3, 100, 300, 200)


def test_empty_window():
    w = WindowAggregate(0, 1000)
    assert w.count == 0 and w.min_us is None and w.max_us is None and w.mean_us is None
    assert w.success_rate is None
    d = w.to_dict()
    assert d["min_us"] is None and d["mean_us"] is None


@pytest.mark.parametrize("status, ok", [(200, True), (500, False), (302, True), (100, True),
                                        (399, True), (400, False), (404, False), (99, False)])
def test_success_classify(status, ok):
    assert success_classify(status) is ok


def test_window_attribution_and_rollup():
    e = AnalysisEngine(window_us=1000)
    e.observe(req(900, url="/x"))
    e.observe(resp(1100, status=200))
    e.observe(req(3500, url="/y"))
    e.observe(resp(3600, status=500))
    ws = e.rollup(2000)
    assert [w.start_us for w in ws] == [0, 1000]
    assert ws[0].request_count == 1 and ws[0].count == 0 and ws[0].url_counts == {"/x": 1}
    assert ws[1].count == 1 and ws[1].success_count == 1 and ws[1].response_count == 1
    rest = e.flush()
    assert [w.start_us for w in rest] == [2000, 3000]
    assert rest[0].count == 0
    assert rest[1].success_rate == 0.0 and rest[1].load == 1
    e.observe(req(10))
    assert e.stats.late == 1


def test_idle_eviction_counts_unanswered():
    e = AnalysisEngine(idle_timeout_us=100)
    e.observe(req(0))
    e.observe(req(1))
    e.observe(req(500, C2))
    assert e.evict_idle(400) == 1
    assert e.stats.unanswered == 2 and e.pending_total() == 1


def test_header_only_event():
    p = parse_packet(tcp_frame(TcpFlags.PSH | TcpFlags.ACK, b"GET / HTTP/1.1\r\n\r\n"), 42)
    e = header_only_event(p, {8080})
    assert e == AnalysisEvent(C1, REQ, 42)
    assert header_only_event(parse_packet(tcp_frame(TcpFlags.ACK, b"x")), {8080}) is None
    r = header_only_event(parse_packet(tcp_frame(TcpFlags.PSH, b"x", "10.0.0.2", 8080, "10.0.0.1", 50000)), [8080])
    assert r.kind == RESP


def test_header_only_equals_deep_inspection(small_workload):
    _, records, oracle = small_workload
    deep, shallow = AnalysisEngine(), AnalysisEngine()
    ex = HttpExtractor({8080})
    a, b = [], []
    for r in records:
        p = parse_packet(r.data, r.timestamp, r.wire_length)
        for rec in ex.extract(p):
            s = deep.observe(event_from_record(rec))
            if s:
                a.append(s.service_time)
        ev = header_only_event(p, {8080})
        if ev:
            s = shallow.observe(ev)
            if s:
                b.append(s.service_time)
    assert sorted(a) == sorted(b) == sorted(oracle.service_times())


def test_reports():
    e = AnalysisEngine(window_us=1000)
    e.observe(req(0, url="/a"))
    e.observe(req(1, C2, url="/b"))
    e.observe(resp(10, status=200))
    e.observe(resp(30, C2, status=503))
    ws = e.flush()
    doc = json.loads(report_json(ws, extra={"summary": {"x": 1}}))
    assert doc["summary"] == {"x": 1}
    (w,) = doc["windows"]
    assert set(CSV_COLUMNS) <= set(w)
    assert (w["count"], w["min_us"], w["max_us"], w["mean_us"], w["load"], w["success_rate"]) == (2, 10, 29, 19.5, 2, 0.5)
    assert w["urls"] == [["/a", 1], ["/b", 1]]
    assert load_report(report_json(ws)) == doc["windows"]
    rows = list(csv.DictReader(io.StringIO(report_csv(ws))))
    assert rows[0]["urls"] == "/a:1;/b:1" and rows[0]["count"] == "2"
    assert totals(ws)["success_rate"] == 0.5


def test_top_n():
    w = WindowAggregate(0, 1)
    w.url_counts.update({"/a": 3, "/b": 5, "/c": 5, "/d": 1})
    assert w.top_urls(2) == [("/b", 5), ("/c", 5)]


# properties ---------------------------------------------------------------

flows = st.sampled_from([C1, C2, FiveTuple(6, "10.0.0.4", 50002, "10.0.0.2", 8080)])
events = st.lists(st.tuples(st.booleans(), flows, st.integers(0, 50), st.sampled_from([200, 302, 404, 500])),
                  max_size=80)


@settings(max_examples=300, deadline=None)
@given(events, st.integers(1, 200))
def test_conservation_and_partition(evs, window):
    e = AnalysisEngine(window_us=window)
    ts = 0
    samples = []
    for is_req, flow, dt, status in evs:
        ts += dt
        s = e.observe(req(ts, flow) if is_req else resp(ts, flow, status))
        if s is not None:
            samples.append(s)
            assert s.service_time >= 0
    st_ = e.stats
    assert st_.samples + st_.orphans == st_.responses
    assert e.pending_total() == st_.requests - st_.samples
    ws = e.flush()
    assert sum(w.count for w in ws) == len(samples)
    assert sum(w.request_count for w in ws) == st_.requests
    for w in ws:
        assert w.success_count <= w.response_count
        if w.count:
            assert w.min_us <= w.mean_us <= w.max_us
    # contiguous, non-overlapping
    for a, b in zip(ws, ws[1:]):
        assert a.start_us + a.length_us == b.start_us


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 100), min_size=1, max_size=40))
def test_depth_one_fifo(gaps):
    e = AnalysisEngine()
    ts, expect, got = 0, [], []
    for g in gaps:
        e.observe(req(ts))
        ts += g
        got.append(e.observe(resp(ts)).service_time)
        expect.append(g)
        ts += 1
    assert got == expect


def test_long_gaps_are_not_materialized():
    e = AnalysisEngine(window_us=1)
    e.observe(req(0))
    e.observe(resp(10**12))
    ws = e.flush()
    assert [w.start_us for w in ws] == [0, 10**12]
    e = AnalysisEngine(window_us=1000)
    e.observe(req(0))
    assert len(e.rollup(10**15)) == 1
