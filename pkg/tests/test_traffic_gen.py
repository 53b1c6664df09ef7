import re
from collections import Counter, defaultdict

import pytest
from hypothesis import given, settings, strategies as st

from sdnmon.packet import parse_packet
from sdnmon.traffic_gen import (
    OracleLog,
    SpecError,
    WorkloadSpec,
    build_request,
    build_response,
    failure_indices,
    generate,
    generate_records,
    stream_payloads,
)


def test_determinism():
    spec = WorkloadSpec(connections=3, requests_per_connection=10, pipeline_depth=2, response_body=(0, 3000))
    a, oa = generate(spec, 5)
    b, ob = generate(spec, 5)
    assert a == b and oa.to_json() == ob.to_json()
    c, _ = generate(spec, 6)
    assert c != a


def test_minimal_workload():
    spec = WorkloadSpec(control_traffic=False, service_time_us=(777, 777))
    records, oracle = generate_records(spec, 0)
    assert len(records) == 2 and oracle.packets == 2 and oracle.data_packets == 2
    (entry,) = oracle.requests
    assert entry.service_time_us == 777
    assert entry.response_ts - entry.request_ts == 777


def test_fixed_service_time_list():
    spec = WorkloadSpec(requests_per_connection=4, service_times=[5, 6, 7], control_traffic=False)
    _, oracle = generate_records(spec, 0)
    assert [e.execution_us for e in oracle.requests] == [5, 6, 7, 5]


def test_fifo_responses_depth4():
    spec = WorkloadSpec(requests_per_connection=100, pipeline_depth=4, service_time_us=(10, 5000),
                        response_body=(0, 9000))
    _, oracle = generate_records(spec, 3)
    resp = [e.response_ts for e in oracle.requests]
    assert resp == sorted(resp)
    # at most depth requests outstanding when each one leaves
    for i, e in enumerate(oracle.requests):
        outstanding = sum(1 for f in oracle.requests[:i] if f.response_final_ts >= e.request_ts)
        assert outstanding < 4


def test_one_psh_per_message_and_reassembly(small_workload):
    _, records, oracle = small_workload
    psh = defaultdict(int)
    for r in records:
        p = parse_packet(r.data)
        if p.payload:
            assert p.tcp.flags.ack
        if p.tcp.flags.psh:
            assert p.payload
            psh[(p.ipv4.src, p.tcp.src_port)] += 1
    assert sum(psh.values()) == 2 * len(oracle.requests)
    streams = stream_payloads(records)
    heads = re.compile(rb"(GET|POST) (\S+) HTTP/1\.1\r\n(.*?)\r\n\r\n", re.S)
    for (src, sport, dst, dport), data in streams.items():
        pos, n = 0, 0
        while pos < len(data):
            if dport == 8080:
                m = heads.match(data, pos)
                assert m, data[pos:pos + 40]
            else:
                m = re.compile(rb"HTTP/1\.1 (\d{3}) [^\r]*\r\n(.*?)\r\n\r\n", re.S).match(data, pos)
                assert m
            clen = re.search(rb"Content-Length: (\d+)", m.group(0))
            pos = m.end() + (int(clen.group(1)) if clen else 0)
            n += 1
        assert pos == len(data)
        assert n == 20  # requests per connection in the fixture


def test_oracle_matches_packets(small_workload):
    _, records, oracle = small_workload
    times = {r.timestamp for r in records}
    for e in oracle.requests:
        assert {e.request_ts, e.request_final_ts, e.response_ts, e.response_final_ts} <= times
        assert e.request_ts <= e.request_final_ts < e.response_ts <= e.response_final_ts


def test_failures_and_urls():
    spec = WorkloadSpec(connections=2, requests_per_connection=50, failures=failure_indices(100, 0.05),
                        urls=[("/a", 3), ("/b", 1)])
    _, oracle = generate_records(spec, 9)
    assert [e.global_index for e in oracle.requests if e.status == 500] == [19, 39, 59, 79, 99]
    counts = Counter(e.url for e in oracle.requests)
    assert set(counts) == {"/a", "/b"} and counts["/a"] > counts["/b"]


def test_failure_indices():
    assert failure_indices(10, 0.5) == {1: 500, 3: 500, 5: 500, 7: 500, 9: 500}
    with pytest.raises(ValueError):
        failure_indices(10, 0)


def test_message_builders():
    raw, head = build_request("GET", "/x", "h", 0, 0)
    assert raw.startswith(b"GET /x HTTP/1.1\r\n") and raw.endswith(b"\r\n\r\n") and head == len(raw)
    raw, head = build_response(404, 10, 300)
    assert head == 300 and len(raw) == 310 and raw.startswith(b"HTTP/1.1 404 Not Found\r\n")


def test_ini_roundtrip():
    spec = WorkloadSpec(connections=4, requests_per_connection=3, response_body=(5, 99),
                        urls=[("/a", 2.0), ("/b?q=1", 0.5)], failures={1: 503}, control_traffic=False,
                        service_times=[1, 2, 3])
    back = WorkloadSpec.from_ini(spec.to_ini())
    assert back == spec


def test_shipped_workload_config():
    from pathlib import Path
    text = (Path(__file__).resolve().parent.parent / "configs" / "workload.ini").read_text()
    spec = WorkloadSpec.from_ini(text)
    assert spec.total_requests == 10_000 and spec.pipeline_depth == 4


@pytest.mark.parametrize("text", [
    "[other]\nx = 1\n",
    "[workload]\nbogus = 1\n",
    "[workload]\npipeline_depth = 0\n",
    "[workload]\nresponse_body = 9-1\n",
    "[workload]\nconnections = many\n",
    "[workload]\nfailures = 3:700\n",
    "[workload]\nurls = /a b*1\n",
])
def test_bad_specs(text):
    with pytest.raises(SpecError):
        WorkloadSpec.from_ini(text)


def test_oracle_json_roundtrip(small_workload):
    _, _, oracle = small_workload
    back = OracleLog.from_json(oracle.to_json())
    assert back == oracle


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), conns=st.integers(1, 3), reqs=st.integers(1, 8),
       depth=st.integers(1, 4), control=st.booleans(), gap=st.integers(0, 3))
def test_psh_count_property(seed, conns, reqs, depth, control, gap):
    spec = WorkloadSpec(connections=conns, requests_per_connection=reqs, pipeline_depth=depth,
                        response_body=(0, 4000), request_body=(0, 2000), control_traffic=control,
                        segment_gap_us=gap)
    records, oracle = generate_records(spec, seed)
    psh = sum(1 for r in records if parse_packet(r.data).tcp.flags.psh)
    assert psh == 2 * conns * reqs == 2 * len(oracle.requests)
    assert all(e.service_time_us >= 0 for e in oracle.requests)
    ts = [r.timestamp for r in records]
    assert ts == sorted(ts)
