from __future__ import annotations

import pytest

from sdnmon.packet import FrameBuilder, TcpFlags
from sdnmon.traffic_gen import WorkloadSpec, generate_records

ACCEPTANCE_RESULTS: list = []

CLIENT = "10.0.0.1"
SERVER = "10.0.0.2"


def record_acceptance(name: str, ok: bool, detail: str = "") -> None:
    ACCEPTANCE_RESULTS.append((name, ok, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")


def tcp_frame(flags=TcpFlags.ACK, payload=b"", src=CLIENT, sport=50000, dst=SERVER, dport=8080,
              seq=1000, ack=1):
    return FrameBuilder().tcp(src, sport, dst, dport, seq, ack, flags, payload)


def udp_frame(payload=b"", src=CLIENT, sport=50000, dst=SERVER, dport=8080):
    return FrameBuilder().udp(src, sport, dst, dport, payload)


# the acceptance-scale workload, built once per session
BIG_SPEC = dict(
    connections=20,
    requests_per_connection=500,
    pipeline_depth=4,
    request_body=(0, 512),
    response_body=(0, 8192),
    service_time_us=(200, 20000),
    think_time_us=(5, 500),
    start_spread_us=(0, 5000),
    urls=[("/db?op=read", 6.0), ("/db?op=scan", 2.0), ("/cache?k=hot", 3.0), ("/static/logo.png", 1.0)],
    control_traffic=True,
)


@pytest.fixture(scope="session")
def big_workload():
    spec = WorkloadSpec(**BIG_SPEC)
    records, oracle = generate_records(spec, 2024)
    return spec, records, oracle


@pytest.fixture(scope="session")
def small_workload():
    spec = WorkloadSpec(connections=3, requests_per_connection=20, pipeline_depth=2,
                        request_body=(0, 300), response_body=(0, 5000),
                        service_time_us=(100, 3000), urls=[("/a", 1.0), ("/b", 1.0)])
    records, oracle = generate_records(spec, 11)
    return spec, records, oracle
