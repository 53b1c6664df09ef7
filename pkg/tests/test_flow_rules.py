import random

import pytest
from hypothesis import given, settings, strategies as st

from sdnmon.flow_rules import (
    FlowRule,
    FlowTable,
    MatchConditions,
    Mirror,
    Output,
    RuleError,
    RuleSyntaxError,
    TruncateMirror,
    Tunnel,
    UnknownRule,
    build_table,
    format_rule,
    parse_rule,
    parse_rules,
)
from sdnmon.packet import TcpFlags, parse_packet
from sdnmon.tunnel import TunnelSpec

from conftest import tcp_frame, udp_frame

ACK, PSH, SYN, FIN = TcpFlags.ACK, TcpFlags.PSH, TcpFlags.SYN, TcpFlags.FIN


def pkt(flags=ACK, payload=b"", **kw):
    return parse_packet(tcp_frame(flags, payload, **kw))


def test_exact_five_tuple_rule_matches():
    rule = FlowRule(10, MatchConditions(6, "1.1.1.1", "2.2.2.2", 1234, 80), (Output("out1"),))
    t = FlowTable()
    t.add_rule(rule)
    p = pkt(src="1.1.1.1", sport=1234, dst="2.2.2.2", dport=80)
    assert t.match(p).conditions == rule.conditions
    assert [e.port for e in t.apply(p)] == ["out1"]
    assert t.match(pkt(src="1.1.1.1", sport=1235, dst="2.2.2.2", dport=80)) is None


def test_ack_psh_rule():
    cond = MatchConditions(protocol=6, dst_port=8080, tcp_flags_any_set=ACK | PSH)
    assert cond.matches(pkt(ACK))
    assert cond.matches(pkt(PSH | ACK, b"x"))
    assert not cond.matches(pkt(SYN))
    assert not cond.matches(pkt(FIN))


def test_flags_all():
    cond = MatchConditions(tcp_flags_all_set=PSH | ACK)
    assert cond.matches(pkt(PSH | ACK))
    assert not cond.matches(pkt(ACK))


def test_wildcard_client_ip():
    cond = MatchConditions(protocol=6, src_ip=None, dst_port=8080)
    assert cond.matches(pkt(src="10.0.0.5"))
    assert cond.matches(pkt(src="10.9.9.9"))


def test_empty_conditions_match_everything_tcp():
    assert MatchConditions().matches(pkt(SYN))
    assert MatchConditions().matches(pkt(TcpFlags(0)))


def test_flag_masks_never_hold_for_udp():
    p = parse_packet(udp_frame())
    assert not MatchConditions(tcp_flags_any_set=ACK).matches(p)
    assert MatchConditions(dst_port=8080).matches(p)


def test_priority_and_tie_break():
    t = FlowTable()
    low = t.add_rule(FlowRule(1, MatchConditions(), (Output("low"),)))
    high = t.add_rule(FlowRule(5, MatchConditions(), (Output("high"),)))
    assert t.match(pkt()) == high
    t.remove_rule(high.rule_id)
    assert t.match(pkt()) == low
    first = t.add_rule(FlowRule(7, MatchConditions(), (Output("a"),)))
    t.add_rule(FlowRule(7, MatchConditions(), (Output("b"),)))
    assert t.match(pkt()) == first


def test_add_remove_restores_behaviour():
    t = build_table([FlowRule(1, MatchConditions(dst_port=8080), (Output("s"),))])
    before = t.apply(pkt())
    r = t.add_rule(FlowRule(9, MatchConditions(), (Output("x"),)))
    t.remove_rule(r.rule_id)
    assert t.apply(pkt()) == before
    with pytest.raises(UnknownRule):
        t.remove_rule(12345)


def test_default_action():
    p = pkt()
    assert FlowTable().apply(p) == []
    out = FlowTable(default_action=Output("p0")).apply(p)
    assert [e.port for e in out] == ["p0"]


def test_mirror_copies_full_frame():
    frame = tcp_frame(PSH | ACK, b"x" * 1460)
    assert len(frame) == 1514
    t = build_table([FlowRule(1, MatchConditions(), (Output("p1"), Mirror("p2")))])
    out = t.apply(parse_packet(frame))
    assert [(e.port, len(e.data)) for e in out] == [("p1", 1514), ("p2", 1514)]
    assert out[1].data == frame


def test_truncate_mirror():
    frame = tcp_frame(PSH | ACK, b"x" * 1460)
    t = build_table([FlowRule(1, MatchConditions(), (TruncateMirror("p2", 54), Output("p1")))])
    out = t.apply(parse_packet(frame))
    assert [(e.port, len(e.data), e.wire_length) for e in out] == [("p1", 1514, 1514), ("p2", 54, 1514)]
    trunc = parse_packet(out[1].data, wire_length=out[1].wire_length)
    assert trunc.tcp.flags == PSH | ACK and trunc.payload == b""


def test_truncation_floor():
    with pytest.raises(RuleError):
        TruncateMirror("p", 53)


def test_tunnel_emission_length():
    frame = tcp_frame(PSH | ACK, b"x" * 1460)
    spec = TunnelSpec("vxlan0", "vxlan", vni=7)
    t = build_table([FlowRule(1, MatchConditions(), (Output("p1"), Tunnel("vxlan0", "p2")))], tunnels=[spec])
    out = t.apply(parse_packet(frame))
    # outer Ethernet 14 + IPv4 20 + UDP 8 + VXLAN 8
    assert len(out[1].data) == 1514 + (14 + 20 + 8 + 8)


def test_unknown_tunnel_rejected():
    with pytest.raises(RuleError):
        build_table([FlowRule(1, MatchConditions(), (Tunnel("nope", "p"),))])


def test_rule_needs_actions():
    with pytest.raises(RuleError):
        FlowRule(1, MatchConditions(), ())


def test_counters():
    t = build_table([FlowRule(1, MatchConditions(dst_port=8080), (Output("s"),))])
    t.apply(pkt(payload=b"abc"))
    t.apply(pkt(dport=9))
    (r,) = t.rules
    assert t.counters[r.rule_id].packets == 1 and t.counters[r.rule_id].bytes == 57
    assert t.default_counters.packets == 1


RULES = """
# comment line
tunnel vx0 vxlan src_mac=02:00:00:00:00:01 dst_mac=02:00:00:00:00:02 src_ip=1.1.1.1 dst_ip=2.2.2.2 vni=5
tunnel gr0 gre src_ip=1.1.1.1 dst_ip=3.3.3.3 key=99
priority=10 proto=tcp src_ip=* dst_ip=10.0.0.2 src_port=* dst_port=8080 flags_any=ACK|PSH actions=output:server,mirror:mon  # trailing
priority=5 proto=tcp flags_all=PSH actions=output:server,trunc:mon:54,tunnel:vx0:up,tunnel:gr0:up2
"""


def test_parse_rules_file():
    t = parse_rules(RULES)
    assert set(t.tunnels) == {"vx0", "gr0"}
    assert t.tunnels["gr0"].key == 99
    r1, r2 = t.rules
    assert r1.conditions == MatchConditions(6, None, "10.0.0.2", None, 8080, ACK | PSH)
    assert r1.actions == (Output("server"), Mirror("mon"))
    assert r2.actions[1:] == (TruncateMirror("mon", 54), Tunnel("vx0", "up"), Tunnel("gr0", "up2"))
    assert parse_rule(format_rule(r1)).conditions == r1.conditions


@pytest.mark.parametrize("line, lineno", [
    ("priority=1 color=red actions=output:a", 2),
    ("priority=1 actions=output:a,trunc:b:20", 2),
    ("priority=1 src_ip=300.1.1.1 actions=output:a", 2),
    ("priority=1 actions=bogus:a", 2),
    ("priority=1 flags_any=ACK|NOPE actions=output:a", 2),
    ("proto=tcp actions=output:a", 2),
    ("priority=1 actions=tunnel:missing:a", 2),
])
def test_rule_syntax_errors_carry_line(line, lineno):
    with pytest.raises(RuleSyntaxError) as exc:
        parse_rules("# header\n" + line + "\n")
    assert exc.value.line == lineno


# properties -------------------------------------------------------------

flag_values = st.integers(0, 255).map(TcpFlags)
ports = st.sampled_from([80, 8080, 50000, 50001])


@st.composite
def packets(draw):
    f = draw(flag_values)
    return parse_packet(tcp_frame(f, b"p" * draw(st.integers(0, 40)), sport=draw(ports), dport=draw(ports),
                                  src=draw(st.sampled_from(["10.0.0.1", "10.0.0.3"]))))


@st.composite
def conditions(draw):
    return MatchConditions(
        protocol=draw(st.sampled_from([None, 6, 17])),
        src_ip=draw(st.sampled_from([None, "10.0.0.1"])),
        dst_port=draw(st.one_of(st.none(), ports)),
        tcp_flags_any_set=draw(st.sampled_from([TcpFlags(0), ACK | PSH, SYN])),
        tcp_flags_all_set=draw(st.sampled_from([TcpFlags(0), PSH, ACK | PSH])),
    )


@settings(max_examples=200, deadline=None)
@given(st.lists(packets(), min_size=1, max_size=30))
def test_selectivity_superset(stream):
    any_rule = build_table([FlowRule(1, MatchConditions(tcp_flags_any_set=ACK | PSH), (Mirror("m"),))])
    psh_rule = build_table([FlowRule(1, MatchConditions(tcp_flags_all_set=PSH), (Mirror("m"),))])
    a = {i for i, p in enumerate(stream) if any_rule.apply(p)}
    b = {i for i, p in enumerate(stream) if psh_rule.apply(p)}
    assert b <= a


@settings(max_examples=200, deadline=None)
@given(st.lists(conditions(), min_size=1, max_size=5), conditions(), st.integers(0, 10), packets())
def test_monotonic_under_higher_priority(existing, new_cond, new_prio, p):
    t = FlowTable()
    for i, c in enumerate(existing):
        t.add_rule(FlowRule(random.Random(i).randint(0, 10), c, (Output(f"o{i}"),)))
    winner = t.match(p)
    before = t.apply(p)
    t.add_rule(FlowRule(new_prio, new_cond, (Output("new"),)))
    if winner is not None and winner.priority > new_prio:
        assert t.apply(p) == before


@settings(max_examples=200, deadline=None)
@given(conditions(), packets(), st.sampled_from(["mirror", "trunc", "vxlan", "gre"]))
def test_mirror_neutrality(cond, p, kind):
    extra = {"mirror": Mirror("m"), "trunc": TruncateMirror("m", 60),
             "vxlan": Tunnel("v", "m"), "gre": Tunnel("g", "m")}[kind]
    tunnels = [TunnelSpec("v", "vxlan", vni=3), TunnelSpec("g", "gre", key=1)]
    plain = build_table([FlowRule(1, cond, (Output("dst"),))], tunnels=tunnels)
    mirrored = build_table([FlowRule(1, cond, (extra, Output("dst")))], tunnels=tunnels)
    a = [e for e in plain.apply(p) if e.port == "dst"]
    b = [e for e in mirrored.apply(p) if e.port == "dst"]
    assert a == b
    if b:
        assert mirrored.apply(p)[0].port == "dst"
