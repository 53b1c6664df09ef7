"""Single-table OpenFlow-style match/action engine.

Rules are matched by descending priority; equal priorities fall back to
insertion order.  Actions forward the packet, mirror it, mirror a truncated
copy, or tunnel it to a remote analysis host.
"""

from __future__ import annotations

import re
import socket
import threading
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Tuple, Union

from .packet import PROTO_TCP, PROTO_UDP, CapturedPacket, TcpFlags, serialize_packet
from .tunnel import TunnelSpec, encapsulate

MIN_TRUNCATE = 54
_PROTO_NAMES = {"tcp": PROTO_TCP, "udp": PROTO_UDP}


class RuleError(ValueError):
    pass


class UnknownRule(KeyError):
    pass


class RuleSyntaxError(RuleError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class MatchConditions:
    """All set fields must hold.  ``None`` means wildcard."""

    protocol: Optional[int] = None
    src_ip: Optional[str] = None
    dst_ip: Optional[str] = None
    src_port: Optional[int] = None
    dst_port: Optional[int] = None
    tcp_flags_any_set: TcpFlags = TcpFlags(0)
    tcp_flags_all_set: TcpFlags = TcpFlags(0)

    def matches(self, p: CapturedPacket) -> bool:
        ip = p.ipv4
        if ip is None:
            return (self.protocol is None and self.src_ip is None and self.dst_ip is None
                    and self.src_port is None and self.dst_port is None
                    and not self.tcp_flags_any_set and not self.tcp_flags_all_set)
        if self.protocol is not None and ip.protocol != self.protocol:
            return False
        if self.src_ip is not None and ip.src != self.src_ip:
            return False
        if self.dst_ip is not None and ip.dst != self.dst_ip:
            return False
        l4 = p.tcp or p.udp
        if self.src_port is not None and (l4 is None or l4.src_port != self.src_port):
            return False
        if self.dst_port is not None and (l4 is None or l4.dst_port != self.dst_port):
            return False
        if self.tcp_flags_any_set or self.tcp_flags_all_set:
            if p.tcp is None:
                return False
            flags = p.tcp.flags
            if self.tcp_flags_any_set and not flags & self.tcp_flags_any_set:
                return False
            if (flags & self.tcp_flags_all_set) != self.tcp_flags_all_set:
                return False
        return True


@dataclass(frozen=True)
class Output:
    port: str


@dataclass(frozen=True)
class Mirror:
    port: str


@dataclass(frozen=True)
class TruncateMirror:
    port: str
    max_bytes: int

    def __post_init__(self):
        if self.max_bytes < MIN_TRUNCATE:
            raise RuleError(f"truncation to {self.max_bytes} bytes would cut the TCP header "
                            f"(minimum {MIN_TRUNCATE})")


@dataclass(frozen=True)
class Tunnel:
    spec_id: str
    port: str


@dataclass(frozen=True)
class Drop:
    pass


RuleAction = Union[Output, Mirror, TruncateMirror, Tunnel]


@dataclass(frozen=True)
class FlowRule:
    priority: int
    conditions: MatchConditions
    actions: Tuple[RuleAction, ...]
    insertion_seq: int = -1

    def __post_init__(self):
        if not self.actions:
            raise RuleError("a rule needs at least one action")
        object.__setattr__(self, "actions", tuple(self.actions))

    @property
    def rule_id(self) -> int:
        return self.insertion_seq


@dataclass(frozen=True)
class Emission:
    port: str
    data: bytes
    wire_length: int
    timestamp: int = 0
    kind: str = "output"  # output | mirror | truncate | tunnel


@dataclass
class RuleCounters:
    packets: int = 0
    bytes: int = 0


class FlowTable:
    """One flow table with copy-on-write rule storage.

    Mutators serialize on a lock and publish a fresh sorted tuple, so
    ``match``/``apply`` read a consistent snapshot without locking.
    """

    def __init__(self, default_action: Union[Output, Drop] = Drop(),
                 tunnels: Optional[Dict[str, TunnelSpec]] = None):
        self.default_action = default_action
        self.tunnels: Dict[str, TunnelSpec] = dict(tunnels or {})
        self._rules: Tuple[FlowRule, ...] = ()
        self._next_seq = 0
        self._lock = threading.Lock()
        self._counter_lock = threading.Lock()
        self.counters: Dict[int, RuleCounters] = defaultdict(RuleCounters)
        self.default_counters = RuleCounters()

    @property
    def rules(self) -> Tuple[FlowRule, ...]:
        return self._rules

    def add_tunnel(self, spec: TunnelSpec) -> None:
        with self._lock:
            self.tunnels[spec.id] = spec

    def add_rule(self, rule: FlowRule) -> FlowRule:
        for a in rule.actions:
            if isinstance(a, Tunnel) and a.spec_id not in self.tunnels:
                raise RuleError(f"rule references unknown tunnel {a.spec_id!r}")
        with self._lock:
            rule = FlowRule(rule.priority, rule.conditions, rule.actions, self._next_seq)
            self._next_seq += 1
            rules = sorted(self._rules + (rule,), key=lambda r: (-r.priority, r.insertion_seq))
            self._rules = tuple(rules)
        return rule

    def remove_rule(self, rule_id: int) -> FlowRule:
        with self._lock:
            for r in self._rules:
                if r.insertion_seq == rule_id:
                    self._rules = tuple(x for x in self._rules if x is not r)
                    self.counters.pop(rule_id, None)
                    return r
        raise UnknownRule(rule_id)

    def match(self, p: CapturedPacket) -> Optional[FlowRule]:
        for r in self._rules:
            if r.conditions.matches(p):
                return r
        return None

    def apply(self, p: CapturedPacket, frame: Optional[bytes] = None) -> List[Emission]:
        """Execute the matching rule's actions.

        Outputs to the original destination come first, followed by mirror,
        truncated-mirror and tunnel emissions in rule order.
        """
        if frame is None:
            frame = serialize_packet(p)
        rule = self.match(p)
        with self._counter_lock:
            c = self.counters[rule.insertion_seq] if rule is not None else self.default_counters
            c.packets += 1
            c.bytes += p.wire_length
        if rule is None:
            if isinstance(self.default_action, Output):
                return [Emission(self.default_action.port, frame, p.wire_length, p.timestamp)]
            return []
        outputs: List[Emission] = []
        copies: List[Emission] = []
        for a in rule.actions:
            if isinstance(a, Output):
                outputs.append(Emission(a.port, frame, p.wire_length, p.timestamp))
            elif isinstance(a, Mirror):
                copies.append(Emission(a.port, frame, p.wire_length, p.timestamp, "mirror"))
            elif isinstance(a, TruncateMirror):
                copies.append(Emission(a.port, frame[:a.max_bytes], p.wire_length, p.timestamp, "truncate"))
            elif isinstance(a, Tunnel):
                outer = encapsulate(self.tunnels[a.spec_id], frame)
                copies.append(Emission(a.port, outer, len(outer), p.timestamp, "tunnel"))
        return outputs + copies


# rules file ---------------------------------------------------------------

_PORT_NAME = re.compile(r"^[A-Za-z0-9_.\-]+$")


def _ipv4(value: str, line: int) -> Optional[str]:
    if value == "*":
        return None
    try:
        socket.inet_aton(value)
    except OSError:
        raise RuleSyntaxError(f"bad IPv4 address {value!r}", line) from None
    if value.count(".") != 3:
        raise RuleSyntaxError(f"bad IPv4 address {value!r}", line)
    return value


def _int(value: str, line: int, lo: int, hi: int, what: str) -> int:
    try:
        n = int(value, 0)
    except ValueError:
        raise RuleSyntaxError(f"bad {what} {value!r}", line) from None
    if not lo <= n <= hi:
        raise RuleSyntaxError(f"{what} {n} out of range", line)
    return n


def _port_id(value: str, line: int) -> str:
    if not _PORT_NAME.match(value):
        raise RuleSyntaxError(f"bad port id {value!r}", line)
    return value


def _parse_actions(text: str, line: int) -> List[RuleAction]:
    actions: List[RuleAction] = []
    for item in text.split(","):
        parts = item.split(":")
        kind = parts[0]
        try:
            if kind == "output" and len(parts) == 2:
                actions.append(Output(_port_id(parts[1], line)))
            elif kind == "mirror" and len(parts) == 2:
                actions.append(Mirror(_port_id(parts[1], line)))
            elif kind == "trunc" and len(parts) == 3:
                actions.append(TruncateMirror(_port_id(parts[1], line),
                                              _int(parts[2], line, 0, 65535, "truncation length")))
            elif kind == "tunnel" and len(parts) == 3:
                actions.append(Tunnel(parts[1], _port_id(parts[2], line)))
            else:
                raise RuleSyntaxError(f"bad action {item!r}", line)
        except RuleSyntaxError:
            raise
        except RuleError as exc:
            raise RuleSyntaxError(str(exc), line) from None
    if not actions:
        raise RuleSyntaxError("empty action list", line)
    return actions


def parse_rule(text: str, line: int = 0) -> FlowRule:
    fields: Dict[str, str] = {}
    for tok in text.split():
        if "=" not in tok:
            raise RuleSyntaxError(f"expected key=value, got {tok!r}", line)
        k, v = tok.split("=", 1)
        if k in fields:
            raise RuleSyntaxError(f"duplicate key {k!r}", line)
        fields[k] = v
    if "priority" not in fields:
        raise RuleSyntaxError("missing priority=", line)
    if "actions" not in fields:
        raise RuleSyntaxError("missing actions=", line)
    cond: Dict[str, object] = {}
    for k, v in fields.items():
        if k in ("priority", "actions"):
            continue
        if k == "proto":
            if v not in _PROTO_NAMES:
                raise RuleSyntaxError(f"unsupported protocol {v!r}", line)
            cond["protocol"] = _PROTO_NAMES[v]
        elif k in ("src_ip", "dst_ip"):
            cond[k] = _ipv4(v, line)
        elif k in ("src_port", "dst_port"):
            cond[k] = None if v == "*" else _int(v, line, 0, 65535, "port")
        elif k in ("flags_any", "flags_all"):
            try:
                flags = TcpFlags.parse(v)
            except ValueError as exc:
                raise RuleSyntaxError(str(exc), line) from None
            cond["tcp_flags_any_set" if k == "flags_any" else "tcp_flags_all_set"] = flags
        else:
            raise RuleSyntaxError(f"unknown key {k!r}", line)
    priority = _int(fields["priority"], line, -(1 << 31), (1 << 31) - 1, "priority")
    return FlowRule(priority, MatchConditions(**cond), tuple(_parse_actions(fields["actions"], line)))


def parse_tunnel(text: str, line: int = 0) -> TunnelSpec:
    toks = text.split()
    if len(toks) < 3 or toks[0] != "tunnel":
        raise RuleSyntaxError("expected: tunnel <id> vxlan|gre key=value...", line)
    _, tid, proto = toks[:3]
    if proto not in ("vxlan", "gre"):
        raise RuleSyntaxError(f"unknown tunnel protocol {proto!r}", line)
    kw: Dict[str, object] = {}
    names = {"src_mac": "outer_src_mac", "dst_mac": "outer_dst_mac",
             "src_ip": "outer_src_ip", "dst_ip": "outer_dst_ip"}
    for tok in toks[3:]:
        if "=" not in tok:
            raise RuleSyntaxError(f"expected key=value, got {tok!r}", line)
        k, v = tok.split("=", 1)
        if k in names:
            kw[names[k]] = v
        elif k == "vni":
            kw["vni"] = _int(v, line, 0, (1 << 24) - 1, "VNI")
        elif k == "key":
            kw["key"] = _int(v, line, 0, (1 << 32) - 1, "GRE key")
        else:
            raise RuleSyntaxError(f"unknown key {k!r}", line)
    try:
        return TunnelSpec(tid, proto, **kw)
    except (ValueError, OSError) as exc:
        raise RuleSyntaxError(str(exc), line) from None


def parse_rules(text: str, table: Optional[FlowTable] = None) -> FlowTable:
    """Load a rules file into ``table`` (a fresh table by default).

    Tunnel declarations may appear anywhere in the file; rules are checked
    against them once the whole file has been read.
    """
    table = table if table is not None else FlowTable()
    pending: List[Tuple[int, FlowRule]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("tunnel ") or line == "tunnel":
            table.add_tunnel(parse_tunnel(line, lineno))
        else:
            pending.append((lineno, parse_rule(line, lineno)))
    for lineno, rule in pending:
        try:
            table.add_rule(rule)
        except RuleError as exc:
            raise RuleSyntaxError(str(exc), lineno) from None
    return table


def load_rules(path, table: Optional[FlowTable] = None) -> FlowTable:
    with open(path, encoding="utf-8") as f:
        return parse_rules(f.read(), table)


def format_rule(rule: FlowRule) -> str:
    c = rule.conditions
    parts = [f"priority={rule.priority}"]
    if c.protocol is not None:
        parts.append("proto=" + {v: k for k, v in _PROTO_NAMES.items()}.get(c.protocol, str(c.protocol)))
    for name in ("src_ip", "dst_ip", "src_port", "dst_port"):
        v = getattr(c, name)
        if v is not None:
            parts.append(f"{name}={v}")
    if c.tcp_flags_any_set:
        parts.append("flags_any=" + c.tcp_flags_any_set.names())
    if c.tcp_flags_all_set:
        parts.append("flags_all=" + c.tcp_flags_all_set.names())
    acts = []
    for a in rule.actions:
        if isinstance(a, Output):
            acts.append(f"output:{a.port}")
        elif isinstance(a, Mirror):
            acts.append(f"mirror:{a.port}")
        elif isinstance(a, TruncateMirror):
            acts.append(f"trunc:{a.port}:{a.max_bytes}")
        elif isinstance(a, Tunnel):
            acts.append(f"tunnel:{a.spec_id}:{a.port}")
    parts.append("actions=" + ",".join(acts))
    return " ".join(parts)


def build_table(rules: Iterable[FlowRule], default_action: Union[Output, Drop] = Drop(),
                tunnels: Iterable[TunnelSpec] = ()) -> FlowTable:
    t = FlowTable(default_action, {s.id: s for s in tunnels})
    for r in rules:
        t.add_rule(r)
    return t
