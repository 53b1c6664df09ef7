"""Network-based application monitoring: mirroring, tunneling, port sniffing
and HTTP service-time analysis over synthetic or captured traffic."""

from .analysis import AnalysisEngine, AnalysisEvent, MessageKind, WindowAggregate, success_classify
from .packet import CapturedPacket, FiveTuple, TcpFlags, flow_key, parse_packet, serialize_packet

__version__ = "0.1.0"

__all__ = [
    "AnalysisEngine",
    "AnalysisEvent",
    "CapturedPacket",
    "FiveTuple",
    "MessageKind",
    "TcpFlags",
    "WindowAggregate",
    "flow_key",
    "parse_packet",
    "serialize_packet",
    "success_classify",
]
