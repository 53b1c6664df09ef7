"""Command-line entry point: gen, switch-sim, sniff, collect, report.

Exit codes: 0 success, 1 usage error, 2 input-format error, 3 runtime
ingest failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

from .analysis import AnalysisEngine, report_csv
from .collector import CollectorConfig, CollectorError, run_collector, write_report
from .flow_rules import Drop, FlowTable, Output, RuleSyntaxError, format_rule, load_rules
from .packet import MalformedHeader, parse_packet
from .pcap import PcapFormatError, PcapReader, PcapWriter, read_packets, write_records
from .sniffer import (
    DEFAULT_PORTS,
    MalformedRecord,
    OnsiteSink,
    RecordFileWriter,
    SnifferConfig,
    UdpForwarder,
    run_sniffer,
)
from .traffic_gen import SpecError, WorkloadSpec, generate_records

log = logging.getLogger("sdnmon")

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _address(text: str) -> Tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit() or not 0 <= int(port) <= 65535:
        raise argparse.ArgumentTypeError(f"expected ip:port, got {text!r}")
    return host or "0.0.0.0", int(port)


def _ports(text: str) -> frozenset:
    try:
        ports = frozenset(int(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad port list {text!r}") from None
    if not ports or any(not 0 < p < 65536 for p in ports):
        raise argparse.ArgumentTypeError(f"bad port list {text!r}")
    return ports


def _default_action(text: str):
    if text == "drop":
        return Drop()
    if text.startswith("output:") and len(text) > 7:
        return Output(text[7:])
    raise argparse.ArgumentTypeError("expected 'drop' or 'output:<port>'")


# gen ----------------------------------------------------------------------

def cmd_gen(args) -> int:
    spec = WorkloadSpec.from_ini(Path(args.spec).read_text(encoding="utf-8")) if args.spec else WorkloadSpec()
    records, oracle = generate_records(spec, args.seed)
    write_records(args.out, records)
    if args.oracle:
        Path(args.oracle).write_text(oracle.to_json(), encoding="utf-8")
    print(f"wrote {len(records)} packets ({oracle.data_packets} data, {oracle.control_packets} control), "
          f"{len(oracle.requests)} requests -> {args.out}")
    return EXIT_OK


# switch-sim ---------------------------------------------------------------

def run_switch(table: FlowTable, in_path: str, out_dir: str) -> dict:
    """Replay a pcap through ``table``, writing one pcap per output port."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    writers: Dict[str, PcapWriter] = {}
    files = []
    ports: Dict[str, Dict[str, int]] = defaultdict(lambda: {"packets": 0, "bytes": 0, "wire_bytes": 0})
    total = 0
    try:
        with open(in_path, "rb") as f:
            for r in PcapReader(f):
                total += 1
                p = parse_packet(r.data, r.timestamp, r.wire_length)
                for e in table.apply(p, r.data):
                    w = writers.get(e.port)
                    if w is None:
                        fh = open(out / f"{e.port}.pcap", "wb")
                        files.append(fh)
                        w = writers[e.port] = PcapWriter(fh)
                    w.write(e.data, e.timestamp, e.wire_length)
                    c = ports[e.port]
                    c["packets"] += 1
                    c["bytes"] += len(e.data)
                    c["wire_bytes"] += e.wire_length
    finally:
        for fh in files:
            fh.close()
    rules = [{"rule": format_rule(r), "packets": table.counters[r.insertion_seq].packets,
              "bytes": table.counters[r.insertion_seq].bytes} for r in table.rules]
    return {"input_packets": total, "ports": dict(sorted(ports.items())), "rules": rules,
            "unmatched": {"packets": table.default_counters.packets, "bytes": table.default_counters.bytes}}


def cmd_switch_sim(args) -> int:
    table = load_rules(args.rules, FlowTable(default_action=args.default))
    summary = run_switch(table, args.pcap_in, args.out_dir)
    print(f"{'port':<12}{'packets':>10}{'bytes':>14}")
    for port, c in summary["ports"].items():
        print(f"{port:<12}{c['packets']:>10}{c['bytes']:>14}")
    for r in summary["rules"]:
        print(f"  {r['packets']:>8} pkts {r['bytes']:>12} B  {r['rule']}")
    if args.summary:
        Path(args.summary).write_text(json.dumps(summary, indent=2), encoding="utf-8")
    return EXIT_OK


# sniff --------------------------------------------------------------------

def cmd_sniff(args) -> int:
    mode = args.mode
    collector = args.collector
    if mode == "forward" and collector is None and not args.records_out:
        raise UsageError("forward mode needs --collector or --records-out")
    # a records file stands in for the collector socket
    cfg = SnifferConfig(args.ports, mode, collector or ("127.0.0.1", 0), args.buffer)
    engine = AnalysisEngine(args.window_ms * 1000)
    record_fh = None
    if mode == "onsite":
        sink = OnsiteSink(engine)
    elif args.records_out:
        record_fh = open(args.records_out, "wb")
        sink = RecordFileWriter(record_fh)
    else:
        sink = UdpForwarder(collector)
    try:
        stats = run_sniffer(cfg, read_packets(args.pcap_in), sink, threaded=args.threaded)
    finally:
        if record_fh:
            record_fh.close()
        if isinstance(sink, UdpForwarder):
            sink.close()
    print(json.dumps(vars(stats)))
    if mode == "onsite":
        windows = engine.flush()
        if args.report:
            write_report(args.report, windows, args.top, {"summary": {"sniffer": vars(stats)}})
        elif not args.quiet:
            sys.stdout.write(report_csv(windows, args.top))
    return EXIT_OK


# collect ------------------------------------------------------------------

def cmd_collect(args) -> int:
    cfg = CollectorConfig(
        pcap_in=args.pcap_in or [],
        tunnel_pcap_in=args.tunnel_pcap_in or [],
        records_in=args.records_in or [],
        records_listen=args.records_listen,
        mirror_listen=args.mirror_listen,
        tunnel_listen=args.tunnel_listen,
        window_us=args.window_ms * 1000,
        report=args.report,
        dump=args.dump,
        dump_only=args.dump_only,
        deep_inspection=args.deep,
        watched_ports=args.ports,
        top_n=args.top,
        duration_s=args.duration,
    )
    summary = run_collector(cfg)
    print(json.dumps(summary))
    return EXIT_OK


# report -------------------------------------------------------------------

def render_report(doc: dict) -> str:
    cols = [("start_us", 14), ("len_us", 10), ("count", 7), ("min_us", 9), ("max_us", 9),
            ("mean_us", 11), ("load", 7), ("success_rate", 13)]
    lines = ["".join(f"{name:>{w}}" for name, w in cols) + "  top urls"]
    for win in doc.get("windows", []):
        cells = []
        for name, w in cols:
            v = win.get(name)
            if v is None:
                v = "-"
            elif isinstance(v, float):
                v = f"{v:.4f}" if name == "success_rate" else f"{v:.1f}"
            cells.append(f"{v:>{w}}")
        urls = " ".join(f"{u}={c}" for u, c in win.get("urls", [])[:3])
        lines.append("".join(cells) + "  " + urls)
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    try:
        doc = json.loads(Path(args.input).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"{args.input} is not a JSON report: {exc}") from None
    if not isinstance(doc, dict) or "windows" not in doc:
        raise ValueError(f"{args.input} is not a collector report")
    sys.stdout.write(render_report(doc))
    if args.data_out:
        # whitespace-separated columns, one window per line, for gnuplot & co.
        with open(args.data_out, "w", encoding="utf-8") as f:
            f.write("# start_s count min_us max_us mean_us load success_rate\n")
            for w in doc["windows"]:
                vals = [w["start_us"] / 1e6] + [w.get(k) for k in
                                                ("count", "min_us", "max_us", "mean_us", "load", "success_rate")]
                f.write(" ".join("nan" if v is None else str(v) for v in vals) + "\n")
    return EXIT_OK


# wiring -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sdnmon", description="Network-based application monitoring toolkit.")
    p.add_argument("--config", help="INI file with per-command defaults ([gen], [collect], ...)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic HTTP workload pcap and oracle log")
    g.add_argument("--spec", help="workload INI file ([workload] section)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--oracle")
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("switch-sim", help="replay a pcap through a flow table")
    s.add_argument("--rules", required=True)
    s.add_argument("--pcap-in", required=True)
    s.add_argument("--out-dir", required=True, help="directory receiving <port>.pcap files")
    s.add_argument("--default", type=_default_action, default=Drop(),
                   help="action for unmatched packets: drop or output:<port>")
    s.add_argument("--summary", help="write per-port and per-rule counters as JSON")
    s.set_defaults(func=cmd_switch_sim)

    n = sub.add_parser("sniff", help="run the port sniffer over a pcap")
    n.add_argument("--pcap-in", required=True)
    n.add_argument("--ports", type=_ports, default=DEFAULT_PORTS)
    n.add_argument("--mode", choices=("onsite", "forward"), default="onsite")
    n.add_argument("--collector", type=_address)
    n.add_argument("--records-out", help="forward mode: write length-prefixed records to a file")
    n.add_argument("--buffer", type=int, default=1024)
    n.add_argument("--threaded", action="store_true")
    n.add_argument("--window-ms", type=int, default=1000)
    n.add_argument("--report")
    n.add_argument("--top", type=int, default=10)
    n.add_argument("--quiet", action="store_true")
    n.set_defaults(func=cmd_sniff)

    c = sub.add_parser("collect", help="run the analysis collector")
    c.add_argument("--records-listen", type=_address)
    c.add_argument("--mirror-listen", type=_address)
    c.add_argument("--tunnel-listen", type=_address)
    c.add_argument("--pcap-in", action="append")
    c.add_argument("--tunnel-pcap-in", action="append")
    c.add_argument("--records-in", action="append")
    c.add_argument("--window-ms", type=int, default=1000)
    c.add_argument("--report")
    c.add_argument("--dump")
    c.add_argument("--dump-only", action="store_true")
    c.add_argument("--deep", action="store_true", help="deep-inspect mirrored payloads")
    c.add_argument("--ports", type=_ports, default=DEFAULT_PORTS)
    c.add_argument("--top", type=int, default=10)
    c.add_argument("--duration", type=float, help="socket mode: stop after this many seconds")
    c.set_defaults(func=cmd_collect)

    r = sub.add_parser("report", help="render a JSON report as a table")
    r.add_argument("input")
    r.add_argument("--data-out", help="write per-window columns for plotting")
    r.set_defaults(func=cmd_report)
    return p


def _apply_config(parser: argparse.ArgumentParser, path: str) -> None:
    cp = configparser.ConfigParser(interpolation=None)
    if not cp.read(path):
        raise UsageError(f"cannot read config {path}")
    subs = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices
    for section in cp.sections():
        if section not in subs:
            raise UsageError(f"unknown config section [{section}]")
        sp = subs[section]
        dests = {a.dest: a for a in sp._actions}
        defaults = {}
        for key, raw in cp[section].items():
            dest = key.replace("-", "_")
            action = dests.get(dest)
            if action is None:
                raise UsageError(f"unknown option {key!r} in [{section}]")
            if isinstance(action, argparse._StoreTrueAction):
                defaults[dest] = cp[section].getboolean(key)
            elif isinstance(action, argparse._AppendAction):
                defaults[dest] = [v.strip() for v in raw.split(",") if v.strip()]
            else:
                defaults[dest] = action.type(raw) if action.type else raw
            action.required = False
        sp.set_defaults(**defaults)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        # look for --config alone, before required options are enforced
        pre_parser = argparse.ArgumentParser(add_help=False)
        pre_parser.add_argument("--config")
        pre, _ = pre_parser.parse_known_args(argv)
        if pre.config:
            _apply_config(parser, pre.config)
    except (UsageError, argparse.ArgumentTypeError) as exc:
        print(f"sdnmon: {exc}", file=sys.stderr)
        return EXIT_USAGE
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not getattr(args, "func", None):
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"sdnmon: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RuleSyntaxError, SpecError, PcapFormatError, MalformedHeader, MalformedRecord, ValueError) as exc:
        print(f"sdnmon: input error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (CollectorError, OSError) as exc:
        print(f"sdnmon: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
