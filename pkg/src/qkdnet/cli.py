"""Command-line entry point.

    qkdnet run --scenario madqci.scenario --seed 7 --duration 60 --report summary
    qkdnet serve --scenario madqci.scenario --seed 7 --bind 127.0.0.1:8541
    qkdnet report coexistence --scenario madqci.scenario

Exit codes: 0 success, 1 scenario error, 2 usage or workload failure.
Scenario paths that do not exist on disk are looked up among the bundled
scenarios. QKDNET_LOG sets the log level.
"""

from __future__ import annotations

import argparse
import logging
import os
import signal
import sys
import threading
from importlib import resources

from . import messages, netmodel, optics
from .engine import SimulationEngine
from .netmodel import NetworkModel

log = logging.getLogger("qkdnet")

_PREFERRED_DOMAIN_ORDER = ("TID", "RM", "COLOCATED", "BORDER")


def resolve_scenario(path: str) -> str:
    if os.path.exists(path):
        with open(path, "r", encoding="utf-8") as fh:
            return fh.read()
    bundled = resources.files("qkdnet") / "scenarios" / path
    if bundled.is_file():
        return bundled.read_text(encoding="utf-8")
    raise netmodel.ScenarioError(f"scenario not found: {path}")


def load_model(path: str) -> NetworkModel:
    return netmodel.load_scenario(resolve_scenario(path))


# ---------------------------------------------------------------------------
# report rendering


def _table(headers: list[str], rows: list[list[str]],
           right_align_from: int = 1) -> str:
    widths = [
        max(len(headers[i]), *(len(r[i]) for r in rows)) if rows else len(headers[i])
        for i in range(len(headers))
    ]
    lines = []
    for row in [headers] + rows:
        cells = []
        for i, cell in enumerate(row):
            if i >= right_align_from:
                cells.append(cell.rjust(widths[i]))
            else:
                cells.append(cell.ljust(widths[i]))
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines) + "\n"


def _domain_order(domains) -> list[str]:
    ordered = [d for d in _PREFERRED_DOMAIN_ORDER if d in domains]
    ordered += sorted(d for d in domains if d not in _PREFERRED_DOMAIN_ORDER)
    return ordered


def render_summary(model: NetworkModel) -> str:
    summaries = netmodel.summarize(model)
    rows = []
    for domain in _domain_order(summaries):
        s = summaries[domain]
        rows.append([
            netmodel.DOMAIN_DISPLAY.get(domain, domain),
            str(s.nodes),
            str(s.qkd_links),
            f"{s.link_length_km:.1f}",
            str(s.qkd_modules),
            str(s.encryptors),
        ])
    return _table(
        ["domain", "nodes", "qkd_links", "length_km", "modules", "encryptors"],
        rows,
    )


def render_coexistence(model: NetworkModel) -> str:
    rows = []
    for span in model.spans:
        census = netmodel.coexistence_census(model, span.id)
        a, b = span.endpoints
        label = f"{model.node(a).display_name}-{model.node(b).display_name}"
        rows.append([
            label,
            str(census.classical),
            str(census.quantum),
            str(census.encrypted),
        ])
    return _table(["link", "classical", "quantum", "encrypted"], rows)


def render_connectivity(model: NetworkModel) -> str:
    entries = optics.enumerate_connectivity(model)
    rows = [
        [e.src_module, e.dst_module, str(e.channel), f"{e.loss_db:.2f}",
         str(e.hops)]
        for e in entries
    ]
    body = _table(["src", "dst", "channel", "loss_db", "hops"], rows,
                  right_align_from=2)
    tunable = {m.id for m in model.modules if m.tunable}
    pairs = {
        frozenset((e.src_module, e.dst_module))
        for e in entries
        if e.src_module in tunable and e.dst_module in tunable
    }
    return body + f"# switched combinations: {len(pairs)} module pairs\n"


def render_sessions(trace_path: str) -> str:
    if not trace_path or not os.path.exists(trace_path):
        raise netmodel.ScenarioError(
            "no trace: 'report sessions' needs --trace pointing at a prior run"
        )
    rows = []
    for msg in messages.read_trace(trace_path):
        if msg.kind != messages.KIND_SESSION_CMD or msg.get("cmd") != "close":
            continue
        rows.append([
            msg.get("session") or "",
            msg.get("opened_tick") or "",
            msg.get("closed_tick") or "",
            msg.get("delivered_chunks") or "0",
            msg.get("delivered_bytes") or "0",
            msg.get("consumed") or "-",
        ])
    return _table(
        ["session", "opened", "closed", "chunks", "bytes", "consumed_by_link"],
        rows,
    )


_RENDERERS = {
    "summary": lambda model, args: render_summary(model),
    "coexistence": lambda model, args: render_coexistence(model),
    "connectivity": lambda model, args: render_connectivity(model),
    "sessions": lambda model, args: render_sessions(args.trace),
}


# ---------------------------------------------------------------------------
# subcommands


def cmd_run(args) -> int:
    try:
        model = load_model(args.scenario)
    except netmodel.ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return 1
    engine = SimulationEngine(
        model, seed=args.seed, trace_path=args.trace, metrics_path=args.metrics,
    )
    engine.run(args.duration, args.tick)
    engine.shutdown()
    for kind in args.report:
        renderer = _RENDERERS.get(kind)
        if renderer is None:
            print(f"unknown report kind '{kind}'", file=sys.stderr)
            return 2
        sys.stdout.write(f"== {kind} ==\n")
        sys.stdout.write(renderer(model, args))
    if engine.workload_failures:
        for failure in engine.workload_failures:
            print(f"workload failure: {failure}", file=sys.stderr)
        return 2
    return 0


def cmd_serve(args) -> int:
    from .northbound import NorthboundServer, NorthboundService

    try:
        model = load_model(args.scenario)
    except netmodel.ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return 1
    host, _, port = args.bind.partition(":")
    engine = SimulationEngine(
        model, seed=args.seed, trace_path=args.trace, metrics_path=args.metrics,
    )
    engine.tick_s = args.tick
    service = NorthboundService(engine)
    try:
        server = NorthboundServer(service, host or "127.0.0.1", int(port or 0))
    except OSError as exc:
        print(f"bind error: {exc}", file=sys.stderr)
        return 1
    server.start()
    print(f"serving on {server.url}", flush=True)

    stop = threading.Event()

    def clock():
        while not stop.is_set():
            engine.tick()
            stop.wait(args.tick)

    clock_thread = None
    if not args.manual_clock:
        clock_thread = threading.Thread(target=clock, daemon=True)
        clock_thread.start()

    def handle_term(signum, frame):
        raise KeyboardInterrupt

    signal.signal(signal.SIGTERM, handle_term)
    try:
        while True:
            signal.pause()
    except KeyboardInterrupt:
        pass
    finally:
        stop.set()
        if clock_thread is not None:
            clock_thread.join(timeout=5)
        server.stop()
        records = engine.shutdown()
        print(
            f"closed {len(records)} sessions, accounting flushed",
            file=sys.stderr,
        )
    return 0


def cmd_report(args) -> int:
    renderer = _RENDERERS.get(args.kind)
    if renderer is None:
        print(f"unknown report kind '{args.kind}'", file=sys.stderr)
        return 2
    try:
        model = load_model(args.scenario)
        sys.stdout.write(renderer(model, args))
    except netmodel.ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------


def _positive(kind, name):
    def convert(text):
        value = kind(text)
        if value <= 0:
            raise argparse.ArgumentTypeError(f"{name} must be > 0")
        return value
    return convert


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qkdnet",
        description="simulated software-defined QKD network",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, duration_default=None):
        p.add_argument("--scenario", required=True, help="scenario path or bundled name")
        p.add_argument("--seed", type=lambda v: int(v) & ((1 << 64) - 1),
                       default=0, help="64-bit simulation seed")
        p.add_argument("--tick", type=_positive(float, "tick"), default=1.0,
                       help="seconds per simulation tick")
        p.add_argument("--metrics", default=None, help="per-link CSV metrics path")
        p.add_argument("--trace", default=None, help="control trace output path")

    p_run = sub.add_parser("run", help="run a deterministic simulation")
    common(p_run)
    p_run.add_argument("--duration", type=_positive(float, "duration"),
                       required=True, help="simulated seconds")
    p_run.add_argument("--report", default="",
                       type=lambda v: [k for k in v.split(",") if k],
                       help="comma-separated reports to print after the run")
    p_run.set_defaults(func=cmd_run)

    p_serve = sub.add_parser("serve", help="serve the key delivery API")
    common(p_serve)
    p_serve.add_argument("--bind", default="127.0.0.1:0", help="host:port")
    p_serve.add_argument("--manual-clock", action="store_true",
                         help="advance time only via POST /ops/advance")
    p_serve.set_defaults(func=cmd_serve)

    p_report = sub.add_parser("report", help="print a report for a scenario")
    p_report.add_argument("kind", choices=sorted(_RENDERERS))
    p_report.add_argument("--scenario", required=True)
    p_report.add_argument("--trace", default=None,
                          help="trace of a prior run (sessions report)")
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("QKDNET_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
