"""Command-line entry points.

``objrt run`` spawns a cluster and drives a named app, ``objrt analyze``
reports on a recorded trace, ``objrt launch`` runs one standalone agent
process for the tcp transport. Exit codes: 0 success (all self-checks
pass), 1 verification or runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import apps
from .analysis import TraceValidationError, detect_broadcast, load_trace, summary, traffic_matrix
from .cluster import ConfigurationError, spawn_cluster, launch_agent
from .transport import StartupError

logger = logging.getLogger("objrt.cli")

DEFAULT_REGISTRARS = ["objrt.apps:register_all"]


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="objrt",
                                     description="distributed object runtime")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="spawn a cluster and run an app")
    run.add_argument("app", choices=apps.APP_NAMES)
    run.add_argument("--agents", type=int, default=4)
    run.add_argument("--transport", choices=("inproc", "tcp"), default="inproc")
    run.add_argument("--mode", choices=("causal", "seq"), default="causal")
    run.add_argument("--seed", type=int, default=1)
    run.add_argument("--trace", default=None, help="trace output path (JSON lines)")
    run.add_argument("--fuzz", default=None,
                     help="scheduler fuzz delay range in microseconds, LO:HI")
    run.add_argument("--wait-timeout", type=float, default=None,
                     help="guard wait timeout in seconds (default: none)")
    run.add_argument("--config", default=None,
                     help="key=value config file; flags override it")
    # app-specific sizes
    run.add_argument("--workers", type=int, default=100, help="mapreduce workers")
    run.add_argument("--vertices", type=int, default=1024, help="bfs vertices")
    run.add_argument("--degree", type=float, default=8.0, help="bfs mean degree")
    run.add_argument("--parts", type=int, default=4, help="bfs partitions")
    run.add_argument("--root", type=int, default=0, help="bfs root vertex")
    run.add_argument("--pages", type=int, default=4, help="fft pages per dimension")
    run.add_argument("--page-size", type=int, default=8,
                     help="fft elements per page dimension")
    run.add_argument("--devices", type=int, default=None, help="fft device hosts")
    run.add_argument("--cpus", type=int, default=None, help="fft cpu hosts")
    run.add_argument("--variant", choices=("device", "reader"), default="device",
                     help="fft page-line read variant")
    run.add_argument("--paper-scale", action="store_true",
                     help="print the full-scale fft configuration and exit")
    run.add_argument("--arrays", type=int, default=64, help="broadcast targets")
    run.add_argument("--payload", type=int, default=64,
                     help="broadcast payload length in doubles")

    an = sub.add_parser("analyze", help="analyze a recorded trace")
    an.add_argument("trace", help="trace file or directory")
    an.add_argument("--json", default=None, help="write machine-readable summary")
    an.add_argument("--min-fanout", type=int, default=2)

    la = sub.add_parser("launch", help="run one standalone tcp agent")
    la.add_argument("--registry", required=True, help="registry host:port")
    la.add_argument("--agent-id", type=int, required=True)
    la.add_argument("--listen", default="127.0.0.1:0")
    la.add_argument("--seed", type=int, default=0)
    la.add_argument("--mode", choices=("causal", "seq"), default="causal")
    la.add_argument("--fuzz", default=None)
    la.add_argument("--wait-timeout", type=float, default=None)
    la.add_argument("--connect-timeout-ms", type=int, default=5000)
    la.add_argument("--trace", default=None)
    la.add_argument("--kinds", action="append", default=None,
                    help="kind registrar module:callable (repeatable)")
    return parser


def _load_config_file(path: str) -> dict:
    config = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            config[key.strip()] = value.strip()
    return config


def _cluster_config(args) -> dict:
    config: dict = {}
    if args.config:
        config.update(_load_config_file(args.config))
    config.update({
        "mode": args.mode,
        "seed": args.seed,
        "kinds": DEFAULT_REGISTRARS,
    })
    if args.fuzz:
        config["fuzz_us"] = args.fuzz
    if args.trace:
        config["trace_path"] = args.trace
        config["trace_memory"] = False
    if args.wait_timeout:
        config["wait_timeout_s"] = args.wait_timeout
    return config


def cmd_run(args) -> int:
    if args.app == "fft3d" and args.paper_scale:
        projection = apps.fft3d.paper_scale_projection()
        for key, value in projection.items():
            print(f"{key}: {value}")
        return 0
    config = _cluster_config(args)
    try:
        cluster = spawn_cluster(args.agents, args.transport, config)
    except (ConfigurationError, StartupError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        if args.app == "mapreduce":
            report = apps.mapreduce.demo(cluster, args.workers, args.seed)
        elif args.app == "bfs":
            report = apps.bfs.demo(cluster, args.vertices, args.degree, args.parts,
                                   args.seed, args.root)
        elif args.app == "fft3d":
            devices = args.devices or max(1, args.agents // 2)
            cpus = args.cpus or max(1, args.agents - devices)
            report = apps.fft3d.demo(cluster, args.pages, args.page_size, devices,
                                     cpus, args.seed, args.variant)
        else:
            report = apps.broadcast.demo(cluster, args.arrays, args.payload,
                                         args.seed)
    except Exception as exc:  # surfaced as a one-line diagnostic
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        cluster.shutdown()
        return 1
    stats = cluster.shutdown()
    for key, value in report.items():
        print(f"{key}: {value}")
    flagged = {st["agent"]: st["flags"] for st in stats if st["flags"]}
    leaked = {st["agent"]: st["guards"] for st in stats
              if st["guards"]["unreleased"] or st["guards"]["duplicate_releases"]}
    if flagged:
        print(f"protocol flags: {flagged}", file=sys.stderr)
    if leaked:
        print(f"guard leaks: {leaked}", file=sys.stderr)
    return 0 if report.get("passed") and not flagged and not leaked else 1


def cmd_analyze(args) -> int:
    try:
        trace = load_trace(args.trace)
    except TraceValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for problem in exc.problems[:20]:
            print(f"  - {problem}", file=sys.stderr)
        return 1
    matrix = traffic_matrix(trace)
    print(f"agents: {trace.agents}")
    print(f"events: {len(trace.events)}, wire records: {len(trace.wires)}")
    print("traffic matrix (src -> dst: messages, bytes):")
    for (src, dst), (count, nbytes) in sorted(matrix.items()):
        print(f"  {src} -> {dst}: {count} msgs, {nbytes} bytes")
    groups = detect_broadcast(trace, args.min_fanout)
    print(f"broadcast groups (min fanout {args.min_fanout}): {len(groups)}")
    for g in groups:
        print(f"  src {g.source} fanout {g.count} payload {g.payload_len}B "
              f"saves {g.bytes_saved}B if aggregated")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(summary(trace, args.min_fanout), fh, indent=2)
        print(f"summary written to {args.json}")
    return 0


def cmd_launch(args) -> int:
    config = {
        "mode": args.mode,
        "seed": args.seed,
        "fuzz_us": args.fuzz,
        "wait_timeout_s": args.wait_timeout,
        "connect_timeout_ms": args.connect_timeout_ms,
        "trace_path": args.trace,
        "kinds": args.kinds if args.kinds is not None else DEFAULT_REGISTRARS,
    }
    return launch_agent(args.agent_id, args.registry, args.listen, config)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    if args.command == "run":
        return cmd_run(args)
    if args.command == "analyze":
        return cmd_analyze(args)
    return cmd_launch(args)


if __name__ == "__main__":
    sys.exit(main())
