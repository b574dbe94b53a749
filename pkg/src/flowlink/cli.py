"""Command-line entry point.

Subcommands:
  run         long-running service on wall clock: flow ingestion from a file
              (optionally tailed) and/or a TCP feed, enriched flow + alert
              logs, metrics over HTTP, optional embedded simulated fleet
  sim         deterministic simulation on virtual time, with ground truth
  replay      re-run recorded inputs; reproduces the original logs byte for byte
  bench       throughput / latency / memory scaling report (machine-readable)
  dump-state  fetch the state dump from a running instance's metrics endpoint

The ingestion path is staged: sources feed a bounded queue (blocking when
full, so backpressure reaches the source), one dispatcher drains it into the
engine, and shutdown stops sources first, drains the queue, then flushes the
engine so every accepted flow is logged exactly once.
"""

from __future__ import annotations

import argparse
import json
import os
import queue
import signal
import sys
import threading
import time
import urllib.error
import urllib.request

from .agents import (FleetSimulator, WorkloadSpec, build_workload,
                     shift_workload)
from .bench import run_bench
from .config import ConfigError, EngineConfig, load_config_sections
from .engine import (Engine, open_outputs, run_simulation, schedule_replay,
                     FLOWS_LOG, ALERTS_LOG, INPUTS_LOG)
from .flowlog import (FLOW_FORMAT, LogFormatError, parse_flow_line,
                      read_header, read_inputs)
from .runtime import EventLoop, WallScheduler
from .service import (FlowFeedServer, MetricsServer, start_metrics_snapshots,
                      write_metrics_snapshot)

METRICS_SNAPSHOT = "metrics.json"


# --- shared plumbing ----------------------------------------------------------------


def _load_sections(path: str | None) -> tuple[EngineConfig, dict]:
    if path is None:
        return EngineConfig(), {}
    return load_config_sections(path)


def _blocking_put(q: queue.Queue, item, stop: threading.Event) -> bool:
    while not stop.is_set():
        try:
            q.put(item, timeout=0.5)
            return True
        except queue.Full:
            continue
    return False


def _feed_flow_file(path: str, follow: bool, q: queue.Queue,
                    stop: threading.Event) -> None:
    """Reads a flow-log v1 file into the ingest queue; with follow=True,
    keeps tailing for appended lines until stopped.  A malformed header or
    row stops this source loudly; rows already queued stand."""
    try:
        with open(path, encoding="utf-8") as fh:
            fields = None
            header: list[str] = []
            buf = ""
            while not stop.is_set():
                chunk = fh.readline()
                if not chunk:
                    if not follow:
                        return
                    time.sleep(0.2)
                    continue
                buf += chunk
                if not buf.endswith("\n"):
                    continue  # partial line while the writer is mid-append
                line, buf = buf, ""
                if fields is None:
                    header.append(line)
                    if len(header) == 2:
                        fields = read_header(iter(header), FLOW_FORMAT)
                    continue
                if not line.strip() or line.startswith("#"):
                    continue
                if not _blocking_put(q, parse_flow_line(line, fields), stop):
                    return
    except (OSError, LogFormatError) as exc:
        print(f"error: flow file {path}: {exc}", file=sys.stderr)


def _spec_from(section: dict, args) -> WorkloadSpec:
    merged = dict(section)
    for name, value in (("hosts", args.hosts), ("duration", args.duration),
                        ("event_rate", args.rate), ("seed", args.seed)):
        if value is not None:
            merged[name] = value
    return WorkloadSpec.from_dict(merged)


def _print_summary(engine: Engine, log_dir: str, out=sys.stderr) -> None:
    snap = engine.metrics_snapshot()
    counters = snap["counters"]["engine"]
    print(f"flows in/out: {counters.get('flows_in', 0)}"
          f"/{counters.get('flows_out', 0)}"
          f"  events: {counters.get('events_in', 0)}"
          f"  batches: {counters.get('batches_in', 0)}"
          f"  alerts: {snap['alerts']}", file=out)
    for proto, tally in sorted(snap["per_proto"].items()):
        print(f"  {proto}: {tally['flows']} flows, "
              f"attribution rate {tally['attribution_rate']:.4f}, "
              f"process uniqueness {tally['process_uniqueness']:.4f}",
              file=out)
    print(f"logs: {os.path.join(log_dir, FLOWS_LOG)}, "
          f"{os.path.join(log_dir, ALERTS_LOG)}", file=out)


# --- run ---------------------------------------------------------------------------


def _cmd_run(args) -> int:
    config, workload_section = _load_sections(args.config)
    if args.log_dir:
        config.log_dir = args.log_dir
    if args.metrics_port is not None:
        config.metrics_port = args.metrics_port

    outputs = open_outputs(config.log_dir, record_inputs=args.record)
    scheduler = WallScheduler()
    engine = Engine(config, scheduler, outputs=outputs)

    metrics_server = None
    feed = None
    try:
        if config.metrics_port:
            metrics_server = MetricsServer(engine, port=config.metrics_port)
        inbox: queue.Queue = queue.Queue(maxsize=4096)
        stop = threading.Event()
        if config.listen_port:
            feed = FlowFeedServer(lambda rec: _blocking_put(inbox, rec, stop),
                                  host=config.listen_addr,
                                  port=config.listen_port)
    except OSError as exc:
        print(f"error: cannot bind service port: {exc}", file=sys.stderr)
        if metrics_server is not None:
            metrics_server.stop()
        scheduler.stop()
        outputs.close()
        return 2

    engine.start()
    if metrics_server is not None:
        metrics_server.start()
        print(f"metrics on http://127.0.0.1:{metrics_server.port}/metrics",
              file=sys.stderr)
    if feed is not None:
        feed.start()
        print(f"flow feed on {config.listen_addr}:{feed.port}",
              file=sys.stderr)
    cancel_snapshots = start_metrics_snapshots(
        engine, os.path.join(config.log_dir, METRICS_SNAPSHOT),
        args.metrics_interval)

    try:
        for sig in (signal.SIGINT, signal.SIGTERM):
            signal.signal(sig, lambda _s, _f: stop.set())
    except ValueError:
        pass  # not on the main thread; --duration or stop() drives shutdown

    threads = []
    if args.flows:
        th = threading.Thread(
            target=_feed_flow_file,
            args=(args.flows, args.follow, inbox, stop),
            name="flowlink-flow-file", daemon=True)
        th.start()
        threads.append(th)

    fleet = None
    if workload_section:
        try:
            spec = WorkloadSpec.from_dict(workload_section)
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            stop.set()
            cancel_snapshots()
            engine.shutdown()
            if metrics_server is not None:
                metrics_server.stop()
            if feed is not None:
                feed.stop()
            scheduler.stop()
            return 2
        workload = shift_workload(build_workload(spec), scheduler.now() + 0.2)
        fleet = FleetSimulator(
            workload, scheduler, engine.node,
            flow_sink=engine.submit_flow,
            download_sink=engine.submit_download,
            register_host=engine.register_host,
            deregister_host=engine.deregister_host, groups=config.groups)
        fleet.start()
        print(f"embedded fleet: {len(workload.hosts)} hosts, "
              f"{len(workload.actions)} actions", file=sys.stderr)

    deadline = time.monotonic() + args.duration if args.duration else None
    file_only = args.flows and not args.follow and feed is None and fleet is None
    try:
        while not stop.is_set():
            if deadline is not None and time.monotonic() >= deadline:
                break
            try:
                record = inbox.get(timeout=0.2)
            except queue.Empty:
                if file_only and not any(t.is_alive() for t in threads):
                    break
                continue
            engine.submit_flow(record)
    finally:
        stop.set()
        if feed is not None:
            feed.stop()
        for th in threads:
            th.join(timeout=2.0)
        while True:  # drain whatever the sources already handed over
            try:
                engine.submit_flow(inbox.get_nowait())
            except queue.Empty:
                break
        cancel_snapshots()
        engine.shutdown()
        # final snapshot so short runs still leave an accurate metrics file
        write_metrics_snapshot(engine,
                               os.path.join(config.log_dir, METRICS_SNAPSHOT))
        if metrics_server is not None:
            metrics_server.stop()
        scheduler.stop()
    _print_summary(engine, config.log_dir)
    return 0


# --- sim ---------------------------------------------------------------------------


def _cmd_sim(args) -> int:
    config, workload_section = _load_sections(args.config)
    if args.log_dir:
        config.log_dir = args.log_dir
    try:
        spec = _spec_from(workload_section, args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    workload = build_workload(spec)
    outputs = open_outputs(config.log_dir, record_inputs=args.record)
    engine = run_simulation(config, workload, outputs)
    print(f"simulated {spec.hosts} hosts for {spec.duration:g}s "
          f"(seed {spec.seed}): {len(workload.actions)} actions, "
          f"{len(workload.flows)} flows", file=sys.stderr)
    if args.record:
        print(f"inputs recorded to "
              f"{os.path.join(config.log_dir, INPUTS_LOG)}", file=sys.stderr)
    _print_summary(engine, config.log_dir)
    return 0


# --- replay -------------------------------------------------------------------------


def _cmd_replay(args) -> int:
    config, _ = _load_sections(args.config)
    if args.log_dir:
        config.log_dir = args.log_dir
    try:
        with open(args.inputs, encoding="utf-8") as fh:
            entries = list(read_inputs(iter(fh)))
    except (OSError, LogFormatError, json.JSONDecodeError) as exc:
        print(f"error: cannot read inputs: {exc}", file=sys.stderr)
        return 2
    outputs = open_outputs(config.log_dir, record_inputs=False)
    loop = EventLoop()
    engine = Engine(config, loop, outputs=outputs)
    engine.start()
    n = schedule_replay(engine, entries)
    until = (max((float(e["t"]) for e in entries), default=0.0)
             + config.retry_window + 1.0)
    loop.run_until(until)
    engine.shutdown()
    print(f"replayed {n} inputs to t={until:g}", file=sys.stderr)
    _print_summary(engine, config.log_dir)
    return 0


# --- bench --------------------------------------------------------------------------


def _cmd_bench(args) -> int:
    memory_hosts = tuple(int(x) for x in args.memory_hosts.split(","))
    report = run_bench(hosts=args.hosts, rate=args.rate,
                       duration=args.seconds, memory_hosts=memory_hosts,
                       queue_capacity=args.queue_capacity,
                       producers=args.producers)
    blob = json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(blob)
    else:
        sys.stdout.write(blob)
    t = report.throughput
    m = report.memory
    print(f"sustained {t.events_per_sec:.0f} ev/s over {t.elapsed:.1f}s "
          f"({t.hosts} hosts x {t.rate_per_host:g} ev/s), "
          f"queue peak {t.queue_peak}/{t.queue_capacity}", file=sys.stderr)
    print(f"attribution latency p50/p95/p99: {t.attrib_latency_p50 * 1e3:.2f}/"
          f"{t.attrib_latency_p95 * 1e3:.2f}/"
          f"{t.attrib_latency_p99 * 1e3:.2f} ms", file=sys.stderr)
    print(f"memory {m.slope_bytes_per_host / 1024:.1f} KiB/host "
          f"(max slope deviation {m.max_slope_deviation:.1%})",
          file=sys.stderr)
    return 0


# --- dump-state ---------------------------------------------------------------------


def _cmd_dump_state(args) -> int:
    url = args.url or f"http://127.0.0.1:{args.port}/state"
    try:
        with urllib.request.urlopen(url, timeout=args.timeout) as resp:
            sys.stdout.write(resp.read().decode("utf-8"))
    except (urllib.error.URLError, OSError) as exc:
        print(f"error: cannot reach {url}: {exc}", file=sys.stderr)
        return 2
    return 0


# --- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowlink",
        description="correlate network flows with host telemetry")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run the live correlation service")
    run_p.add_argument("--config", help="engine (and optional workload) JSON")
    run_p.add_argument("--log-dir", help="override the configured log directory")
    run_p.add_argument("--metrics-port", type=int, default=None)
    run_p.add_argument("--metrics-interval", type=float, default=30.0,
                       help="seconds between metrics file snapshots")
    run_p.add_argument("--flows", help="flow-log file to ingest")
    run_p.add_argument("--follow", action="store_true",
                       help="keep tailing --flows for appended records")
    run_p.add_argument("--record", action="store_true",
                       help="record all inputs for later replay")
    run_p.add_argument("--duration", type=float, default=None,
                       help="exit cleanly after this many seconds")
    run_p.set_defaults(func=_cmd_run)

    sim_p = sub.add_parser("sim", help="run a deterministic simulation")
    sim_p.add_argument("--config", help="engine + workload JSON")
    sim_p.add_argument("--log-dir")
    sim_p.add_argument("--hosts", type=int, default=None)
    sim_p.add_argument("--duration", type=float, default=None)
    sim_p.add_argument("--rate", type=float, default=None,
                       help="audit events per second per host")
    sim_p.add_argument("--seed", type=int, default=None)
    sim_p.add_argument("--record", action="store_true",
                       help="record all inputs for later replay")
    sim_p.set_defaults(func=_cmd_sim)

    rep_p = sub.add_parser("replay", help="re-run recorded inputs")
    rep_p.add_argument("--config", help="engine JSON (must match the recording)")
    rep_p.add_argument("--inputs", default=os.path.join("logs", INPUTS_LOG))
    rep_p.add_argument("--log-dir", default="replay-logs")
    rep_p.set_defaults(func=_cmd_replay)

    bench_p = sub.add_parser("bench", help="throughput and memory benchmark")
    bench_p.add_argument("--hosts", type=int, default=870)
    bench_p.add_argument("--rate", type=float, default=4.0)
    bench_p.add_argument(
        "--seconds", type=float,
        default=float(os.environ.get("FLOWLINK_BENCH_SECONDS", "300")))
    bench_p.add_argument("--memory-hosts", default="100,200,400")
    bench_p.add_argument("--queue-capacity", type=int, default=4096)
    bench_p.add_argument("--producers", type=int, default=4)
    bench_p.add_argument("--out", help="write the JSON report here instead of stdout")
    bench_p.set_defaults(func=_cmd_bench)

    dump_p = sub.add_parser("dump-state",
                            help="print a running instance's state dump")
    dump_p.add_argument("--url", help="full /state URL")
    dump_p.add_argument("--port", type=int, default=9090,
                        help="metrics port on 127.0.0.1 when --url is absent")
    dump_p.add_argument("--timeout", type=float, default=5.0)
    dump_p.set_defaults(func=_cmd_dump_state)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
