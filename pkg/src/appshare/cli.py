"""Command-line front end: broker, termhost, client, peer, pool, harness."""

from __future__ import annotations

import argparse
import json
import sys
import time

from appshare.apppool import load_manifest, save_manifest
from appshare.client import (
    DEFAULT_BROKER_PORT,
    DEFAULT_MASTER_SOCKET,
    MasterClient,
    connect_from_directive,
    run_slave,
)
from appshare.config import PeerConfig, load_config
from appshare.errors import AppShareError
from appshare.harness import fairness_report, fit_linear, loadtest, write_csv
from appshare.multicast import join_group
from appshare.net import BrokerServer, TermHostServer

DEFAULT_STATS_FILE = "broker-stats.json"


def parse_addr(value: str, default_host: str = "127.0.0.1") -> tuple[str, int]:
    """Parse host:port; a bare :port or port uses the default host."""
    host, _, port = value.rpartition(":")
    return (host or default_host, int(port))


def _wait_forever() -> None:
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass


# -- subcommand handlers -------------------------------------------------------


def cmd_broker_serve(args) -> int:
    broker = BrokerServer(
        listen=parse_addr(args.listen, default_host=""),
        upstream_addr=parse_addr(args.upstream),
        mode=args.mode,
        quantum=args.quantum_ms / 1000.0,
        max_sessions=args.max_sessions,
        stats_path=args.stats_file,
    ).start()
    print(f"broker listening on {broker.address} mode={args.mode} "
          f"upstream={args.upstream} quantum={args.quantum_ms}ms")
    _wait_forever()
    broker.stop()
    return 0


def cmd_broker_stats(args) -> int:
    with open(args.stats_file) as fh:
        stats = json.load(fh)
    for key, value in stats.items():
        print(f"{key}: {value}")
    return 0


def cmd_termhost_serve(args) -> int:
    host = TermHostServer(parse_addr(args.listen, default_host=""), args.mode).start()
    print(f"termhost listening on {host.address} mode={args.mode}")
    _wait_forever()
    host.stop()
    return 0


def cmd_client_master(args) -> int:
    master = MasterClient(
        parse_addr(args.broker),
        master_socket=parse_addr(args.master_socket),
        log_path=args.log,
    ).start()
    print(f"master session {master.session_id} on channel {master.channel_id}; "
          f"master socket {args.master_socket}, log {args.log}")
    _wait_forever()
    master.stop()
    return 0


def cmd_client_run(args) -> int:
    status, response = run_slave(args.command, parse_addr(args.master_socket))
    print(response)
    return status


def cmd_client_focus(args) -> int:
    status, response = run_slave(f"focus {args.win_id}", parse_addr(args.master_socket))
    print(response)
    return status


def cmd_peer_request(args) -> int:
    cfg = load_config(args.config) if args.config else PeerConfig()
    membership = join_group(cfg, interface=args.interface)
    try:
        membership.submit_query(args.app)
        directive = membership.wait_directive(args.timeout)
    finally:
        membership.leave()
    if directive is None:
        print(f"no offer for {args.app!r} within {args.timeout}s", file=sys.stderr)
        return 1
    print(f"offer from {directive.host_ip}: {directive.full_path} as {directive.username}")
    master, win_id = connect_from_directive(
        directive,
        broker_port=args.broker_port,
        master_socket=parse_addr(args.master_socket),
        log_path=args.log,
    )
    print(f"spawned window {win_id}")
    if master is not None:
        _wait_forever()
        master.stop()
    return 0


def cmd_peer_serve(args) -> int:
    cfg = load_config(args.config) if args.config else PeerConfig()
    pool = load_manifest(args.manifest)
    host = TermHostServer(parse_addr(args.host_listen, default_host=""), "brokered").start()
    broker = BrokerServer(
        listen=parse_addr(args.broker_listen, default_host=""),
        upstream_addr=host.address,
        mode="brokered",
        quantum=args.quantum_ms / 1000.0,
    ).start()
    membership = join_group(
        cfg,
        pool=pool,
        active_sessions=lambda: broker.core.metrics().n_sessions,
        interface=args.interface,
    )
    shared = [e.app_name for e in pool.entries() if e.shared]
    print(f"serving {len(shared)} shared app(s) {shared} on broker {broker.address}; "
          f"cluster group {cfg.multicast_group}:{cfg.multicast_port}")
    _wait_forever()
    membership.leave()
    broker.stop()
    host.stop()
    return 0


def cmd_pool(args) -> int:
    pool = load_manifest(args.manifest)
    if args.pool_cmd == "list":
        for entry in pool.entries():
            flag = "shared" if entry.shared else "unshared"
            print(f"{entry.app_name}\t{flag}\t{entry.full_path}\t{entry.username}")
        return 0
    pool.set_shared(args.app, args.pool_cmd == "share")
    save_manifest(pool, args.manifest)
    print(f"{args.app}: {'shared' if args.pool_cmd == 'share' else 'unshared'}")
    return 0


def cmd_harness_loadtest(args) -> int:
    rows = loadtest(
        args.mode,
        n_max=args.sessions,
        events_per_session=args.events,
        quantum=args.quantum_ms / 1000.0,
        out_path=args.out,
    )
    slope, intercept, r2 = fit_linear(rows, "total_bytes_queued")
    print(f"wrote {len(rows)} rows to {args.out}")
    print(f"retained-state proxy: slope {slope:.0f} B/session, "
          f"intercept {intercept:.0f} B, r2 {r2:.4f}")
    return 0


def cmd_harness_fairness(args) -> int:
    report = fairness_report(
        args.clients, args.rotations, quantum=args.quantum_ms / 1000.0, seed=args.seed
    )
    print(f"allocations per client: {report.allocation_counts}")
    print(f"rtt p50 {report.rtt_ms_p50:.1f}ms (round-robin expectation "
          f"{report.expected_p50_ms:.1f}ms), p95 {report.rtt_ms_p95:.1f}ms")
    return 0


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="appshare",
        description="Broker-mediated application sharing over a LAN cluster",
    )
    top = parser.add_subparsers(dest="group", required=True)

    broker = top.add_parser("broker", help="session broker").add_subparsers(
        dest="cmd", required=True
    )
    serve = broker.add_parser("serve", help="run the broker")
    serve.add_argument("--listen", default=":5000")
    serve.add_argument("--upstream", required=True, help="terminal host host:port")
    serve.add_argument("--mode", choices=["brokered", "direct"], default="brokered")
    serve.add_argument("--quantum-ms", type=int, default=50)
    serve.add_argument("--max-sessions", type=int, default=None)
    serve.add_argument("--stats-file", default=DEFAULT_STATS_FILE)
    serve.set_defaults(func=cmd_broker_serve)
    stats = broker.add_parser("stats", help="print the broker's stats file")
    stats.add_argument("--stats-file", default=DEFAULT_STATS_FILE)
    stats.set_defaults(func=cmd_broker_stats)

    termhost = top.add_parser("termhost", help="mock terminal host").add_subparsers(
        dest="cmd", required=True
    )
    serve = termhost.add_parser("serve", help="run the terminal host")
    serve.add_argument("--listen", default=":6000")
    serve.add_argument("--mode", choices=["brokered", "direct"], default="brokered")
    serve.set_defaults(func=cmd_termhost_serve)

    client = top.add_parser("client", help="master/slave client").add_subparsers(
        dest="cmd", required=True
    )
    master = client.add_parser("master", help="run the master client")
    master.add_argument("--broker", required=True, help="broker host:port")
    master.add_argument("--master-socket", default=_addr_str(DEFAULT_MASTER_SOCKET))
    master.add_argument("--log", default="session.log")
    master.set_defaults(func=cmd_client_master)
    run = client.add_parser("run", help="spawn a command via the running master")
    run.add_argument("command")
    run.add_argument("--master-socket", default=_addr_str(DEFAULT_MASTER_SOCKET))
    run.set_defaults(func=cmd_client_run)
    focus = client.add_parser("focus", help="declare the focused window")
    focus.add_argument("win_id", type=int)
    focus.add_argument("--master-socket", default=_addr_str(DEFAULT_MASTER_SOCKET))
    focus.set_defaults(func=cmd_client_focus)

    peer = top.add_parser("peer", help="cluster discovery").add_subparsers(
        dest="cmd", required=True
    )
    request = peer.add_parser("request", help="discover and open an app")
    request.add_argument("app")
    request.add_argument("--config", default=None, help="peer config file")
    request.add_argument("--timeout", type=float, default=10.0)
    request.add_argument("--broker-port", type=int, default=DEFAULT_BROKER_PORT)
    request.add_argument("--master-socket", default=_addr_str(DEFAULT_MASTER_SOCKET))
    request.add_argument("--log", default="session.log")
    request.add_argument("--interface", default=None, help="multicast interface IP")
    request.set_defaults(func=cmd_peer_request)
    serve = peer.add_parser("serve", help="offer shared apps to the cluster")
    serve.add_argument("--config", default=None)
    serve.add_argument("--manifest", required=True)
    serve.add_argument("--broker-listen", default=f":{DEFAULT_BROKER_PORT}")
    serve.add_argument("--host-listen", default=":6000")
    serve.add_argument("--quantum-ms", type=int, default=50)
    serve.add_argument("--interface", default=None)
    serve.set_defaults(func=cmd_peer_serve)

    pool = top.add_parser("pool", help="application pool")
    pool_sub = pool.add_subparsers(dest="pool_cmd", required=True)
    for name, needs_app in (("list", False), ("share", True), ("unshare", True)):
        sub = pool_sub.add_parser(name)
        sub.add_argument("--manifest", required=True)
        if needs_app:
            sub.add_argument("app")
        sub.set_defaults(func=cmd_pool)

    harness = top.add_parser("harness", help="load and fairness measurements").add_subparsers(
        dest="cmd", required=True
    )
    lt = harness.add_parser("loadtest", help="multi-session load rows to CSV")
    lt.add_argument("--mode", choices=["brokered", "direct"], default="brokered")
    lt.add_argument("--sessions", type=int, default=9)
    lt.add_argument("--events", type=int, default=100)
    lt.add_argument("--quantum-ms", type=int, default=50)
    lt.add_argument("--out", default="table.csv")
    lt.set_defaults(func=cmd_harness_loadtest)
    fair = harness.add_parser("fairness", help="rotation counts and latency")
    fair.add_argument("--clients", type=int, default=4)
    fair.add_argument("--rotations", type=int, default=25)
    fair.add_argument("--quantum-ms", type=int, default=50)
    fair.add_argument("--seed", type=int, default=0)
    fair.set_defaults(func=cmd_harness_fairness)

    return parser


def _addr_str(addr: tuple[str, int]) -> str:
    return f"{addr[0]}:{addr[1]}"


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except AppShareError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
