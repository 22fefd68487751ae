"""UDP multicast membership: the socket side of cluster discovery.

A Membership owns two sockets (a group-bound receiver and an
ephemeral-port sender), a receive loop and a ticker. All state changes go
through one lock around the ClusterState, so the pure state machine stays
single-owner as required.

Self-delivery: multicast loops our own datagrams back. Cross-host they
are recognized by source IP (peer_id is the host's IP); when several
peers share one host in tests, identity degenerates to the sender
socket's ephemeral port, which we also filter on.
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
import time

from appshare.apppool import AppPool
from appshare.cluster import ClusterState, ConnectDirective
from appshare.config import PeerConfig, is_class_d
from appshare.errors import BindFailureError, NotClassDError, WireError
from appshare.wire.datagrams import decode_datagram, encode_datagram, Leave

_RECV_SIZE = 2048


class Membership:
    """Handle returned by join_group; owns the receive loop."""

    def __init__(
        self,
        cfg: PeerConfig,
        pool: AppPool | None = None,
        active_sessions=None,
        interface: str | None = None,
    ):
        self.cfg = cfg
        self.state = ClusterState(cfg)
        self.directives: queue.Queue[ConnectDirective] = queue.Queue()
        self._pool = pool if pool is not None else AppPool()
        self._active_sessions = active_sessions or (lambda: 0)
        self._lock = threading.Lock()
        self._closed = threading.Event()
        self._decode_errors = 0

        if not is_class_d(cfg.multicast_group):
            raise NotClassDError(f"{cfg.multicast_group} is not a class D address")

        self._rx = socket.socket(socket.AF_INET, socket.SOCK_DGRAM, socket.IPPROTO_UDP)
        self._rx.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        if hasattr(socket, "SO_REUSEPORT"):
            self._rx.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEPORT, 1)
        try:
            self._rx.bind(("", cfg.multicast_port))
        except OSError as exc:
            self._rx.close()
            raise BindFailureError(f"cannot bind UDP port {cfg.multicast_port}: {exc}")
        member_on = interface or "0.0.0.0"
        mreq = struct.pack(
            "4s4s", socket.inet_aton(cfg.multicast_group), socket.inet_aton(member_on)
        )
        self._rx.setsockopt(socket.IPPROTO_IP, socket.IP_ADD_MEMBERSHIP, mreq)
        self._rx.settimeout(0.2)

        self._tx = socket.socket(socket.AF_INET, socket.SOCK_DGRAM, socket.IPPROTO_UDP)
        self._tx.setsockopt(socket.IPPROTO_IP, socket.IP_MULTICAST_TTL, 1)
        self._tx.setsockopt(socket.IPPROTO_IP, socket.IP_MULTICAST_LOOP, 1)
        if interface:
            self._tx.setsockopt(
                socket.IPPROTO_IP, socket.IP_MULTICAST_IF, socket.inet_aton(interface)
            )
        self._tx.bind(("", 0))
        self._tx_port = self._tx.getsockname()[1]

        # First outbound datagram is our heartbeat, synchronously, so the
        # peer is announced before join_group returns.
        with self._lock:
            self._send_all(self.state.tick_sender(time.monotonic()))

        self._rx_thread = threading.Thread(
            target=self._recv_loop, name="cluster-recv", daemon=True
        )
        self._tick_thread = threading.Thread(
            target=self._tick_loop, name="cluster-tick", daemon=True
        )
        self._rx_thread.start()
        self._tick_thread.start()

    # -- public API ------------------------------------------------------

    def submit_query(self, app_name: str) -> bool:
        with self._lock:
            accepted = self.state.submit_query(app_name, time.monotonic())
            if accepted:
                self._send_all(self.state.tick_sender(time.monotonic()))
        return accepted

    def wait_directive(self, timeout: float) -> ConnectDirective | None:
        try:
            return self.directives.get(timeout=timeout)
        except queue.Empty:
            return None

    def roster(self) -> dict[str, float]:
        with self._lock:
            return dict(self.state.roster)

    def pending(self) -> list[tuple[str, str]]:
        with self._lock:
            return list(self.state.pending.keys())

    def leave(self) -> None:
        """Send one Leave datagram and stop; safe to call twice."""
        if self._closed.is_set():
            return
        self._closed.set()
        try:
            self._send(Leave(self.cfg.peer_id))
        except OSError:
            pass  # best effort, UDP loss is tolerated anyway
        self._rx_thread.join(timeout=2.0)
        self._tick_thread.join(timeout=2.0)
        self._rx.close()
        self._tx.close()

    def __enter__(self) -> Membership:
        return self

    def __exit__(self, *exc) -> None:
        self.leave()

    # -- internals -------------------------------------------------------

    def _send(self, datagram) -> None:
        self._tx.sendto(
            encode_datagram(datagram), (self.cfg.multicast_group, self.cfg.multicast_port)
        )

    def _send_all(self, datagrams) -> None:
        for d in datagrams:
            self._send(d)

    def _recv_loop(self) -> None:
        while not self._closed.is_set():
            try:
                data, (src_ip, src_port) = self._rx.recvfrom(_RECV_SIZE)
            except socket.timeout:
                continue
            except OSError:
                break
            if src_port == self._tx_port:
                continue  # our own datagram looped back (same-host case)
            try:
                d = decode_datagram(data)
            except WireError:
                self._decode_errors += 1
                continue
            with self._lock:
                directives = self.state.handle_datagram(src_ip, d, time.monotonic())
            for directive in directives:
                self.directives.put(directive)

    def _tick_loop(self) -> None:
        interval = max(
            0.01, min(self.cfg.heartbeat_period, self.cfg.query_rebroadcast_period) / 4
        )
        while not self._closed.wait(interval):
            now = time.monotonic()
            with self._lock:
                out = self.state.tick_sender(now)
                out.extend(
                    self.state.process_pending(self._pool, self._active_sessions(), now)
                )
            try:
                self._send_all(out)
            except OSError:
                if self._closed.is_set():
                    break


def join_group(
    cfg: PeerConfig,
    pool: AppPool | None = None,
    active_sessions=None,
    interface: str | None = None,
) -> Membership:
    """Join the multicast group and start heartbeating.

    Raises NotClassDError for a non-multicast group address and
    BindFailureError when the UDP port cannot be bound.
    """
    return Membership(cfg, pool=pool, active_sessions=active_sessions, interface=interface)
