"""TCP transport for the broker and terminal-host cores.

Threading contract (matches the cores' single-owner requirement): reader
threads only parse frames; every core step happens under the server's
coordinator lock, and outbound frames are enqueued to per-connection
writer threads while that lock is held, so each socket sees frames in
core order. Writers coalesce queued frames through a fixed staging buffer
so a whole slice drain goes out in one send.
"""

from __future__ import annotations

import json
import os
import socket
import threading
import time

from appshare.broker import BROKERED, BrokerCore, DIRECT, MetricsSnapshot
from appshare.errors import (
    BindFailureError,
    HandshakeTimeoutError,
    ProtocolViolationError,
    SessionRefusedError,
    UpstreamUnreachableError,
    WireError,
)
from appshare.termhost import HostCore, SessionRefused
from appshare.wire.frames import (
    CHANNEL_CONTROL,
    DEFAULT_OUT_BUFFER_CAPACITY,
    FrameDecoder,
    Opcode,
    StreamFrame,
    encode_frame,
)

_RECV_CHUNK = 4096
DEFAULT_HANDSHAKE_TIMEOUT = 5.0


class FrameConnection:
    """One TCP peer: incremental decoder in, staged writer thread out."""

    def __init__(self, sock: socket.socket, name: str = ""):
        self.sock = sock
        self.name = name
        self.decoder = FrameDecoder()
        self._out: list[bytes] = []
        self._staging = bytearray(DEFAULT_OUT_BUFFER_CAPACITY)
        self._cond = threading.Condition()
        self._closing = False
        self._dead = False
        self._writer = threading.Thread(
            target=self._write_loop, name=f"writer-{name}", daemon=True
        )
        self._writer.start()

    @property
    def buffer_bytes(self) -> int:
        return self.decoder.buffer_bytes + len(self._staging)

    def enqueue(self, *frames: StreamFrame) -> None:
        """Queue frames for the writer; call order defines wire order."""
        encoded = [encode_frame(f) for f in frames]
        with self._cond:
            if self._closing:
                return
            self._out.extend(encoded)
            self._cond.notify()

    def recv_frames(self) -> list[StreamFrame] | None:
        """Block for traffic; decoded frames, or None once the peer is gone."""
        try:
            data = self.sock.recv(_RECV_CHUNK)
        except (OSError, ValueError):
            return None
        if not data:
            return None
        self.decoder.feed(data)
        return self.decoder.drain()

    def recv_frame(self, timeout: float) -> StreamFrame:
        """One frame within timeout (handshake path)."""
        deadline = time.monotonic() + timeout
        frame = self.decoder.pop()
        while frame is None:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise HandshakeTimeoutError(f"no frame within {timeout}s")
            self.sock.settimeout(remaining)
            try:
                data = self.sock.recv(_RECV_CHUNK)
            except socket.timeout:
                raise HandshakeTimeoutError(f"no frame within {timeout}s") from None
            finally:
                self.sock.settimeout(None)
            if not data:
                raise ProtocolViolationError("connection closed during handshake")
            self.decoder.feed(data)
            frame = self.decoder.pop()
        return frame

    def close(self, flush: bool = True) -> None:
        with self._cond:
            if self._closing:
                return
            self._closing = True
            if not flush:
                self._out.clear()
            self._cond.notify()

    def abort(self) -> None:
        """Immediate teardown, e.g. when the reader saw EOF."""
        self.close(flush=False)
        self._shutdown()

    def join(self, timeout: float = 2.0) -> None:
        self._writer.join(timeout=timeout)

    def _write_loop(self) -> None:
        while True:
            with self._cond:
                while not self._out and not self._closing:
                    self._cond.wait()
                chunks, self._out = self._out, []
                closing = self._closing
            try:
                self._flush(chunks)
            except OSError:
                closing = True
            if closing:
                self._shutdown()
                return

    def _flush(self, chunks: list[bytes]) -> None:
        staged = 0
        cap = len(self._staging)
        for chunk in chunks:
            if staged and staged + len(chunk) > cap:
                self.sock.sendall(memoryview(self._staging)[:staged])
                staged = 0
            if len(chunk) > cap:
                self.sock.sendall(chunk)
                continue
            self._staging[staged : staged + len(chunk)] = chunk
            staged += len(chunk)
        if staged:
            self.sock.sendall(memoryview(self._staging)[:staged])

    def _shutdown(self) -> None:
        if self._dead:
            return
        self._dead = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def _listen(address: tuple[str, int]) -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        sock.bind(address)
    except OSError as exc:
        sock.close()
        raise BindFailureError(f"cannot bind {address}: {exc}")
    sock.listen(64)
    return sock


def connect_and_hello(
    address: tuple[str, int], timeout: float = DEFAULT_HANDSHAKE_TIMEOUT
) -> tuple[FrameConnection, int, int]:
    """Open a framed connection and negotiate: returns (conn, id, channel).

    Works against both the broker and the terminal host; both answer a
    Hello with Welcome `<session_id>,<seamless_channel>` or refuse with a
    Bye error frame.
    """
    try:
        sock = socket.create_connection(address, timeout=timeout)
    except OSError as exc:
        raise UpstreamUnreachableError(f"cannot connect {address}: {exc}")
    sock.settimeout(None)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    conn = FrameConnection(sock, name=f"to-{address[0]}:{address[1]}")
    conn.enqueue(StreamFrame(CHANNEL_CONTROL, Opcode.HELLO, b""))
    try:
        frame = conn.recv_frame(timeout)
    except (HandshakeTimeoutError, ProtocolViolationError):
        conn.abort()
        raise
    if frame.opcode == Opcode.BYE:
        conn.abort()
        raise SessionRefusedError(frame.text())
    if frame.opcode != Opcode.WELCOME:
        conn.abort()
        raise ProtocolViolationError(f"expected WELCOME, got {frame.opcode.name}")
    ident, _, channel = frame.text().partition(",")
    return conn, int(ident), int(channel)


class TermHostServer:
    """Socket front end for HostCore."""

    def __init__(
        self,
        listen: tuple[str, int] = ("127.0.0.1", 0),
        mode: str = BROKERED,
        handshake_timeout: float = DEFAULT_HANDSHAKE_TIMEOUT,
    ):
        self.core = HostCore(mode)
        self._lock = threading.Lock()
        self._listen_addr = listen
        self._handshake_timeout = handshake_timeout
        self._sock: socket.socket | None = None
        self._threads: list[threading.Thread] = []
        self._conns: dict[int, FrameConnection] = {}
        self._stopping = False

    @property
    def address(self) -> tuple[str, int]:
        return self._sock.getsockname()

    def start(self) -> TermHostServer:
        self._sock = _listen(self._listen_addr)
        t = threading.Thread(target=self._accept_loop, name="host-accept", daemon=True)
        t.start()
        self._threads.append(t)
        return self

    def _accept_loop(self) -> None:
        while not self._stopping:
            try:
                sock, _addr = self._sock.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            t = threading.Thread(
                target=self._serve_session, args=(sock,), name="host-session", daemon=True
            )
            t.start()
            self._threads.append(t)

    def _serve_session(self, sock: socket.socket) -> None:
        conn = FrameConnection(sock, name="host-session")
        try:
            first = conn.recv_frame(self._handshake_timeout)
        except (HandshakeTimeoutError, ProtocolViolationError):
            conn.abort()
            return
        with self._lock:
            try:
                session, welcome = self.core.session_hello(first)
            except SessionRefused as refusal:
                conn.enqueue(refusal.frame)
                conn.close()
                return
            hsid = session.host_session_id
            self.core.set_session_buffer(hsid, conn.buffer_bytes)
            self._conns[hsid] = conn
            conn.enqueue(welcome)
        while True:
            frames = conn.recv_frames()
            if frames is None:
                break
            with self._lock:
                for frame in frames:
                    replies = self.core.handle_frame(hsid, frame)
                    if replies:
                        conn.enqueue(*replies)
        with self._lock:
            self.core.session_gone(hsid)
            self._conns.pop(hsid, None)
        conn.abort()

    def retained_bytes(self) -> int:
        with self._lock:
            for hsid, conn in self._conns.items():
                self.core.set_session_buffer(hsid, conn.buffer_bytes)
            return self.core.retained_bytes()

    def session_count(self) -> int:
        with self._lock:
            return len(self.core.sessions)

    def stop(self) -> None:
        self._stopping = True
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
        with self._lock:
            conns = list(self._conns.values())
        for conn in conns:
            conn.abort()

    def __enter__(self) -> TermHostServer:
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


class BrokerServer:
    """Socket front end for BrokerCore.

    Brokered mode connects its single upstream session before accepting
    any client; direct mode opens one upstream per accepted client.
    """

    def __init__(
        self,
        listen: tuple[str, int],
        upstream_addr: tuple[str, int],
        mode: str = BROKERED,
        quantum: float = 0.050,
        input_queue_cap: int = 10_000,
        max_sessions: int | None = None,
        handshake_timeout: float = DEFAULT_HANDSHAKE_TIMEOUT,
        stats_path: str | None = None,
        stats_interval: float = 1.0,
    ):
        self.core = BrokerCore(
            mode, quantum, input_queue_cap=input_queue_cap, max_sessions=max_sessions
        )
        self.upstream_addr = upstream_addr
        self._lock = threading.Lock()
        self._listen_addr = listen
        self._handshake_timeout = handshake_timeout
        self._stats_path = stats_path
        self._stats_interval = stats_interval
        self._sock: socket.socket | None = None
        self._clients: dict[int, FrameConnection] = {}
        self._upstreams: dict[int, FrameConnection] = {}
        self._threads: list[threading.Thread] = []
        self._stopping = threading.Event()
        self._next_upstream_id = 0

    @property
    def address(self) -> tuple[str, int]:
        return self._sock.getsockname()

    def start(self) -> BrokerServer:
        if self.core.mode == BROKERED:
            self._open_upstream()  # before any client, the single login
        self._sock = _listen(self._listen_addr)
        for target, name in (
            (self._accept_loop, "broker-accept"),
            (self._scheduler_loop, "broker-scheduler"),
        ):
            t = threading.Thread(target=target, name=name, daemon=True)
            t.start()
            self._threads.append(t)
        if self._stats_path:
            t = threading.Thread(target=self._stats_loop, name="broker-stats", daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def _open_upstream(self, owner_session: int | None = None) -> int:
        conn, _hsid, channel = connect_and_hello(self.upstream_addr, self._handshake_timeout)
        with self._lock:
            upstream_id = self._next_upstream_id
            self._next_upstream_id += 1
            self.core.attach_upstream(upstream_id, channel, owner_session)
            self.core.set_upstream_buffer(upstream_id, conn.buffer_bytes)
            self._upstreams[upstream_id] = conn
        t = threading.Thread(
            target=self._upstream_loop,
            args=(upstream_id, conn),
            name=f"upstream-{upstream_id}",
            daemon=True,
        )
        t.start()
        self._threads.append(t)
        return upstream_id

    def _upstream_loop(self, upstream_id: int, conn: FrameConnection) -> None:
        while True:
            frames = conn.recv_frames()
            if frames is None:
                break
            with self._lock:
                for frame in frames:
                    self._dispatch(self.core.upstream_frame(upstream_id, frame, _now()))
        with self._lock:
            self._upstreams.pop(upstream_id, None)
            self.core.upstreams.pop(upstream_id, None)
        conn.abort()

    def _accept_loop(self) -> None:
        while not self._stopping.is_set():
            try:
                sock, addr = self._sock.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            t = threading.Thread(
                target=self._serve_client,
                args=(sock, f"{addr[0]}:{addr[1]}"),
                name="broker-client",
                daemon=True,
            )
            t.start()
            self._threads.append(t)

    def _serve_client(self, sock: socket.socket, addr: str) -> None:
        conn = FrameConnection(sock, name=f"client-{addr}")
        try:
            first = conn.recv_frame(self._handshake_timeout)
        except (HandshakeTimeoutError, ProtocolViolationError):
            conn.abort()
            return
        upstream_id = None
        if self.core.mode == DIRECT:
            try:
                upstream_id = self._open_upstream()
            except (UpstreamUnreachableError, SessionRefusedError, WireError):
                conn.abort()
                return
        with self._lock:
            try:
                session, effects = self.core.negotiate(
                    first, _now(), addr=addr, upstream_id=upstream_id
                )
            except ProtocolViolationError:
                conn.abort()
                return
            sid = session.session_id
            self.core.set_session_buffer(sid, conn.buffer_bytes)
            self._clients[sid] = conn
            self._dispatch(effects)
        while True:
            frames = conn.recv_frames()
            if frames is None:
                break
            with self._lock:
                for frame in frames:
                    self._dispatch(self.core.client_frame(sid, frame, _now()))
        self._drop_client(sid, conn)

    def _drop_client(self, sid: int, conn: FrameConnection) -> None:
        with self._lock:
            session = self.core.sessions.get(sid)
            upstream_id = session.upstream_id if session else None
            self._dispatch(self.core.client_gone(sid, _now()))
            self._clients.pop(sid, None)
            up_conn = self._upstreams.pop(upstream_id, None) if upstream_id is not None else None
        conn.abort()
        if up_conn is not None:
            up_conn.close()

    def _scheduler_loop(self) -> None:
        while not self._stopping.is_set():
            with self._lock:
                deadline = self.core.next_deadline()
                now = _now()
                if deadline is not None and now >= deadline:
                    self._dispatch(self.core.tick(now))
                    deadline = self.core.next_deadline()
            if deadline is None:
                wait = 0.005
            else:
                wait = min(max(deadline - _now(), 0.0005), 0.01)
            self._stopping.wait(wait)

    def _dispatch(self, effects) -> None:
        # caller holds self._lock: enqueue order is core order
        for sid, frame in effects.to_client:
            conn = self._clients.get(sid)
            if conn is not None:
                conn.enqueue(frame)
        for upstream_id, frame in effects.to_upstream:
            conn = self._upstreams.get(upstream_id)
            if conn is not None:
                conn.enqueue(frame)
        for sid, _reason in effects.close_client:
            conn = self._clients.pop(sid, None)
            if conn is not None:
                conn.close()

    def metrics(self) -> MetricsSnapshot:
        with self._lock:
            for sid, conn in self._clients.items():
                self.core.set_session_buffer(sid, conn.buffer_bytes)
            for upstream_id, conn in self._upstreams.items():
                self.core.set_upstream_buffer(upstream_id, conn.buffer_bytes)
            return self.core.metrics()

    def _stats_loop(self) -> None:
        while not self._stopping.wait(self._stats_interval):
            self.write_stats()

    def write_stats(self) -> None:
        snap = self.metrics()
        payload = {
            "mode": snap.mode,
            "n_sessions": snap.n_sessions,
            "n_upstream_sessions": snap.n_upstream_sessions,
            "total_bytes_queued": snap.total_bytes_queued,
            "per_session_bytes": snap.per_session_bytes,
            "upstream_buffer_bytes": snap.upstream_buffer_bytes,
            "updates_dropped": snap.updates_dropped,
            "frames_discarded": snap.frames_discarded,
            "written_at": time.time(),
        }
        tmp = f"{self._stats_path}.tmp"
        with open(tmp, "w") as fh:
            json.dump(payload, fh, indent=2)
        os.replace(tmp, self._stats_path)

    def stop(self) -> None:
        self._stopping.set()
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
        with self._lock:
            conns = list(self._clients.values()) + list(self._upstreams.values())
        for conn in conns:
            conn.abort()

    def __enter__(self) -> BrokerServer:
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def _now() -> float:
    return time.monotonic()
