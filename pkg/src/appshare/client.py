"""Client side: master mode, slave mode and the discovery glue.

A master owns one broker session plus a local master socket. Slaves are
one-shot: they write a single command line to the master socket, read one
`ok,<win_id>` / `err,<reason>` line back and exit, so any number of
applications share the master's single broker session.

Master-socket line protocol (newline-terminated UTF-8):

    <command>      spawn <command> on the host, answer ok,<win_id>
    focus <id>     declare the focused window, answer ok,<id>

Updates received from the broker are appended line by line to a session
log file, standing in for rendering; its per-window sequence numbers come
straight from the host so gaps are detectable.
"""

from __future__ import annotations

import errno
import queue
import socket
import threading
from pathlib import Path

from appshare.cluster import ConnectDirective
from appshare.errors import (
    BrokerUnreachableError,
    MasterSocketInUseError,
    NoMasterError,
    SlaveTimeoutError,
    UpstreamUnreachableError,
)
from appshare.net import FrameConnection, connect_and_hello
from appshare.wire.frames import CHANNEL_GLOBAL, Opcode, StreamFrame

DEFAULT_MASTER_SOCKET = ("127.0.0.1", 5299)
DEFAULT_BROKER_PORT = 5000
SLAVE_TIMEOUT = 10.0


class MasterClient:
    """Holds the broker session; see module docstring for the line protocol."""

    def __init__(
        self,
        broker_addr: tuple[str, int],
        master_socket: tuple[str, int] = DEFAULT_MASTER_SOCKET,
        log_path: str | Path | None = None,
    ):
        self.broker_addr = broker_addr
        self.master_socket_addr = master_socket
        self.log_path = Path(log_path) if log_path else None
        self.session_id: int | None = None
        self.channel_id: int | None = None
        self.windows: dict[int, str] = {}
        self.focused: int | None = None
        self.updates: list[str] = []
        self._conn: FrameConnection | None = None
        self._listener: socket.socket | None = None
        self._log_fh = None
        self._pending_lock = threading.Lock()
        self._pending_replies: list = []  # FIFO of callables awaiting SpawnAck
        self._stopping = threading.Event()
        self._threads: list[threading.Thread] = []

    def start(self) -> MasterClient:
        try:
            self._conn, self.session_id, self.channel_id = connect_and_hello(
                self.broker_addr
            )
        except UpstreamUnreachableError as exc:
            raise BrokerUnreachableError(str(exc)) from None
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            listener.bind(self.master_socket_addr)
        except OSError as exc:
            listener.close()
            self._conn.abort()
            if exc.errno == errno.EADDRINUSE:
                raise MasterSocketInUseError(
                    f"master socket {self.master_socket_addr} already owned"
                ) from None
            raise
        listener.listen(8)
        self._listener = listener
        if self.log_path:
            self._log_fh = open(self.log_path, "a", buffering=1)
        for target, name in (
            (self._broker_loop, "master-broker"),
            (self._accept_loop, "master-socket"),
        ):
            t = threading.Thread(target=target, name=name, daemon=True)
            t.start()
            self._threads.append(t)
        return self

    # -- actions -----------------------------------------------------------

    def spawn(self, command: str, timeout: float = SLAVE_TIMEOUT) -> int:
        """Spawn via this master's session; returns the new window id."""
        waiter: queue.SimpleQueue = queue.SimpleQueue()
        self._send_spawn(command, waiter.put)
        try:
            response = waiter.get(timeout=timeout)
        except queue.Empty:
            raise SlaveTimeoutError(f"no spawn ack for {command!r}") from None
        if not response.startswith("ok,"):
            raise RuntimeError(response)
        return int(response.split(",", 1)[1])

    def send_focus(self, win_id: int, flags: str = "0") -> None:
        self._conn.enqueue(
            StreamFrame(self.channel_id, Opcode.FOCUS, f"focus,{win_id},{flags}".encode())
        )
        self.focused = win_id

    def send_input(self, payload: bytes) -> None:
        self._conn.enqueue(StreamFrame(CHANNEL_GLOBAL, Opcode.INPUT, payload))

    def _send_spawn(self, command: str, reply) -> None:
        with self._pending_lock:
            self._pending_replies.append(reply)
        self._conn.enqueue(
            StreamFrame(self.channel_id, Opcode.SPAWN, f"spawn,{command}".encode())
        )

    # -- broker traffic ------------------------------------------------------

    def _broker_loop(self) -> None:
        while not self._stopping.is_set():
            frames = self._conn.recv_frames()
            if frames is None:
                break
            for frame in frames:
                self._on_frame(frame)
        self._fail_pending("err,broker gone")

    def _on_frame(self, frame: StreamFrame) -> None:
        body = frame.text()
        if frame.opcode == Opcode.UPDATE:
            self.updates.append(body)
            if self._log_fh:
                self._log_fh.write(body + "\n")
            return
        if frame.opcode == Opcode.SPAWN_ACK:
            parts = body.split(",")
            if parts[0] == "ack":
                win_id = int(parts[1])
                self.windows[win_id] = parts[2] if len(parts) > 2 else ""
                if self.focused is None:
                    self.focused = win_id
                self._answer_pending(f"ok,{win_id}")
            else:
                self._answer_pending(body)
            return
        # focus errors and other notices are logged, not correlated
        if body.startswith("err,") and self._log_fh:
            self._log_fh.write(f"# {frame.opcode.name.lower()} {body}\n")

    def _answer_pending(self, response: str) -> None:
        with self._pending_lock:
            reply = self._pending_replies.pop(0) if self._pending_replies else None
        if reply is not None:
            reply(response)

    def _fail_pending(self, response: str) -> None:
        with self._pending_lock:
            pending, self._pending_replies = self._pending_replies, []
        for reply in pending:
            reply(response)

    # -- master socket ---------------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._stopping.is_set():
            try:
                sock, _addr = self._listener.accept()
            except OSError:
                return
            t = threading.Thread(
                target=self._serve_slave, args=(sock,), name="master-slave", daemon=True
            )
            t.start()
            self._threads.append(t)

    def _serve_slave(self, sock: socket.socket) -> None:
        sock.settimeout(SLAVE_TIMEOUT)
        fh = sock.makefile("rw", encoding="utf-8", newline="\n")
        try:
            line = fh.readline().strip()
            if not line:
                return
            if line.startswith("focus "):
                win_id = line.split(None, 1)[1]
                if win_id.isdigit():
                    self.send_focus(int(win_id))
                    fh.write(f"ok,{win_id}\n")
                else:
                    fh.write("err,badfocus\n")
                fh.flush()
                return
            done = queue.SimpleQueue()
            self._send_spawn(line, done.put)
            try:
                response = done.get(timeout=SLAVE_TIMEOUT)
            except queue.Empty:
                response = "err,timeout"
            fh.write(response + "\n")
            fh.flush()
        except (OSError, ValueError):
            pass
        finally:
            try:
                fh.close()
            except OSError:
                pass
            sock.close()

    # -- lifecycle ----------------------------------------------------------

    def stop(self) -> None:
        self._stopping.set()
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        if self._conn is not None:
            self._conn.abort()
        if self._log_fh:
            self._log_fh.close()
            self._log_fh = None

    def __enter__(self) -> MasterClient:
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def run_slave(
    command: str,
    master_socket: tuple[str, int] = DEFAULT_MASTER_SOCKET,
    timeout: float = SLAVE_TIMEOUT,
) -> tuple[int, str]:
    """One-shot slave: hand the command to the running master.

    Returns (exit_status, response_line): 0 with `ok,<win_id>` on success,
    1 with the error line otherwise.
    """
    if not command.strip():
        raise ValueError("empty command")
    try:
        sock = socket.create_connection(master_socket, timeout=timeout)
    except ConnectionRefusedError:
        raise NoMasterError(f"no master listening on {master_socket}") from None
    except OSError as exc:
        raise NoMasterError(f"cannot reach master on {master_socket}: {exc}") from None
    try:
        sock.settimeout(timeout)
        fh = sock.makefile("rw", encoding="utf-8", newline="\n")
        fh.write(command.strip() + "\n")
        fh.flush()
        try:
            response = fh.readline().strip()
        except socket.timeout:
            raise SlaveTimeoutError("master did not answer") from None
        if not response:
            raise SlaveTimeoutError("master closed without answering")
        return (0 if response.startswith("ok,") else 1), response
    finally:
        sock.close()


def connect_from_directive(
    directive: ConnectDirective,
    broker_port: int = DEFAULT_BROKER_PORT,
    master_socket: tuple[str, int] = DEFAULT_MASTER_SOCKET,
    log_path: str | Path | None = None,
) -> tuple[MasterClient | None, int]:
    """Act on a discovery result: spawn the offered app on the offering host.

    Starts a master against the host's broker and issues the initial
    spawn; when a master already owns the local master socket, the spawn
    is handed to it slave-style instead (no second broker session).
    Returns (master_or_None, win_id).
    """
    try:
        master = MasterClient(
            (directive.host_ip, broker_port), master_socket, log_path
        ).start()
    except MasterSocketInUseError:
        status, response = run_slave(directive.full_path, master_socket)
        if status != 0:
            raise RuntimeError(f"spawn via existing master failed: {response}")
        return None, int(response.split(",", 1)[1])
    try:
        win_id = master.spawn(directive.full_path)
    except Exception:
        master.stop()
        raise
    return master, win_id
