"""Virtual-clock simulation of broker + terminal host + scripted clients.

Everything runs in one thread against the pure cores with an injected
clock and zero network latency, so a schedule of client actions replays
to byte-identical upstream transcripts and session logs. The transcript
records every broker-to-host frame plus allocation changes, which is what
the slice-ordering validator checks.

Used by the fairness/latency harness, the determinism tests and the
acceptance suite; the socket transport in appshare.net drives the same
cores for live traffic.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from appshare.broker import BROKERED, BrokerCore, DIRECT
from appshare.termhost import HostCore
from appshare.wire.frames import (
    CHANNEL_CONTROL,
    CHANNEL_GLOBAL,
    Opcode,
    StreamFrame,
    encode_frame,
)


@dataclass
class SimClient:
    index: int
    session_id: int
    channel_id: int
    windows: list[int] = field(default_factory=list)
    log: list[str] = field(default_factory=list)
    outstanding: deque[float] = field(default_factory=deque)
    rtt: list[float] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)

    @property
    def first_window(self) -> int:
        return self.windows[0]


class SimWorld:
    """One broker and one host on a shared virtual clock."""

    def __init__(self, mode: str = BROKERED, quantum: float = 0.050,
                 input_queue_cap: int = 10_000):
        self.mode = mode
        self.quantum = quantum
        self.clock = 0.0
        self.host = HostCore(mode)
        self.broker = BrokerCore(mode, quantum, input_queue_cap=input_queue_cap)
        self.clients: list[SimClient] = []
        # ("alloc", session_id, focused_window) and ("frame", StreamFrame, bytes)
        self.transcript: list[tuple] = []
        self._session_to_client: dict[int, SimClient] = {}
        self._upstream_to_host: dict[int, int] = {}
        self._alloc_counts: dict[int, int] = {}
        if mode == BROKERED:
            self._open_upstream(0)

    def _open_upstream(self, upstream_id: int, owner_session: int | None = None) -> None:
        host_session, _welcome = self.host.session_hello(
            StreamFrame(CHANNEL_CONTROL, Opcode.HELLO, b"")
        )
        self._upstream_to_host[upstream_id] = host_session.host_session_id
        self.broker.attach_upstream(
            upstream_id, host_session.seamless_channel, owner_session
        )

    # -- clients ----------------------------------------------------------

    def add_client(self) -> SimClient:
        upstream_id = None
        if self.mode == DIRECT:
            upstream_id = 1000 + len(self.clients)
            self._open_upstream(upstream_id)
        session, effects = self.broker.negotiate(
            StreamFrame(CHANNEL_CONTROL, Opcode.HELLO, b""),
            self.clock,
            addr=f"sim-{len(self.clients)}",
            upstream_id=upstream_id,
        )
        client = SimClient(len(self.clients), session.session_id, session.channel_id)
        self.clients.append(client)
        self._session_to_client[session.session_id] = client
        self._alloc_counts[session.session_id] = 0
        self._route(effects)
        return client

    def remove_client(self, client: SimClient) -> None:
        self._route(self.broker.client_gone(client.session_id, self.clock))
        self._session_to_client.pop(client.session_id, None)

    # -- actions ----------------------------------------------------------

    def spawn(self, client: SimClient, command: str) -> None:
        frame = StreamFrame(client.channel_id, Opcode.SPAWN, f"spawn,{command}".encode())
        self._route(self.broker.client_frame(client.session_id, frame, self.clock))

    def focus(self, client: SimClient, win_id: int, flags: str = "0") -> None:
        frame = StreamFrame(
            client.channel_id, Opcode.FOCUS, f"focus,{win_id},{flags}".encode()
        )
        self._route(self.broker.client_frame(client.session_id, frame, self.clock))

    def send_input(self, client: SimClient, payload: bytes) -> None:
        client.outstanding.append(self.clock)
        frame = StreamFrame(CHANNEL_GLOBAL, Opcode.INPUT, payload)
        self._route(self.broker.client_frame(client.session_id, frame, self.clock))

    # -- time -------------------------------------------------------------

    def _next_due(self) -> float | None:
        deadline = self.broker.next_deadline()
        if deadline is None:
            return None
        return max(deadline, self.clock)

    def advance_to(self, t: float) -> None:
        """Run the clock (and any due slice changes) forward to time t."""
        while True:
            due = self._next_due()
            if due is None or due > t:
                break
            self.clock = due
            self._route(self.broker.tick(self.clock))
        self.clock = max(self.clock, t)

    def step_slices(self, count: int) -> None:
        """Advance exactly `count` allocation changes."""
        done = 0
        while done < count:
            due = self._next_due()
            if due is None:
                raise RuntimeError("no sessions registered, scheduler idle")
            self.clock = due
            effects = self.broker.tick(self.clock)
            done += len(effects.alloc_changed)
            self._route(effects)

    def drain(self, rotations: int = 2) -> None:
        """Let every session flush: run a few full rotations."""
        if self.broker.mode == BROKERED and self.clients:
            self.step_slices(rotations * len(self.clients))

    # -- plumbing ----------------------------------------------------------

    def _route(self, effects) -> None:
        for sid in effects.alloc_changed:
            self._alloc_counts[sid] = self._alloc_counts.get(sid, 0) + 1
            session = self.broker.sessions.get(sid)
            focused = session.focused_window if session else None
            self.transcript.append(("alloc", sid, focused))
        for upstream_id, frame in effects.to_upstream:
            self.transcript.append(("frame", frame, encode_frame(frame)))
            host_sid = self._upstream_to_host[upstream_id]
            for reply in self.host.handle_frame(host_sid, frame):
                self._route(self.broker.upstream_frame(upstream_id, reply, self.clock))
        for sid, frame in effects.to_client:
            self._deliver(sid, frame)
        for sid, _reason in effects.close_client:
            self._route(self.broker.client_gone(sid, self.clock))

    def _deliver(self, session_id: int, frame: StreamFrame) -> None:
        client = self._session_to_client.get(session_id)
        if client is None:
            return
        body = frame.text()
        if frame.opcode == Opcode.UPDATE:
            client.log.append(body)
            if client.outstanding:
                client.rtt.append(self.clock - client.outstanding.popleft())
        elif frame.opcode == Opcode.SPAWN_ACK:
            parts = body.split(",")
            if parts[0] == "ack":
                client.windows.append(int(parts[1]))
            else:
                client.errors.append(body)
        elif body.startswith("err,"):
            client.errors.append(body)

    # -- results ------------------------------------------------------------

    def allocation_counts(self) -> dict[int, int]:
        return dict(self._alloc_counts)

    def upstream_bytes(self) -> bytes:
        return b"".join(entry[2] for entry in self.transcript if entry[0] == "frame")

    def session_log_bytes(self) -> dict[int, bytes]:
        return {
            c.index: ("\n".join(c.log) + "\n").encode() if c.log else b""
            for c in self.clients
        }


# -- scripted schedules ----------------------------------------------------


@dataclass(frozen=True)
class ScheduledEvent:
    at: float
    client: int
    action: str  # spawn | focus | input
    arg: str


def run_schedule(
    mode: str,
    quantum: float,
    n_clients: int,
    events: list[ScheduledEvent],
    settle_rotations: int = 3,
) -> SimWorld:
    """Replay a recorded schedule and flush the queues afterwards."""
    world = SimWorld(mode, quantum)
    for _ in range(n_clients):
        world.add_client()
    for event in sorted(events, key=lambda e: (e.at, e.client)):
        world.advance_to(event.at)
        client = world.clients[event.client]
        if event.action == "spawn":
            world.spawn(client, event.arg)
        elif event.action == "focus":
            world.focus(client, int(event.arg))
        elif event.action == "input":
            world.send_input(client, event.arg.encode())
        else:
            raise ValueError(f"unknown action {event.action!r}")
    if world.broker.mode == BROKERED and world.clients:
        world.step_slices(settle_rotations * len(world.clients))
    return world


# -- slice-ordering validator ------------------------------------------------


def validate_slice_ordering(
    transcript: list[tuple],
    sent_inputs: dict[int, list[bytes]],
    require_all_delivered: bool = True,
) -> None:
    """Check the broker-to-host transcript against the slicing contract:

    every allocation burst opens with a Focus frame for the session's
    focused window when it had one, followed by that session's input in
    FIFO order; spawn frames are exempt (they bypass the scheduler).

    Raises AssertionError with a description on the first violation.
    """
    expected = {sid: deque(payloads) for sid, payloads in sent_inputs.items()}
    current: int | None = None
    focus_expected: int | None = None
    focus_seen = False
    for pos, entry in enumerate(transcript):
        if entry[0] == "alloc":
            _, current, focused = entry
            focus_expected = focused
            focus_seen = False
            continue
        frame: StreamFrame = entry[1]
        if frame.opcode == Opcode.SPAWN:
            continue
        if current is None:
            raise AssertionError(f"frame {pos} before any allocation: {frame}")
        if frame.opcode == Opcode.FOCUS:
            if focus_seen:
                raise AssertionError(f"second focus frame in one burst at {pos}")
            if focus_expected is None:
                raise AssertionError(f"focus frame for focusless session at {pos}")
            want = f"focus,{focus_expected},"
            if not frame.text().startswith(want):
                raise AssertionError(
                    f"burst focus mismatch at {pos}: {frame.text()!r} != {want!r}..."
                )
            focus_seen = True
            continue
        if frame.opcode == Opcode.INPUT:
            if focus_expected is not None and not focus_seen:
                raise AssertionError(f"input before burst focus frame at {pos}")
            queue = expected.get(current)
            if not queue:
                raise AssertionError(f"unexpected input for session {current} at {pos}")
            want_payload = queue.popleft()
            if frame.body != want_payload:
                raise AssertionError(
                    f"FIFO order broken for session {current} at {pos}: "
                    f"{frame.body!r} != {want_payload!r}"
                )
            continue
        raise AssertionError(f"unexpected opcode {frame.opcode.name} upstream at {pos}")
    if require_all_delivered:
        leftovers = {sid: len(q) for sid, q in expected.items() if q}
        if leftovers:
            raise AssertionError(f"inputs never forwarded: {leftovers}")
