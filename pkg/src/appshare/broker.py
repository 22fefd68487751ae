"""Session broker core: many client sessions, one upstream terminal session.

This is the state machine only (no sockets). The transport layer in
appshare.net and the simulation driver in appshare.sim both drive it
through the same calls:

    negotiate(...)       Hello -> Welcome, session registered
    client_frame(...)    one frame from a client
    upstream_frame(...)  one frame from the terminal host
    tick(now)            advance the time slice when due
    client_gone(...)     unregister a session

Every call returns Effects: frames to write and connections to close.
All calls must be serialized by the owner; the core never locks.

Modes:
    brokered  one upstream session shared by all clients; their input is
              time-sliced onto it in round-robin order, and each slice
              opens with the allocated client's focused-window frame.
    direct    one upstream session per client, frames forwarded as they
              arrive; emulates the ancestor design the load harness
              compares against.

Scheduling detail: a slice begins by flushing the allocated session's
focus and queued input; input arriving from the allocated session during
its own slice is forwarded immediately (only the allocated client may
transmit, so there is nothing to wait for). Spawn frames bypass slicing
entirely, otherwise a client could never open its first window without
already holding focus.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum

from appshare.errors import ProtocolViolationError
from appshare.scheduler import RoundRobinScheduler
from appshare.wire.frames import (
    CHANNEL_CONTROL,
    CHANNEL_GLOBAL,
    CONNECTION_BUFFER_BYTES,
    FIRST_SEAMLESS_CHANNEL,
    Opcode,
    StreamFrame,
)

MAX_INPUT_PAYLOAD = 4096
DEFAULT_INPUT_QUEUE_CAP = 10_000
DEFAULT_QUANTUM = 0.050

BROKERED = "brokered"
DIRECT = "direct"


class EventKind(Enum):
    KEY = "key"
    POINTER = "pointer"


@dataclass
class InputEvent:
    payload: bytes
    enqueued_at: float
    kind: EventKind = EventKind.KEY


@dataclass
class ClientSession:
    session_id: int
    addr: str
    channel_id: int
    focused_window: int | None = None
    focus_flags: str = "0"
    owned_windows: set[int] = field(default_factory=set)
    input_queue: deque[InputEvent] = field(default_factory=deque)
    queued_bytes: int = 0          # current queue occupancy
    bytes_queued: int = 0          # cumulative counter
    buffer_bytes: int = CONNECTION_BUFFER_BYTES
    upstream_id: int | None = None  # direct mode only


@dataclass
class UpstreamLink:
    upstream_id: int
    seamless_channel: int
    owner_session: int | None = None  # None = shared (brokered)
    buffer_bytes: int = CONNECTION_BUFFER_BYTES
    pending_spawns: deque[int] = field(default_factory=deque)


@dataclass
class Effects:
    """Transport work produced by one core step."""

    to_client: list[tuple[int, StreamFrame]] = field(default_factory=list)
    to_upstream: list[tuple[int, StreamFrame]] = field(default_factory=list)
    close_client: list[tuple[int, str]] = field(default_factory=list)
    alloc_changed: list[int] = field(default_factory=list)

    def extend(self, other: Effects) -> None:
        self.to_client.extend(other.to_client)
        self.to_upstream.extend(other.to_upstream)
        self.close_client.extend(other.close_client)
        self.alloc_changed.extend(other.alloc_changed)


@dataclass
class MetricsSnapshot:
    mode: str
    n_sessions: int
    n_upstream_sessions: int
    total_bytes_queued: int
    per_session_bytes: list[int]
    rtt_samples_ms: list[float]
    upstream_buffer_bytes: int = 0
    updates_dropped: int = 0
    frames_discarded: int = 0


def _err_frame(channel: int, opcode: Opcode, reason: str) -> StreamFrame:
    return StreamFrame(channel, opcode, f"err,{reason}".encode())


class BrokerCore:
    def __init__(
        self,
        mode: str = BROKERED,
        quantum: float = DEFAULT_QUANTUM,
        input_queue_cap: int = DEFAULT_INPUT_QUEUE_CAP,
        max_sessions: int | None = None,
    ):
        if mode not in (BROKERED, DIRECT):
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        self.quantum = quantum
        self.input_queue_cap = input_queue_cap
        self.max_sessions = max_sessions
        self.sessions: dict[int, ClientSession] = {}
        self.upstreams: dict[int, UpstreamLink] = {}
        self.scheduler = RoundRobinScheduler(quantum)
        self.updates_dropped = 0
        self.frames_discarded = 0
        self._next_session_id = 1

    # -- wiring ----------------------------------------------------------

    def attach_upstream(
        self, upstream_id: int, seamless_channel: int, owner_session: int | None = None
    ) -> None:
        """Record an established upstream session (transport already
        negotiated it with the host)."""
        self.upstreams[upstream_id] = UpstreamLink(
            upstream_id, seamless_channel, owner_session
        )

    def upstream_session_count(self) -> int:
        return len(self.upstreams)

    def negotiate(
        self,
        first_frame: StreamFrame,
        now: float,
        addr: str = "",
        upstream_id: int | None = None,
    ) -> tuple[ClientSession, Effects]:
        """Turn a Hello into a registered session and a Welcome.

        In direct mode the transport opens the per-client upstream first
        and passes its id here. Raises ProtocolViolationError when the
        first frame is not a Hello (connection must be closed, nothing is
        registered).
        """
        if first_frame.opcode != Opcode.HELLO:
            raise ProtocolViolationError(
                f"first frame was {first_frame.opcode.name}, expected HELLO"
            )
        if self.max_sessions is not None and len(self.sessions) >= self.max_sessions:
            raise ProtocolViolationError("session limit reached")
        if self.mode == DIRECT and upstream_id is None:
            raise ValueError("direct mode requires an upstream per session")
        sid = self._next_session_id
        self._next_session_id += 1
        session = ClientSession(
            session_id=sid, addr=addr, channel_id=self._alloc_channel()
        )
        session.upstream_id = upstream_id if self.mode == DIRECT else None
        self.sessions[sid] = session
        if self.mode == BROKERED:
            self.scheduler.add(sid)
        elif upstream_id in self.upstreams:
            self.upstreams[upstream_id].owner_session = sid
        effects = Effects()
        welcome = StreamFrame(
            CHANNEL_CONTROL, Opcode.WELCOME, f"{sid},{session.channel_id}".encode()
        )
        effects.to_client.append((sid, welcome))
        return session, effects

    def _alloc_channel(self) -> int:
        used = {s.channel_id for s in self.sessions.values()}
        channel = FIRST_SEAMLESS_CHANNEL
        while channel in used:
            channel += 1
        if channel > 255:
            raise ProtocolViolationError("seamless channel space exhausted")
        return channel

    def client_gone(self, session_id: int, now: float) -> Effects:
        """Unregister a departed session; its windows die with it."""
        effects = Effects()
        session = self.sessions.pop(session_id, None)
        if session is None:
            return effects
        if self.mode == BROKERED:
            self.scheduler.remove(session_id)
            link = self._shared_upstream()
            if link is not None:
                link.pending_spawns = deque(
                    sid for sid in link.pending_spawns if sid != session_id
                )
        elif session.upstream_id is not None:
            self.upstreams.pop(session.upstream_id, None)
        return effects

    # -- client-to-broker ------------------------------------------------

    def client_frame(self, session_id: int, frame: StreamFrame, now: float) -> Effects:
        effects = Effects()
        session = self.sessions.get(session_id)
        if session is None:
            return effects
        op = frame.opcode
        if op == Opcode.INPUT:
            self._on_input(session, frame, now, effects)
        elif op == Opcode.FOCUS:
            self._on_focus(session, frame, effects)
        elif op == Opcode.SPAWN:
            self._on_spawn(session, frame, effects)
        elif op == Opcode.BYE:
            effects.close_client.append((session_id, "bye"))
        else:
            self.frames_discarded += 1
        return effects

    def _on_input(
        self, session: ClientSession, frame: StreamFrame, now: float, effects: Effects
    ) -> None:
        if frame.channel_id != CHANNEL_GLOBAL:
            self.frames_discarded += 1
            effects.to_client.append(
                (session.session_id, _err_frame(frame.channel_id, Opcode.INPUT, "badchannel"))
            )
            return
        if len(frame.body) > MAX_INPUT_PAYLOAD:
            self.frames_discarded += 1
            effects.to_client.append(
                (session.session_id, _err_frame(CHANNEL_GLOBAL, Opcode.INPUT, "toolarge"))
            )
            return
        if len(session.input_queue) >= self.input_queue_cap:
            effects.to_client.append(
                (session.session_id, _err_frame(CHANNEL_CONTROL, Opcode.BYE, "queueoverflow"))
            )
            effects.close_client.append((session.session_id, "queueoverflow"))
            return
        session.input_queue.append(InputEvent(frame.body, enqueued_at=now))
        session.queued_bytes += len(frame.body)
        session.bytes_queued += len(frame.body)
        if self.mode == DIRECT:
            self._drain_input(session, effects)
        elif self.scheduler.allocated == session.session_id:
            # Allocated client is the one allowed to transmit right now;
            # forward within its own slice instead of waiting a rotation.
            self._drain_input(session, effects)

    def _on_focus(self, session: ClientSession, frame: StreamFrame, effects: Effects) -> None:
        sid = session.session_id
        if frame.channel_id != session.channel_id:
            self.frames_discarded += 1
            effects.to_client.append((sid, _err_frame(frame.channel_id, Opcode.FOCUS, "badchannel")))
            return
        parts = frame.text().split(",", 2)
        if len(parts) != 3 or parts[0] != "focus" or not parts[1].isdigit():
            self.frames_discarded += 1
            effects.to_client.append((sid, _err_frame(session.channel_id, Opcode.FOCUS, "badfocus")))
            return
        win_id, flags = int(parts[1]), parts[2]
        if win_id not in session.owned_windows:
            effects.to_client.append(
                (sid, _err_frame(session.channel_id, Opcode.FOCUS, f"notyourwindow,{win_id}"))
            )
            return
        session.focused_window = win_id
        session.focus_flags = flags
        if self.mode == DIRECT:
            link = self.upstreams.get(session.upstream_id)
            if link is not None:
                effects.to_upstream.append((link.upstream_id, self._focus_frame(session, link)))
        # Brokered: the new focus reaches the host at the session's next
        # slice; mid-slice focus changes are not replayed upstream.

    def _on_spawn(self, session: ClientSession, frame: StreamFrame, effects: Effects) -> None:
        sid = session.session_id
        if frame.channel_id != session.channel_id:
            self.frames_discarded += 1
            effects.to_client.append((sid, _err_frame(frame.channel_id, Opcode.SPAWN, "badchannel")))
            return
        body = frame.text()
        if not body.startswith("spawn,"):
            self.frames_discarded += 1
            effects.to_client.append((sid, _err_frame(session.channel_id, Opcode.SPAWN, "badspawn")))
            return
        link = self._upstream_for(session)
        if link is None:
            effects.to_client.append((sid, _err_frame(session.channel_id, Opcode.SPAWN, "noupstream")))
            return
        link.pending_spawns.append(sid)
        effects.to_upstream.append(
            (link.upstream_id, StreamFrame(link.seamless_channel, Opcode.SPAWN, frame.body))
        )

    def _upstream_for(self, session: ClientSession) -> UpstreamLink | None:
        if self.mode == DIRECT:
            return self.upstreams.get(session.upstream_id)
        return self._shared_upstream()

    def _shared_upstream(self) -> UpstreamLink | None:
        for link in self.upstreams.values():
            return link
        return None

    def _focus_frame(self, session: ClientSession, link: UpstreamLink) -> StreamFrame:
        body = f"focus,{session.focused_window},{session.focus_flags}".encode()
        return StreamFrame(link.seamless_channel, Opcode.FOCUS, body)

    def _drain_input(self, session: ClientSession, effects: Effects) -> None:
        link = self._upstream_for(session)
        if link is None:
            return
        while session.input_queue:
            event = session.input_queue.popleft()
            session.queued_bytes -= len(event.payload)
            effects.to_upstream.append(
                (link.upstream_id, StreamFrame(CHANNEL_GLOBAL, Opcode.INPUT, event.payload))
            )

    # -- scheduling ------------------------------------------------------

    def tick(self, now: float) -> Effects:
        """Advance the round-robin allocation when the slice expired.

        The new slice opens with the session's focused-window frame (when
        it has one) followed by its queued input in FIFO order.
        """
        effects = Effects()
        if self.mode != BROKERED or not self.scheduler.due(now):
            return effects
        sid = self.scheduler.advance(now)
        if sid is None:
            return effects
        effects.alloc_changed.append(sid)
        session = self.sessions[sid]
        link = self._shared_upstream()
        if link is None:
            return effects
        if session.focused_window is not None:
            effects.to_upstream.append((link.upstream_id, self._focus_frame(session, link)))
        self._drain_input(session, effects)
        return effects

    def next_deadline(self) -> float | None:
        """When tick() next needs to run; None when nothing is scheduled."""
        if self.mode != BROKERED or not len(self.scheduler):
            return None
        if self.scheduler.allocated is None:
            return 0.0
        return self.scheduler.slice_deadline

    # -- host-to-broker --------------------------------------------------

    def upstream_frame(self, upstream_id: int, frame: StreamFrame, now: float) -> Effects:
        effects = Effects()
        link = self.upstreams.get(upstream_id)
        if link is None:
            self.frames_discarded += 1
            return effects
        op = frame.opcode
        if op == Opcode.SPAWN_ACK:
            self._on_spawn_ack(link, frame, effects)
        elif op == Opcode.UPDATE:
            self._route_update(link, frame, effects)
        elif op == Opcode.BYE:
            self.upstreams.pop(upstream_id, None)
        else:
            self.frames_discarded += 1
        return effects

    def _on_spawn_ack(self, link: UpstreamLink, frame: StreamFrame, effects: Effects) -> None:
        if not link.pending_spawns:
            self.frames_discarded += 1
            return
        sid = link.pending_spawns.popleft()
        session = self.sessions.get(sid)
        if session is None:
            return  # spawner left while the spawn was in flight
        parts = frame.text().split(",")
        if parts[0] == "ack" and len(parts) >= 3 and parts[1].isdigit():
            win_id = int(parts[1])
            session.owned_windows.add(win_id)
            if session.focused_window is None:
                session.focused_window = win_id
        effects.to_client.append((sid, StreamFrame(session.channel_id, Opcode.SPAWN_ACK, frame.body)))

    def _route_update(self, link: UpstreamLink, frame: StreamFrame, effects: Effects) -> None:
        if self.mode == DIRECT:
            target = link.owner_session
        else:
            target = self.scheduler.allocated
        if target is None or target not in self.sessions:
            self.updates_dropped += 1
            return
        effects.to_client.append((target, StreamFrame(CHANNEL_GLOBAL, Opcode.UPDATE, frame.body)))

    # -- observability ---------------------------------------------------

    def set_session_buffer(self, session_id: int, nbytes: int) -> None:
        session = self.sessions.get(session_id)
        if session is not None:
            session.buffer_bytes = nbytes

    def set_upstream_buffer(self, upstream_id: int, nbytes: int) -> None:
        link = self.upstreams.get(upstream_id)
        if link is not None:
            link.buffer_bytes = nbytes

    def metrics(self) -> MetricsSnapshot:
        per_session = [
            s.buffer_bytes + s.queued_bytes for s in self.sessions.values()
        ]
        return MetricsSnapshot(
            mode=self.mode,
            n_sessions=len(self.sessions),
            n_upstream_sessions=len(self.upstreams),
            total_bytes_queued=sum(per_session),
            per_session_bytes=per_session,
            rtt_samples_ms=[],
            upstream_buffer_bytes=sum(u.buffer_bytes for u in self.upstreams.values()),
            updates_dropped=self.updates_dropped,
            frames_discarded=self.frames_discarded,
        )
