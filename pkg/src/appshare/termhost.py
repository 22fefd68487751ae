"""Deterministic terminal-host mock.

Stands in for the real terminal server plus its in-session spawn
endpoint: accepts upstream session(s), "runs" commands by creating echo
windows, tracks the focused window, and answers every input with exactly
one display update. Windows produce no spontaneous output, so the update
stream is a pure function of the frame sequence and replays are
byte-identical.

In brokered mode the host enforces the single-login rule: one live
session, a second Hello is refused. In direct mode each connection is an
independent session with its own focus.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from appshare.wire.frames import (
    CHANNEL_CONTROL,
    CHANNEL_GLOBAL,
    CONNECTION_BUFFER_BYTES,
    FIRST_SEAMLESS_CHANNEL,
    FNV64_OFFSET,
    Opcode,
    StreamFrame,
    fnv1a64,
)

BROKERED = "brokered"
DIRECT = "direct"

# Retained-memory proxy for one window: fixed record overhead plus the
# command string it keeps.
WINDOW_RECORD_OVERHEAD = 64


@dataclass
class WindowRecord:
    win_id: int
    command: str
    update_seq: int = 0
    state_hash: int = FNV64_OFFSET

    def retained_bytes(self) -> int:
        return WINDOW_RECORD_OVERHEAD + len(self.command.encode())


@dataclass
class HostSession:
    host_session_id: int
    seamless_channel: int
    focused_window: int | None = None
    window_ids: set[int] = field(default_factory=set)
    buffer_bytes: int = CONNECTION_BUFFER_BYTES


class SessionRefused(Exception):
    """Single-login limit hit; transport must close after sending the frame."""

    def __init__(self, frame: StreamFrame):
        super().__init__(frame.text())
        self.frame = frame


class HostCore:
    def __init__(self, mode: str = BROKERED):
        if mode not in (BROKERED, DIRECT):
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        self.sessions: dict[int, HostSession] = {}
        self.windows: dict[int, WindowRecord] = {}
        self.inputs_applied = 0
        self._next_session_id = 1
        self._next_win_id = 1

    # -- session lifecycle -------------------------------------------------

    def session_hello(self, frame: StreamFrame) -> tuple[HostSession, StreamFrame]:
        """Admit one upstream session; Welcome carries `session_id,channel`.

        Raises SessionRefused (with the Bye frame to send) when a brokered
        host already has its one session.
        """
        if frame.opcode != Opcode.HELLO:
            raise SessionRefused(
                StreamFrame(CHANNEL_CONTROL, Opcode.BYE, b"err,protocol")
            )
        if self.mode == BROKERED and self.sessions:
            raise SessionRefused(
                StreamFrame(CHANNEL_CONTROL, Opcode.BYE, b"err,sessionlimit")
            )
        hsid = self._next_session_id
        self._next_session_id += 1
        session = HostSession(
            host_session_id=hsid,
            seamless_channel=self._alloc_channel(),
        )
        self.sessions[hsid] = session
        assert self.mode != BROKERED or len(self.sessions) == 1
        welcome = StreamFrame(
            CHANNEL_CONTROL, Opcode.WELCOME, f"{hsid},{session.seamless_channel}".encode()
        )
        return session, welcome

    def _alloc_channel(self) -> int:
        used = {s.seamless_channel for s in self.sessions.values()}
        channel = FIRST_SEAMLESS_CHANNEL
        while channel in used:
            channel += 1
        return channel

    def session_gone(self, host_session_id: int) -> None:
        """Drop a session and its windows; a brokered host can then accept
        a fresh one."""
        session = self.sessions.pop(host_session_id, None)
        if session is None:
            return
        for win_id in session.window_ids:
            self.windows.pop(win_id, None)

    @property
    def server_focused(self) -> int | None:
        """The single focused window of a brokered host (None when idle)."""
        for session in self.sessions.values():
            return session.focused_window
        return None

    # -- frame processing ---------------------------------------------------

    def handle_frame(self, host_session_id: int, frame: StreamFrame) -> list[StreamFrame]:
        session = self.sessions.get(host_session_id)
        if session is None:
            return []
        op = frame.opcode
        if op == Opcode.SPAWN:
            return [self._spawn(session, frame)]
        if op == Opcode.FOCUS:
            return self._set_focus(session, frame)
        if op == Opcode.INPUT:
            return [self._apply_input(session, frame)]
        if op == Opcode.BYE:
            self.session_gone(host_session_id)
            return []
        return []

    def _spawn(self, session: HostSession, frame: StreamFrame) -> StreamFrame:
        body = frame.text()
        command = body.split(",", 1)[1] if "," in body else ""
        if not command:
            return StreamFrame(session.seamless_channel, Opcode.SPAWN_ACK, b"err,emptycommand")
        win_id = self._next_win_id
        self._next_win_id += 1
        self.windows[win_id] = WindowRecord(win_id, command)
        session.window_ids.add(win_id)
        # a freshly spawned window grabs focus, like a desktop would
        session.focused_window = win_id
        return StreamFrame(
            session.seamless_channel, Opcode.SPAWN_ACK, f"ack,{win_id},{command}".encode()
        )

    def _set_focus(self, session: HostSession, frame: StreamFrame) -> list[StreamFrame]:
        parts = frame.text().split(",", 2)
        if len(parts) != 3 or parts[0] != "focus" or not parts[1].isdigit():
            return [StreamFrame(session.seamless_channel, Opcode.FOCUS, b"err,badfocus")]
        win_id = int(parts[1])
        if win_id not in session.window_ids:
            return [
                StreamFrame(
                    session.seamless_channel,
                    Opcode.FOCUS,
                    f"err,unknownwindow,{win_id}".encode(),
                )
            ]
        session.focused_window = win_id  # flags are opaque and ignored
        return []

    def _apply_input(self, session: HostSession, frame: StreamFrame) -> StreamFrame:
        if session.focused_window is None:
            return StreamFrame(CHANNEL_GLOBAL, Opcode.UPDATE, b"err,nofocus")
        window = self.windows[session.focused_window]
        window.update_seq += 1
        window.state_hash = fnv1a64(frame.body, window.state_hash)
        self.inputs_applied += 1
        body = f"upd,{window.win_id},{window.update_seq},{frame.body.hex()}"
        return StreamFrame(CHANNEL_GLOBAL, Opcode.UPDATE, body.encode())

    # -- observability -------------------------------------------------------

    def retained_bytes(self) -> int:
        """Memory proxy: per-session connection buffers plus window records."""
        total = sum(s.buffer_bytes for s in self.sessions.values())
        total += sum(w.retained_bytes() for w in self.windows.values())
        return total

    def set_session_buffer(self, host_session_id: int, nbytes: int) -> None:
        session = self.sessions.get(host_session_id)
        if session is not None:
            session.buffer_bytes = nbytes
