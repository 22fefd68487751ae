"""Cluster discovery state: the three dedup sets and datagram processing.

A peer tracks three uniqueness-keyed sets:

    queries   my outstanding application requests, keyed by app_name
    replies   offers addressed to me, keyed by (responder_ip, app_name)
    pending   requests from other peers awaiting local conditions,
              keyed by (requester_ip, app_name)

plus a roster of live peers refreshed by heartbeats. The state machine is
pure: callers inject `now` and transport the datagrams it returns, which
keeps every scenario replayable under a fake clock. All mutating calls
must be serialized by the owner (the membership layer holds one lock).

Allocation is first-response-wins: the first reply matching a live query
removes the query and yields a ConnectDirective; later replies are stored
for observability but trigger nothing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from appshare.apppool import AppPool
from appshare.config import PeerConfig
from appshare.wire.datagrams import (
    ClusterDatagram,
    Heartbeat,
    Leave,
    Query,
    Reply,
)

# Peers missing this many consecutive heartbeats drop off the roster.
MISSED_HEARTBEATS_LIMIT = 3


@dataclass(frozen=True)
class ConnectDirective:
    """Everything the requester needs to open a session on the chosen host."""

    host_ip: str
    app_name: str
    full_path: str
    username: str


@dataclass
class QueryRecord:
    app_name: str
    issued_at: float
    last_broadcast: float | None = None


@dataclass(frozen=True)
class ReplyRecord:
    responder_ip: str
    requester_ip: str
    app_name: str
    full_path: str
    username: str
    received_at: float


@dataclass(frozen=True)
class PendingRequest:
    requester_ip: str
    app_name: str
    received_at: float


@dataclass
class ClusterStats:
    datagrams_in: int = 0
    ignored_self: int = 0
    ignored_unknown_responder: int = 0
    duplicate_queries: int = 0
    duplicate_replies: int = 0
    query_timeouts: int = 0
    peers_dropped: int = 0


@dataclass
class ClusterState:
    cfg: PeerConfig
    queries: dict[str, QueryRecord] = field(default_factory=dict)
    replies: dict[tuple[str, str], ReplyRecord] = field(default_factory=dict)
    pending: dict[tuple[str, str], PendingRequest] = field(default_factory=dict)
    roster: dict[str, float] = field(default_factory=dict)
    stats: ClusterStats = field(default_factory=ClusterStats)
    _last_heartbeat: float | None = None

    # -- outbound --------------------------------------------------------

    def submit_query(self, app_name: str, now: float) -> bool:
        """Register a request for app_name; False if one is already live."""
        if not app_name:
            raise ValueError("app_name is empty")
        if app_name in self.queries:
            return False
        self.queries[app_name] = QueryRecord(app_name, issued_at=now)
        return True

    def tick_sender(self, now: float) -> list[ClusterDatagram]:
        """Datagrams due at `now`: heartbeat plus per-query rebroadcasts.

        Also expires timed-out queries, stale replies, stale pending
        requests and silent peers.
        """
        out: list[ClusterDatagram] = []
        if (
            self._last_heartbeat is None
            or now - self._last_heartbeat >= self.cfg.heartbeat_period
        ):
            out.append(Heartbeat(self.cfg.peer_id))
            self._last_heartbeat = now

        for app_name in [
            a
            for a, q in self.queries.items()
            if now - q.issued_at >= self.cfg.request_timeout
        ]:
            del self.queries[app_name]
            self.stats.query_timeouts += 1

        for record in self.queries.values():
            if (
                record.last_broadcast is None
                or now - record.last_broadcast >= self.cfg.query_rebroadcast_period
            ):
                out.append(Query(record.app_name))
                record.last_broadcast = now

        timeout = self.cfg.request_timeout
        self.pending = {
            k: p for k, p in self.pending.items() if now - p.received_at < timeout
        }
        self.replies = {
            k: r for k, r in self.replies.items() if now - r.received_at < timeout
        }

        dead = now - MISSED_HEARTBEATS_LIMIT * self.cfg.heartbeat_period
        for peer_id in [p for p, seen in self.roster.items() if seen <= dead]:
            del self.roster[peer_id]
            self.stats.peers_dropped += 1
        return out

    # -- inbound ---------------------------------------------------------

    def handle_datagram(
        self, src_ip: str, d: ClusterDatagram, now: float
    ) -> list[ConnectDirective]:
        """Process one decoded datagram; returns any connect directives."""
        self.stats.datagrams_in += 1
        if src_ip == self.cfg.peer_id:
            self.stats.ignored_self += 1
            return []

        if isinstance(d, Heartbeat):
            if d.peer_id != self.cfg.peer_id:  # own heartbeat looped back
                self.roster[d.peer_id] = now
            return []
        if isinstance(d, Leave):
            self.roster.pop(d.peer_id, None)
            return []
        if isinstance(d, Query):
            key = (src_ip, d.app_name)
            if key in self.pending:
                self.stats.duplicate_queries += 1
            else:
                self.pending[key] = PendingRequest(src_ip, d.app_name, now)
            return []

        assert isinstance(d, Reply)
        if d.requester_ip != self.cfg.peer_id:
            # Someone else's request got satisfied; drop our copy of it.
            self.pending.pop((d.requester_ip, d.app_name), None)
            return []
        # Offers are only trusted from peers currently on the roster, so a
        # stale reply from a departed peer can never allocate.
        if src_ip not in self.roster:
            self.stats.ignored_unknown_responder += 1
            return []
        key = (src_ip, d.app_name)
        if key in self.replies:
            self.stats.duplicate_replies += 1
            return []
        self.replies[key] = ReplyRecord(
            responder_ip=src_ip,
            requester_ip=d.requester_ip,
            app_name=d.app_name,
            full_path=d.full_path,
            username=d.username,
            received_at=now,
        )
        if d.app_name in self.queries:
            del self.queries[d.app_name]  # first response wins
            return [ConnectDirective(src_ip, d.app_name, d.full_path, d.username)]
        return []

    # -- serving side ----------------------------------------------------

    def process_pending(
        self, pool: AppPool, active_sessions: int, now: float
    ) -> list[Reply]:
        """Answer pending requests whose conditions hold; answered ones leave
        the set, the rest stay until their own timeout.

        Replies emitted in this pass count toward the session cap so one
        pass cannot offer more sessions than remain.
        """
        out: list[Reply] = []
        for key in list(self.pending.keys()):
            if active_sessions + len(out) >= self.cfg.max_sessions:
                break
            requester_ip, app_name = key
            entry = pool.lookup(app_name)
            if entry is None or not entry.shared:
                continue
            out.append(
                Reply(
                    requester_ip=requester_ip,
                    app_name=app_name,
                    full_path=entry.full_path,
                    username=entry.username,
                )
            )
            del self.pending[key]
        return out
