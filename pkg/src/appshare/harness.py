"""Load, fairness and replay harnesses.

loadtest drives a live broker + terminal host over loopback TCP, adding
one client at a time the way the original multi-session measurements were
taken: row 0 is the idle control, then each row snapshots the system
after one more client spawned its app and pushed its events through. The
memory columns are protocol-level retained-state proxies (connection
buffers, queues, window records), not OS counters; they reproduce the
per-session growth trends, not kilobyte values.

fairness_report runs on the virtual clock (appshare.sim), where slice
accounting is exact and runs are reproducible, and compares measured
input-to-update latency with the round-robin expectation: an event from a
non-allocated session waits for its slice, so with uniform arrivals the
median sits near (n-1) * quantum / 2 plus service time.
"""

from __future__ import annotations

import json
import queue
import statistics
import threading
import time
from collections import deque
from dataclasses import dataclass, fields
from pathlib import Path

from appshare.broker import BROKERED
from appshare.errors import SessionSetupFailureError, TooFewRowsError
from appshare.net import BrokerServer, FrameConnection, TermHostServer, connect_and_hello
from appshare.sim import ScheduledEvent, SimWorld, run_schedule
from appshare.wire.frames import CHANNEL_GLOBAL, Opcode, StreamFrame

CSV_PREAMBLE = (
    "# memory columns are protocol-level retained-state proxies"
    " (connection buffers + queues + window records), not OS memory counters;"
    " they reproduce growth trends, not kilobytes"
)


@dataclass
class LoadRow:
    n_remote_sessions: int
    n_upstream_sessions: int
    total_bytes_queued: int
    per_session_bytes_mean: float
    rtt_ms_p50: float
    rtt_ms_p95: float


LOAD_COLUMNS = [f.name for f in fields(LoadRow)]


class _LoadClient:
    """Test client: one session, one window, FIFO-matched update latency."""

    def __init__(self, broker_addr: tuple[str, int], name: str):
        self.name = name
        self.conn, self.session_id, self.channel_id = connect_and_hello(broker_addr)
        self.updates = 0
        self.rtt: list[float] = []
        self._sent: deque[float] = deque()
        self._acks: queue.SimpleQueue = queue.SimpleQueue()
        self._lock = threading.Lock()
        self._got_updates = threading.Condition(self._lock)
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _read_loop(self) -> None:
        while True:
            frames = self.conn.recv_frames()
            if frames is None:
                return
            now = time.monotonic()
            with self._lock:
                for frame in frames:
                    if frame.opcode == Opcode.UPDATE:
                        self.updates += 1
                        if self._sent:
                            self.rtt.append(now - self._sent.popleft())
                        self._got_updates.notify_all()
                    elif frame.opcode == Opcode.SPAWN_ACK:
                        self._acks.put(frame.text())

    def spawn(self, command: str, timeout: float = 5.0) -> int:
        self.conn.enqueue(
            StreamFrame(self.channel_id, Opcode.SPAWN, f"spawn,{command}".encode())
        )
        try:
            response = self._acks.get(timeout=timeout)
        except queue.Empty:
            raise SessionSetupFailureError(f"{self.name}: no spawn ack") from None
        if not response.startswith("ack,"):
            raise SessionSetupFailureError(f"{self.name}: {response}")
        return int(response.split(",")[1])

    def send_events(self, count: int, payload_size: int = 8) -> None:
        for i in range(count):
            body = f"{self.name[:2]}{i:06d}".encode().ljust(payload_size, b".")
            with self._lock:
                self._sent.append(time.monotonic())
            self.conn.enqueue(StreamFrame(CHANNEL_GLOBAL, Opcode.INPUT, body))

    def wait_updates(self, count: int, timeout: float) -> None:
        deadline = time.monotonic() + timeout
        with self._lock:
            while self.updates < count:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise SessionSetupFailureError(
                        f"{self.name}: {self.updates}/{count} updates after {timeout}s"
                    )
                self._got_updates.wait(remaining)

    def close(self) -> None:
        self.conn.abort()


def loadtest(
    mode: str,
    n_max: int = 9,
    events_per_session: int = 100,
    quantum: float = 0.050,
    out_path: str | Path | None = None,
) -> list[LoadRow]:
    """Rows for n = 0..n_max concurrent sessions in the given mode.

    Each new client spawns one app and pushes events_per_session inputs;
    the row is snapshotted after its last update arrived (deterministic
    barrier), with every session kept open. On setup failure the partial
    CSV is written with a FAILED marker and the error re-raised.
    """
    host = TermHostServer(("127.0.0.1", 0), mode).start()
    broker = BrokerServer(("127.0.0.1", 0), host.address, mode, quantum).start()
    clients: list[_LoadClient] = []
    rows: list[LoadRow] = [_snapshot(broker, host, [])]
    failed = False
    try:
        for n in range(1, n_max + 1):
            client = _LoadClient(broker.address, name=f"c{n:02d}")
            clients.append(client)
            client.spawn(f"app{n:02d}")
            client.send_events(events_per_session)
            # worst case the new session waits a full rotation per burst
            budget = 5.0 + 4 * quantum * max(1, n) + 0.002 * events_per_session
            client.wait_updates(events_per_session, timeout=budget)
            rows.append(_snapshot(broker, host, clients))
        return rows
    except SessionSetupFailureError:
        failed = True
        raise
    finally:
        if out_path is not None:
            write_csv(rows, out_path, mode=mode, failed=failed)
        for client in clients:
            client.close()
        broker.stop()
        host.stop()


def _snapshot(broker: BrokerServer, host: TermHostServer, clients: list[_LoadClient]) -> LoadRow:
    snap = broker.metrics()
    retained = snap.total_bytes_queued + snap.upstream_buffer_bytes + host.retained_bytes()
    rtt = sorted(r for c in clients for r in c.rtt)
    mean = (
        statistics.fmean(snap.per_session_bytes) if snap.per_session_bytes else 0.0
    )
    return LoadRow(
        n_remote_sessions=snap.n_sessions,
        n_upstream_sessions=snap.n_upstream_sessions,
        total_bytes_queued=retained,
        per_session_bytes_mean=mean,
        rtt_ms_p50=percentile(rtt, 0.50) * 1000.0,
        rtt_ms_p95=percentile(rtt, 0.95) * 1000.0,
    )


def percentile(sorted_values: list[float], q: float) -> float:
    """Nearest-rank percentile of pre-sorted data; 0.0 when empty."""
    if not sorted_values:
        return 0.0
    idx = round(q * (len(sorted_values) - 1))
    return sorted_values[idx]


def write_csv(
    rows: list[LoadRow], path: str | Path, mode: str = "", failed: bool = False
) -> None:
    lines = [CSV_PREAMBLE]
    if mode:
        lines.append(f"# mode={mode}")
    if failed:
        lines.append("# FAILED: partial results, a session never came up")
    lines.append(",".join(LOAD_COLUMNS))
    for row in rows:
        lines.append(
            ",".join(
                f"{getattr(row, c):.3f}" if isinstance(getattr(row, c), float)
                else str(getattr(row, c))
                for c in LOAD_COLUMNS
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_csv(path: str | Path) -> list[LoadRow]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#") or line.startswith(LOAD_COLUMNS[0]):
            continue
        values = line.split(",")
        rows.append(
            LoadRow(
                int(values[0]),
                int(values[1]),
                int(values[2]),
                float(values[3]),
                float(values[4]),
                float(values[5]),
            )
        )
    return rows


# -- linear trend fitting -----------------------------------------------------


def fit_linear(rows: list[LoadRow], column: str) -> tuple[float, float, float]:
    """OLS of `column` against n_remote_sessions: (slope, intercept, r2).

    Zero-variance residuals (including a constant column) give r2 = 1.0 by
    convention, since the line explains everything there is to explain.
    """
    if len(rows) < 3:
        raise TooFewRowsError(f"need >= 3 rows, got {len(rows)}")
    xs = [float(r.n_remote_sessions) for r in rows]
    ys = [float(getattr(r, column)) for r in rows]
    return ols(xs, ys)


def ols(xs: list[float], ys: list[float]) -> tuple[float, float, float]:
    if len(xs) < 3:
        raise TooFewRowsError(f"need >= 3 points, got {len(xs)}")
    y_mean = statistics.fmean(ys)
    ss_tot = sum((y - y_mean) ** 2 for y in ys)
    if ss_tot == 0.0:
        return 0.0, y_mean, 1.0
    fit = statistics.linear_regression(xs, ys)
    ss_res = sum((y - (fit.slope * x + fit.intercept)) ** 2 for x, y in zip(xs, ys))
    return fit.slope, fit.intercept, 1.0 - ss_res / ss_tot


# -- fairness / latency (virtual clock) ---------------------------------------


@dataclass
class FairnessReport:
    n_clients: int
    n_rotations: int
    quantum_ms: float
    allocation_counts: list[int]       # by client index
    rtt_ms: list[float]                # sorted
    rtt_ms_p50: float
    rtt_ms_p95: float
    expected_p50_ms: float             # (n-1) * quantum / 2, the closed form


def fairness_report(
    n_clients: int,
    n_rotations: int,
    quantum: float = 0.050,
    events_per_client: int | None = None,
    seed: int = 0,
) -> FairnessReport:
    """Drive n_rotations full scheduler cycles on the virtual clock.

    Input events arrive at uniformly random (seeded) times across the run,
    so the latency distribution is the steady-state one for round robin.
    Allocation counts are exact: joins all happen before the first slice.
    """
    import random

    world = SimWorld(BROKERED, quantum)
    clients = [world.add_client() for _ in range(n_clients)]
    for i, client in enumerate(clients):
        world.spawn(client, f"app{i}")
    total_allocations = n_rotations * n_clients
    horizon = (total_allocations - 1) * quantum
    rng = random.Random(seed)
    if events_per_client is None:
        events_per_client = max(20, 4 * n_rotations // max(1, n_clients))
    schedule = sorted(
        (rng.uniform(0.0, horizon * 0.98), idx)
        for idx in range(n_clients)
        for _ in range(events_per_client)
    )
    sequence = {idx: 0 for idx in range(n_clients)}
    for at, idx in schedule:
        world.advance_to(at)
        world.send_input(clients[idx], f"c{idx}e{sequence[idx]:05d}".encode())
        sequence[idx] += 1
    done = sum(world.allocation_counts().values())
    if done < total_allocations:
        world.step_slices(total_allocations - done)
    counts = world.allocation_counts()
    rtt = sorted(r * 1000.0 for c in world.clients for r in c.rtt)
    return FairnessReport(
        n_clients=n_clients,
        n_rotations=n_rotations,
        quantum_ms=quantum * 1000.0,
        allocation_counts=[counts.get(c.session_id, 0) for c in clients],
        rtt_ms=rtt,
        rtt_ms_p50=percentile(rtt, 0.50),
        rtt_ms_p95=percentile(rtt, 0.95),
        expected_p50_ms=(n_clients - 1) * quantum * 1000.0 / 2.0,
    )


# -- recorded schedules --------------------------------------------------------


def load_schedule(path: str | Path) -> tuple[str, float, int, list[ScheduledEvent]]:
    """Read a recorded multi-client schedule (JSON) for replay."""
    doc = json.loads(Path(path).read_text())
    events = [ScheduledEvent(t, c, action, str(arg)) for t, c, action, arg in doc["events"]]
    return doc.get("mode", BROKERED), doc["quantum"], doc["n_clients"], events


def run_replay(path: str | Path) -> tuple[bytes, dict[int, bytes]]:
    """Replay a recorded schedule; returns (upstream transcript bytes,
    per-client session log bytes)."""
    mode, quantum, n_clients, events = load_schedule(path)
    world = run_schedule(mode, quantum, n_clients, events)
    return world.upstream_bytes(), world.session_log_bytes()
