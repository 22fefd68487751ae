"""Round-robin time-slice scheduler for broker client sessions.

Sessions are visited in fixed circular order; each allocation holds for
one quantum. Idle sessions still consume their slice, which keeps the
fairness property exact: any N consecutive allocations over N registered
sessions visit each exactly once.
"""

from __future__ import annotations


class RoundRobinScheduler:
    def __init__(self, quantum: float):
        if quantum <= 0:
            raise ValueError("quantum must be positive")
        self.quantum = quantum
        self.allocated: int | None = None
        self.slice_deadline: float = 0.0
        self._order: list[int] = []
        self._next = 0

    def __len__(self) -> int:
        return len(self._order)

    @property
    def order(self) -> tuple[int, ...]:
        return tuple(self._order)

    def add(self, session_id: int) -> None:
        """Register at the tail of the circular order."""
        if session_id in self._order:
            raise ValueError(f"session {session_id} already registered")
        self._order.append(session_id)

    def remove(self, session_id: int) -> None:
        idx = self._order.index(session_id)
        self._order.pop(idx)
        if idx < self._next:
            self._next -= 1
        if self.allocated == session_id:
            self.allocated = None  # next due() advances immediately

    def due(self, now: float) -> bool:
        """True when the allocation should change at `now`."""
        if not self._order:
            return False
        if self.allocated is None:
            return True
        return now >= self.slice_deadline

    def advance(self, now: float) -> int | None:
        """Allocate the next session in circular order and start its slice."""
        if not self._order:
            self.allocated = None
            return None
        if self._next >= len(self._order):
            self._next = 0
        self.allocated = self._order[self._next]
        self._next += 1
        self.slice_deadline = now + self.quantum
        return self.allocated
