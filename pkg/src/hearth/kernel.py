"""Deterministic discrete-event kernel.

Virtual time is an integer count of microseconds.  Events fire in strict
(time, insertion order); callbacks may schedule further events.  The kernel
is single-threaded by design: external inputs (serve mode) must be marshaled
onto it between events, never injected concurrently.
"""

from __future__ import annotations

import heapq
from typing import Callable

from .rng import RandomStream
from .trace import Trace

US = 1
MS = 1_000
SECOND = 1_000_000


def us_from_s(seconds: float) -> int:
    return round(seconds * SECOND)


class PastTimeError(Exception):
    """Raised when an event is scheduled before the current clock."""


class EventHandle:
    __slots__ = ("time", "seq", "fn", "cancelled")

    def __init__(self, time: int, seq: int, fn: Callable[[], None]):
        self.time = time
        self.seq = seq
        self.fn = fn
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True

    def __lt__(self, other: "EventHandle") -> bool:
        return (self.time, self.seq) < (other.time, other.seq)


class Simulator:
    def __init__(self, seed: int = 0):
        self.now: int = 0
        self.seed = seed
        self.rng = RandomStream(seed)
        self.trace = Trace()
        self._heap: list[EventHandle] = []
        self._seq = 0
        self._fired = 0
        self._scheduled = 0

    def schedule_at(self, at: int, fn: Callable[[], None]) -> EventHandle:
        if at < self.now:
            raise PastTimeError(f"cannot schedule at {at}, clock is {self.now}")
        handle = EventHandle(int(at), self._seq, fn)
        self._seq += 1
        self._scheduled += 1
        heapq.heappush(self._heap, handle)
        return handle

    def schedule_in(self, delay: int, fn: Callable[[], None]) -> EventHandle:
        if delay < 0:
            raise PastTimeError(f"negative delay {delay}")
        return self.schedule_at(self.now + int(delay), fn)

    def cancel(self, handle: EventHandle) -> None:
        if not handle.cancelled:
            handle.cancelled = True
            self._scheduled -= 1

    def run_until(self, t_end: int) -> Trace:
        """Process every event with time <= t_end, then set the clock to t_end."""
        if t_end < self.now:
            raise PastTimeError(f"cannot run back to {t_end}, clock is {self.now}")
        while self._heap and self._heap[0].time <= t_end:
            handle = heapq.heappop(self._heap)
            if handle.cancelled:
                continue
            self.now = handle.time
            self._fired += 1
            handle.fn()
        self.now = t_end
        return self.trace

    def run_all(self, limit: int | None = None) -> Trace:
        """Drain the queue entirely (optionally stopping after `limit` events)."""
        count = 0
        while self._heap:
            handle = heapq.heappop(self._heap)
            if handle.cancelled:
                continue
            self.now = handle.time
            self._fired += 1
            handle.fn()
            count += 1
            if limit is not None and count >= limit:
                break
        return self.trace

    def pending(self) -> int:
        return sum(1 for h in self._heap if not h.cancelled)

    @property
    def stats(self) -> dict:
        return {"scheduled": self._scheduled, "fired": self._fired}

    def emit(self, entity: str, kind: str, **detail):
        return self.trace.emit(self.now, entity, kind, **detail)
