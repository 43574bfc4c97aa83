"""Discrete-event queue with integer-nanosecond timestamps.

Events at the same timestamp fire in scheduling order (sequence number),
which makes every simulated race reproducible.
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field
from typing import Any

NS_PER_S = 1_000_000_000
TICK_S = 1.0 / NS_PER_S


def to_ns(seconds: float) -> int | None:
    """Seconds to integer nanoseconds; ``None`` for an infinite delay."""
    if math.isinf(seconds):
        return None
    if seconds < 0 or math.isnan(seconds):
        raise ValueError(f"invalid duration {seconds}")
    return int(round(seconds * NS_PER_S))


def to_s(ns: int) -> float:
    return ns / NS_PER_S


@dataclass(order=True)
class Event:
    time_ns: int
    seq: int
    kind: str = field(compare=False)
    payload: Any = field(default=None, compare=False)


class EventQueue:
    def __init__(self, start_ns: int = 0):
        self.now_ns = start_ns
        self._heap: list[Event] = []
        self._seq = itertools.count()

    @property
    def now(self) -> float:
        return to_s(self.now_ns)

    def schedule_at(self, time_ns: int, kind: str, payload: Any = None) -> Event:
        if time_ns < self.now_ns:
            raise ValueError("cannot schedule an event in the past")
        ev = Event(time_ns, next(self._seq), kind, payload)
        heapq.heappush(self._heap, ev)
        return ev

    def schedule_in(self, delay_s: float, kind: str, payload: Any = None) -> Event | None:
        """Schedule after ``delay_s``; an infinite delay schedules nothing."""
        ns = to_ns(delay_s)
        if ns is None:
            return None
        return self.schedule_at(self.now_ns + ns, kind, payload)

    def pop(self) -> Event:
        ev = heapq.heappop(self._heap)
        self.now_ns = ev.time_ns
        return ev

    def __len__(self):
        return len(self._heap)

    def __bool__(self):
        return bool(self._heap)

    def advance_to(self, time_ns: int) -> None:
        if time_ns < self.now_ns:
            raise ValueError("clock cannot go backwards")
        self.now_ns = time_ns
