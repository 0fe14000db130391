"""Deterministic event loop: integer-microsecond clock, FIFO tie-break by creation order."""

from __future__ import annotations

import heapq
import itertools
import math


def ms_to_us(ms: float) -> int:
    """Durations round up so that no positive cost collapses to zero."""
    return max(0, math.ceil(ms * 1000.0 - 1e-9))


class EventLoop:
    def __init__(self):
        self.now = 0
        self._queue: list = []
        self._seq = itertools.count()
        self.processed = 0

    def at(self, time_us: int, fn, *args) -> None:
        time_us = int(time_us)
        if time_us < self.now:
            raise ValueError(f"cannot schedule in the past ({time_us} < {self.now})")
        heapq.heappush(self._queue, (time_us, next(self._seq), fn, args))

    def after(self, delay_us: int, fn, *args) -> None:
        self.at(self.now + int(delay_us), fn, *args)

    def run(self, until: int | None = None) -> None:
        while self._queue:
            if until is not None and self._queue[0][0] > until:
                break
            time_us, _, fn, args = heapq.heappop(self._queue)
            self.now = time_us
            self.processed += 1
            fn(*args)
        if until is not None:
            self.now = max(self.now, until)

    def __len__(self) -> int:
        return len(self._queue)
