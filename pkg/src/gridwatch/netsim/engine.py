"""Discrete-event queue on an integer microsecond clock."""

from __future__ import annotations

import heapq
import itertools
from typing import Any, Callable

US = 1_000_000


def to_us(seconds: float) -> int:
    return int(round(seconds * US))


class Timer:
    __slots__ = ("at", "fn", "args", "alive")

    def __init__(self, at: int, fn: Callable[..., Any], args: tuple):
        self.at = at
        self.fn = fn
        self.args = args
        self.alive = True

    def cancel(self) -> None:
        self.alive = False


class EventQueue:
    """Time-ordered action queue; equal timestamps run in insertion order."""

    def __init__(self) -> None:
        self.now = 0
        self._heap: list[tuple[int, int, Timer]] = []
        self._seq = itertools.count()

    def at(self, when: int, fn: Callable[..., Any], *args: Any) -> Timer:
        if when < self.now:
            raise ValueError(f"cannot schedule in the past ({when} < {self.now})")
        timer = Timer(when, fn, args)
        heapq.heappush(self._heap, (when, next(self._seq), timer))
        return timer

    def after(self, delay: int, fn: Callable[..., Any], *args: Any) -> Timer:
        return self.at(self.now + delay, fn, *args)

    def run(self, until: int) -> None:
        """Run every action scheduled strictly before ``until``."""
        heap = self._heap
        while heap and heap[0][0] < until:
            when, _, timer = heapq.heappop(heap)
            if not timer.alive:
                continue
            self.now = when
            timer.fn(*timer.args)
        self.now = max(self.now, until)

    def __len__(self) -> int:
        return sum(1 for _, _, t in self._heap if t.alive)
