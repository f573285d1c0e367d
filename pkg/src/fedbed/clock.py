"""Injectable clocks.

Components take a clock for everything they *report* (timestamps, timing
measurements). Loop deadlines always use the real monotonic clock, so a
manual clock makes reported timings deterministic without stalling waits.
"""

from __future__ import annotations

import time


class SystemClock:
    def now_ms(self) -> int:
        return int(time.time() * 1000)

    def monotonic_ms(self) -> float:
        return time.monotonic_ns() / 1e6


class ManualClock:
    """Fixed-point clock for reproducible runs; advance() is explicit."""

    def __init__(self, start_ms: int = 0):
        self._now = float(start_ms)

    def now_ms(self) -> int:
        return int(self._now)

    def monotonic_ms(self) -> float:
        return self._now

    def advance(self, ms: float) -> None:
        self._now += ms
