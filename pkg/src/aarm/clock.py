"""Time source abstraction so timeout behavior is testable without sleeping."""

from __future__ import annotations

import threading
import time


class SystemClock:
    def now(self) -> float:
        return time.time()


class TestClock:
    """Settable clock for conformance runs; starts frozen at ``start``."""

    def __init__(self, start: float = 1_700_000_000.0) -> None:
        self._now = start
        self._lock = threading.Lock()

    def now(self) -> float:
        with self._lock:
            return self._now

    def set(self, now: float) -> None:
        with self._lock:
            self._now = now

    def advance(self, seconds: float) -> float:
        with self._lock:
            self._now += seconds
            return self._now
