"""Session clocks.

Live sessions read wall time; scripted replays run on a simulated clock that
is anchored at wall time but advances only via explicit `sleep` steps (plus a
tiny auto-tick so consecutive reads are strictly increasing). Debounce windows
and artifact timestamps both come from the session clock, which makes replay
coalescing deterministic and lets scenario sleeps show up in the artifact
timeline without real waiting.
"""
from __future__ import annotations

import threading
import time


class WallClock:
    def now(self) -> float:
        return time.time()

    def sleep(self, duration: float) -> None:
        time.sleep(duration)


class SimClock:
    """Deterministic clock: starts at `start` (default: wall now), advances
    `tick` per read and `duration` per sleep. Never waits."""

    def __init__(self, start: float | None = None, tick: float = 0.0001) -> None:
        self._now = time.time() if start is None else start
        self._tick = tick
        self._lock = threading.Lock()

    def now(self) -> float:
        with self._lock:
            self._now += self._tick
            return self._now

    def sleep(self, duration: float) -> None:
        with self._lock:
            self._now += max(duration, 0.0)
