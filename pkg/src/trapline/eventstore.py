"""Append-only event store.

An embedded segmented log: each segment is a plain text file of one JSON
event document per line, named ``seg-<first event_id, 10 digits>.log``. The
store keeps every appended event in an in-memory list (rebuilt by scanning
the segments on open), so queries never touch disk. Appends are linearized
through a single lock and flushed to the OS before returning; segment
rollover happens at a configurable event count.

Sinks registered with `add_sink` are invoked inside the append lock right
after the durable write, which is what gives the monitor its
store-before-broadcast and per-client ordering guarantees.
"""
from __future__ import annotations

import threading
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable

from .events import Event, event_from_json

SEGMENT_EVENTS = 100_000


class StoreError(Exception):
    pass


@dataclass(frozen=True)
class Query:
    """Filter spec for reads. All criteria are ANDed; None means "any".

    Time bounds are inclusive. `order` sorts by event_id; `limit` applies
    after ordering (0 = unlimited).
    """

    ts_min: float | None = None
    ts_max: float | None = None
    session_id: str | None = None
    kinds: frozenset[str] | None = None
    limit: int = 0
    order: str = "asc"

    def __post_init__(self) -> None:
        if self.limit < 0:
            raise ValueError("limit must be >= 0")
        if self.order not in ("asc", "desc"):
            raise ValueError("order must be 'asc' or 'desc'")

    def matches(self, event: Event) -> bool:
        if self.ts_min is not None and event.ts < self.ts_min:
            return False
        if self.ts_max is not None and event.ts > self.ts_max:
            return False
        if self.session_id is not None and event.session_id != self.session_id:
            return False
        if self.kinds is not None and event.kind not in self.kinds:
            return False
        return True


@dataclass(frozen=True)
class AttackStats:
    day: str
    counts_by_kind: dict
    distinct_sources: int
    counts_by_service: dict
    total: int

    def to_doc(self) -> dict:
        return {"day": self.day, "total": self.total,
                "counts_by_kind": dict(self.counts_by_kind),
                "counts_by_service": dict(self.counts_by_service),
                "distinct_sources": self.distinct_sources}


class EventStore:
    def __init__(self, root: Path | str, segment_events: int = SEGMENT_EVENTS) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._segment_events = segment_events
        self._lock = threading.RLock()
        self._events: list[Event] = []
        self._sinks: list[Callable[[Event], None]] = []
        self._fh = None
        self._fh_count = 0
        self._next_id = 1
        self._load()

    # -- lifecycle -----------------------------------------------------

    def _load(self) -> None:
        for seg in sorted(self.root.glob("seg-*.log")):
            with open(seg, "r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    self._events.append(event_from_json(line))
        if self._events:
            self._events.sort(key=lambda e: e.event_id)
            self._next_id = self._events[-1].event_id + 1

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None

    def _roll_segment(self) -> None:
        if self._fh is not None:
            self._fh.close()
        name = self.root / f"seg-{self._next_id:010d}.log"
        self._fh = open(name, "a", encoding="utf-8")
        self._fh_count = 0

    # -- sinks ---------------------------------------------------------

    def add_sink(self, sink: Callable[[Event], None]) -> None:
        """Register a callable invoked (inside the append lock) for every
        event after it is durably written. Sinks must not block."""
        with self._lock:
            self._sinks.append(sink)

    # -- operations ----------------------------------------------------

    def append(self, kind: str, body: dict, session_id: str | None = None,
               ts: float | None = None) -> Event:
        with self._lock:
            event = Event(
                event_id=self._next_id,
                ts=time.time() if ts is None else ts,
                kind=kind,
                session_id=session_id,
                body=body,
            )
            if self._fh is None or self._fh_count >= self._segment_events:
                self._roll_segment()
            try:
                self._fh.write(event.to_json() + "\n")
                self._fh.flush()
            except OSError as exc:
                raise StoreError(f"event store unwritable: {exc}") from exc
            self._next_id += 1
            self._fh_count += 1
            self._events.append(event)
            for sink in self._sinks:
                sink(event)
            return event

    def scan(self) -> list[Event]:
        """Every stored event in append order (a snapshot copy)."""
        with self._lock:
            return list(self._events)

    def query(self, q: Query) -> list[Event]:
        with self._lock:
            hits = [e for e in self._events if q.matches(e)]
        if q.order == "desc":
            hits.reverse()
        if q.limit:
            hits = hits[: q.limit]
        return hits

    def get(self, event_id: int) -> Event | None:
        with self._lock:
            # _events is sorted by event_id and ids are dense from the last
            # load, but replays may leave gaps; bisect is not worth it here.
            lo, hi = 0, len(self._events) - 1
            while lo <= hi:
                mid = (lo + hi) // 2
                ev = self._events[mid]
                if ev.event_id == event_id:
                    return ev
                if ev.event_id < event_id:
                    lo = mid + 1
                else:
                    hi = mid - 1
        return None

    def after(self, cursor: int) -> list[Event]:
        """Events with event_id > cursor, ascending."""
        with self._lock:
            return [e for e in self._events if e.event_id > cursor]

    def head_id(self) -> int:
        with self._lock:
            return self._next_id - 1

    def stats(self, day: str) -> AttackStats:
        """Aggregate counts for one UTC calendar day ("YYYY-MM-DD")."""
        start = datetime.strptime(day, "%Y-%m-%d").replace(tzinfo=timezone.utc)
        ts_min = start.timestamp()
        ts_max = ts_min + 86400.0
        counts: dict[str, int] = {}
        sources: set[str] = set()
        services: dict[str, int] = {}
        total = 0
        for e in self.scan():
            if not (ts_min <= e.ts < ts_max):
                continue
            total += 1
            counts[e.kind] = counts.get(e.kind, 0) + 1
            if e.kind == "connection":
                src = e.body.get("source", "")
                if src:
                    sources.add(src.rsplit(":", 1)[0])
                svc = e.body.get("service")
                if svc:
                    services[svc] = services.get(svc, 0) + 1
        return AttackStats(
            day=day,
            counts_by_kind=counts,
            distinct_sources=len(sources),
            counts_by_service=services,
            total=total,
        )


class EventPipeline:
    """Thin emit helper shared by all producing modules: appends to the store
    (which fans out to sinks) and never raises into the producer for sink
    failures."""

    def __init__(self, store: EventStore) -> None:
        self.store = store

    def emit(self, kind: str, body: dict, session_id: str | None = None,
             ts: float | None = None) -> Event:
        return self.store.append(kind, body, session_id=session_id, ts=ts)


def events_to_docs(events: Iterable[Event]) -> list[dict]:
    return [e.to_doc() for e in events]
