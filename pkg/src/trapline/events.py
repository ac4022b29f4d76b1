"""Uniform event envelope.

Every module reports what it observed as an Event; the store appends them and
the monitor fans them out. One JSON document per event, schema:

    {"v": 1, "event_id": int, "ts": float, "session_id": str|null,
     "kind": str, "body": {...}}

`ts` is UTC epoch seconds (microsecond precision). `event_id` is assigned by
the store, strictly increasing in append order; cross-module ordering is by
event_id, not wall time.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

KINDS = frozenset(
    {
        "connection",
        "session_created",
        "session_archived",
        "fs_commit",
        "exec",
        "trace_opened",
        "snapshot",
        "capture",
        "degradation",
        "system",
    }
)

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Event:
    event_id: int
    ts: float
    kind: str
    session_id: str | None = None
    body: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown event kind: {self.kind!r}")

    def to_doc(self) -> dict:
        return {
            "v": SCHEMA_VERSION,
            "event_id": self.event_id,
            "ts": self.ts,
            "session_id": self.session_id,
            "kind": self.kind,
            "body": self.body,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_doc(), separators=(",", ":"), sort_keys=True)


def event_from_doc(doc: dict) -> Event:
    if doc.get("v") != SCHEMA_VERSION:
        raise ValueError(f"unsupported event schema version: {doc.get('v')!r}")
    return Event(
        event_id=doc["event_id"],
        ts=doc["ts"],
        kind=doc["kind"],
        session_id=doc.get("session_id"),
        body=doc.get("body", {}),
    )


def event_from_json(line: str) -> Event:
    return event_from_doc(json.loads(line))
