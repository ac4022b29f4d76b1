"""Spawned-command logging and alien-process tracing.

Every executed image is hashed (SHA-512) and checked against the immutable
whitelist built from its environment template's baseline binaries; whitelisted
executions are just logged, anything else is alien and gets an instruction
trace. While tracing, each memory write triggers the alternation handshake:
tracing pauses, a dump request goes to the checkpoint daemon, and no later
trace event is consumed until the completion notice arrives. Checkpoint
failures degrade to a recorded gap instead of stopping observation.

Trace logs persist as length-prefixed binary records with a sidecar index:

    <trace_id>.tlog: magic "TLG1" | u32 header len | header JSON |
                     repeated ( u32 len | record JSON )
    <trace_id>.tidx: u64 big-endian file offset of each record frame

Record kinds: {"t":"ev"} trace events, {"t":"snap"} snapshot markers,
{"t":"gap"} missing snapshots, {"t":"seal"} end marker.
"""
from __future__ import annotations

import hashlib
import json
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .checkpointd import CheckpointError, CheckpointClient, CompletionNotice
from .util import MonotoneStamp, PROTOCOL_STAMP, new_id

TRACE_MAGIC = b"TLG1"
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")

TRACE_EVENT_KINDS = ("instruction", "mem_read", "mem_write")


class TracerError(Exception):
    pass


def hash_image(data: bytes) -> str:
    """SHA-512 of the image bytes, hex-encoded (128 chars)."""
    return hashlib.sha512(data).hexdigest()


@dataclass(frozen=True)
class WhitelistSet:
    template_id: str
    digests: frozenset[str]

    def __contains__(self, digest: str) -> bool:
        return digest in self.digests


def build_whitelist(template_id: str, images: list[bytes]) -> WhitelistSet:
    """Digests of all baseline images (deduplicated)."""
    return WhitelistSet(template_id, frozenset(hash_image(img) for img in images))


@dataclass(frozen=True)
class ExecEvent:
    session_id: str
    command_line: str
    image_digest: str | None
    verdict: str  # trusted | alien | failed
    timestamp: float
    path: str | None = None
    trace_id: str | None = None
    status: str = "ok"


@dataclass(frozen=True)
class TraceEvent:
    seq: int
    kind: str
    address: int
    detail: str
    appended_at: int  # monotone protocol stamp

    def to_doc(self) -> dict:
        return {"t": "ev", "seq": self.seq, "kind": self.kind,
                "address": self.address, "detail": self.detail,
                "at": self.appended_at}


@dataclass(frozen=True)
class SnapshotRef:
    seq: int
    snapshot_id: str
    request_id: str
    noticed_at: int  # monotone protocol stamp of the completion notice


class TraceLog:
    """One alien process's trace: append-only events, snapshot markers at the
    seqs of the mem_writes that triggered them, and recorded gaps where the
    daemon failed."""

    def __init__(self, trace_id: str, session_id: str, command_line: str,
                 exec_digest: str, path: Path, opened_at: float) -> None:
        self.trace_id = trace_id
        self.session_id = session_id
        self.command_line = command_line
        self.exec_digest = exec_digest
        self.target: int | None = None
        self.events: list[TraceEvent] = []
        self.snapshot_refs: list[SnapshotRef] = []
        self.gaps: list[dict] = []
        self.sealed = False
        self.pending_request: str | None = None
        self._seq = 0
        self._path = path
        self._fh = open(path, "wb")
        self._idx = open(path.with_suffix(".tidx"), "wb")
        header = json.dumps({
            "version": 1, "trace_id": trace_id, "session_id": session_id,
            "command_line": command_line, "image_digest": exec_digest,
            "opened_at": opened_at,
        }).encode("utf-8")
        self._fh.write(TRACE_MAGIC + _U32.pack(len(header)) + header)
        self._fh.flush()

    @property
    def log_path(self) -> Path:
        return self._path

    def next_seq(self) -> int:
        self._seq += 1
        return self._seq

    def _write_record(self, doc: dict) -> None:
        frame = json.dumps(doc).encode("utf-8")
        self._idx.write(_U64.pack(self._fh.tell()))
        self._fh.write(_U32.pack(len(frame)) + frame)
        self._fh.flush()
        self._idx.flush()

    def append(self, event: TraceEvent) -> None:
        if self.sealed:
            raise TracerError("trace log is sealed")
        self.events.append(event)
        self._write_record(event.to_doc())

    def add_snapshot(self, ref: SnapshotRef) -> None:
        self.snapshot_refs.append(ref)
        self._write_record({"t": "snap", "seq": ref.seq,
                            "snapshot_id": ref.snapshot_id,
                            "request_id": ref.request_id, "at": ref.noticed_at})

    def add_gap(self, seq: int, reason: str, at: int) -> None:
        self.gaps.append({"seq": seq, "reason": reason, "at": at})
        self._write_record({"t": "gap", "seq": seq, "reason": reason, "at": at})

    def seal(self) -> None:
        if self.sealed:
            return
        self._write_record({"t": "seal", "events": len(self.events),
                            "snapshots": len(self.snapshot_refs)})
        self.sealed = True
        self._fh.close()
        self._idx.close()


def read_trace_log(path: Path | str) -> tuple[dict, list[dict]]:
    """Parse a persisted trace log; returns (header, records)."""
    raw = Path(path).read_bytes()
    if raw[:4] != TRACE_MAGIC:
        raise TracerError("bad trace log magic")
    (hlen,) = _U32.unpack_from(raw, 4)
    header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    records = []
    off = 8 + hlen
    while off < len(raw):
        (flen,) = _U32.unpack_from(raw, off)
        off += 4
        records.append(json.loads(raw[off:off + flen].decode("utf-8")))
        off += flen
    return header, records


@dataclass
class SessionTracing:
    session_id: str
    whitelist: WhitelistSet
    logs: dict = field(default_factory=dict)  # trace_id -> TraceLog
    current: TraceLog | None = None


class Tracer:
    """Per-session exec verdicts and trace-log management.

    `coalesce_events` throttles snapshots to at most one per that many trace
    events (1 = every memory write, the default behavior). An optional
    periodic timer (`periodic_interval`, off by default) additionally snapshots
    on elapsed session-clock time.
    """

    def __init__(self, trace_dir: Path | str, checkpoint: CheckpointClient,
                 pipeline=None, stamp: MonotoneStamp = PROTOCOL_STAMP,
                 coalesce_events: int = 1,
                 periodic_interval: float | None = None) -> None:
        self.trace_dir = Path(trace_dir)
        self.trace_dir.mkdir(parents=True, exist_ok=True)
        self.checkpoint = checkpoint
        self.pipeline = pipeline
        self.stamp = stamp
        self.coalesce_events = max(1, coalesce_events)
        self.periodic_interval = periodic_interval
        self._sessions: dict[str, SessionTracing] = {}
        self._logs: dict[str, TraceLog] = {}
        self._lock = threading.Lock()

    def arm_session(self, session_id: str, whitelist: WhitelistSet) -> SessionTracing:
        with self._lock:
            tracing = SessionTracing(session_id, whitelist)
            self._sessions[session_id] = tracing
            return tracing

    def session(self, session_id: str) -> SessionTracing:
        tracing = self._sessions.get(session_id)
        if tracing is None:
            raise TracerError(f"session {session_id} is not armed")
        return tracing

    def _emit(self, kind: str, body: dict, session_id: str, ts: float) -> None:
        if self.pipeline is not None:
            self.pipeline.emit(kind, body, session_id=session_id, ts=ts)

    # -- exec logging -----------------------------------------------------

    def on_exec(self, session_id: str, command_line: str,
                image_bytes: bytes | None, ts: float,
                path: str | None = None) -> tuple[ExecEvent, TraceLog | None]:
        """Log one spawned command. Execs of unreadable images are still
        logged (status "failed"); alien verdicts open a trace log."""
        tracing = self.session(session_id)
        if image_bytes is None:
            event = ExecEvent(session_id, command_line, None, "failed", ts,
                              path=path, status="no_such_image")
            self._emit("exec", {
                "command_line": command_line, "path": path, "image_digest": None,
                "verdict": "failed", "status": "no_such_image",
            }, session_id, ts)
            return event, None

        digest = hash_image(image_bytes)
        verdict = "trusted" if digest in tracing.whitelist else "alien"
        log = None
        if verdict == "alien":
            trace_id = new_id("trc")
            log = TraceLog(trace_id, session_id, command_line, digest,
                           self.trace_dir / f"{trace_id}.tlog", ts)
            with self._lock:
                tracing.logs[trace_id] = log
                tracing.current = log
                self._logs[trace_id] = log
        event = ExecEvent(session_id, command_line, digest, verdict, ts,
                          path=path, trace_id=log.trace_id if log else None)
        self._emit("exec", {
            "command_line": command_line, "path": path, "image_digest": digest,
            "verdict": verdict, "status": "ok",
            "trace_id": log.trace_id if log else None,
        }, session_id, ts)
        if log is not None:
            self._emit("trace_opened", {
                "trace_id": log.trace_id, "command_line": command_line,
                "image_digest": digest,
            }, session_id, ts)
        return event, log

    def attach_process(self, log: TraceLog, pid: int) -> None:
        log.target = pid

    # -- tracing ------------------------------------------------------------

    def trace(self, log: TraceLog, stream, ts: float = 0.0, clock=None) -> TraceLog:
        """Consume a stream of (kind, address, detail) tuples. On each
        mem_write the alternation handshake runs before the next event is
        consumed."""
        if log.sealed:
            raise TracerError("trace log is sealed")
        last_periodic = clock.now() if (clock and self.periodic_interval) else 0.0
        for kind, address, detail in stream:
            if kind not in TRACE_EVENT_KINDS:
                raise TracerError(f"unknown trace event kind: {kind!r}")
            event = TraceEvent(log.next_seq(), kind, address, detail,
                               self.stamp.next())
            log.append(event)
            if kind == "mem_write" and self._snapshot_due(log):
                self.on_memory_write(log, event, ts)
            if clock is not None and self.periodic_interval:
                now = clock.now()
                if now - last_periodic >= self.periodic_interval:
                    self.on_memory_write(log, event, ts)
                    last_periodic = now
        return log

    def _snapshot_due(self, log: TraceLog) -> bool:
        if self.coalesce_events <= 1:
            return True
        taken = log.snapshot_refs[-1].seq if log.snapshot_refs else 0
        last_gap = log.gaps[-1]["seq"] if log.gaps else 0
        return log.events[-1].seq - max(taken, last_gap) >= self.coalesce_events

    def on_memory_write(self, log: TraceLog, event: TraceEvent, ts: float) -> str | None:
        """The alternation handshake: request a dump, stay paused until the
        completion notice, record the snapshot (or a gap on daemon failure)."""
        if log.pending_request is not None:
            raise TracerError("handshake already in flight for this trace")
        request = self.checkpoint.new_request(
            session_id=log.session_id, trace_id=log.trace_id,
            target=log.target if log.target is not None else -1,
            trigger_seq=event.seq)
        log.pending_request = request.request_id
        try:
            notice = self.checkpoint.execute(request)
        except CheckpointError as exc:
            log.pending_request = None
            log.add_gap(event.seq, str(exc), self.stamp.next())
            self._emit("degradation", {
                "component": "checkpoint", "reason": "dump_failed",
                "detail": str(exc), "trace_id": log.trace_id,
                "trigger_seq": event.seq,
            }, log.session_id, ts)
            return None
        return self.resume_after_checkpoint(log, notice, ts)

    def resume_after_checkpoint(self, log: TraceLog, notice: CompletionNotice,
                                ts: float = 0.0) -> str | None:
        """Validate and record a completion notice; tracing resumes at the
        next unconsumed event once this returns."""
        if log.pending_request is None or notice.request_id != log.pending_request:
            self._emit("degradation", {
                "component": "checkpoint", "reason": "protocol_error",
                "detail": f"notice for unknown request {notice.request_id}",
                "trace_id": log.trace_id,
            }, log.session_id, ts)
            raise TracerError(f"notice for unknown request {notice.request_id}")
        log.pending_request = None
        seq = log.events[-1].seq
        if notice.status != "ok" or notice.snapshot_id is None:
            log.add_gap(seq, "dump_failed", self.stamp.next())
            self._emit("degradation", {
                "component": "checkpoint", "reason": "dump_failed",
                "detail": notice.status, "trace_id": log.trace_id,
                "trigger_seq": seq,
            }, log.session_id, ts)
            return None
        ref = SnapshotRef(seq, notice.snapshot_id, notice.request_id,
                          self.stamp.next())
        log.add_snapshot(ref)
        self._emit("snapshot", {
            "snapshot_id": notice.snapshot_id, "trace_id": log.trace_id,
            "request_id": notice.request_id, "trigger_seq": seq,
            "duration": notice.duration, "status": "ok",
        }, log.session_id, ts)
        return notice.snapshot_id

    # -- retrieval ---------------------------------------------------------

    def get_log(self, trace_id: str) -> TraceLog:
        log = self._logs.get(trace_id)
        if log is None:
            raise TracerError(f"unknown trace: {trace_id}")
        return log

    def seal_session(self, session_id: str) -> list[str]:
        tracing = self._sessions.get(session_id)
        if tracing is None:
            return []
        for log in tracing.logs.values():
            log.seal()
        return sorted(tracing.logs)
