"""Process checkpoint daemon.

Listens on a local socket for dump requests, captures the target process's
full resource state (registers, memory regions, open descriptors) through a
pluggable state provider, persists it as an immutable snapshot, and answers
with a completion notice. The requesting tracer stays paused until the notice
arrives, so the daemon always reads a quiescent process.

Wire protocol (bit-exact): each message is a frame of

    4-byte big-endian body length | body

    body: 1 byte message type (0x01 dump request, 0x02 completion notice)
          1 byte protocol version (0x01)
          UTF-8 JSON payload

Request payload:  {"request_id", "session_id", "trace_id", "target",
                   "trigger_seq"}
Notice payload:   {"request_id", "snapshot_id", "status": "ok"|"failed",
                   "duration"}

Malformed frame bodies are logged and dropped; the connection survives.

Snapshot persistence: one directory per snapshot holding `manifest.json`
plus one raw `region-<i>.bin` file per memory region, so large dumps stream
straight from disk.
"""
from __future__ import annotations

import json
import logging
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .util import new_id

log = logging.getLogger(__name__)

MSG_REQUEST = 0x01
MSG_NOTICE = 0x02
PROTO_VERSION = 0x01
MAX_FRAME = 64 * 1024 * 1024

_LEN = struct.Struct(">I")


class CheckpointError(Exception):
    pass


class CheckpointTimeout(CheckpointError):
    pass


# -- process state ---------------------------------------------------------

@dataclass(frozen=True)
class MemoryRegion:
    base: int
    size: int
    perms: str
    content: bytes

    def __post_init__(self) -> None:
        if len(self.content) != self.size:
            raise CheckpointError("region size must equal content length")


@dataclass(frozen=True)
class Descriptor:
    number: int
    kind: str
    target: str


@dataclass(frozen=True)
class ProcessState:
    registers: dict
    regions: tuple[MemoryRegion, ...]
    descriptors: tuple[Descriptor, ...]


class FileStateProvider:
    """Reads process state exported as `<state_dir>/<pid>.json` — the bridge
    that lets a separately started daemon serve dumps for another process's
    simulated targets."""

    def __init__(self, state_dir: Path | str) -> None:
        self.state_dir = Path(state_dir)

    def read_state(self, target: int) -> ProcessState | None:
        path = self.state_dir / f"{target}.json"
        if not path.exists():
            return None
        doc = json.loads(path.read_text(encoding="utf-8"))
        regions = tuple(
            MemoryRegion(r["base"], r["size"], r["perms"],
                         bytes.fromhex(r["content_hex"]))
            for r in doc.get("regions", []))
        descriptors = tuple(
            Descriptor(d["number"], d["kind"], d["target"])
            for d in doc.get("descriptors", []))
        return ProcessState(doc.get("registers", {}), regions, descriptors)


def export_state(state: ProcessState, state_dir: Path | str, target: int) -> Path:
    """Inverse of FileStateProvider.read_state, for cross-process setups."""
    doc = {
        "registers": state.registers,
        "regions": [{"base": r.base, "size": r.size, "perms": r.perms,
                     "content_hex": r.content.hex()} for r in state.regions],
        "descriptors": [{"number": d.number, "kind": d.kind, "target": d.target}
                        for d in state.descriptors],
    }
    path = Path(state_dir) / f"{target}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


# -- messages ---------------------------------------------------------------

@dataclass(frozen=True)
class DumpRequest:
    request_id: str
    session_id: str
    trace_id: str
    target: int
    trigger_seq: int

    def to_doc(self) -> dict:
        return {"request_id": self.request_id, "session_id": self.session_id,
                "trace_id": self.trace_id, "target": self.target,
                "trigger_seq": self.trigger_seq}


@dataclass(frozen=True)
class CompletionNotice:
    request_id: str
    snapshot_id: str | None
    status: str  # ok | failed
    duration: float

    def to_doc(self) -> dict:
        return {"request_id": self.request_id, "snapshot_id": self.snapshot_id,
                "status": self.status, "duration": self.duration}


def encode_frame(msg_type: int, doc: dict) -> bytes:
    body = bytes([msg_type, PROTO_VERSION]) + json.dumps(doc).encode("utf-8")
    return _LEN.pack(len(body)) + body


def decode_body(body: bytes) -> tuple[int, dict]:
    if len(body) < 2:
        raise CheckpointError("frame body too short")
    msg_type, version = body[0], body[1]
    if version != PROTO_VERSION:
        raise CheckpointError(f"unsupported protocol version {version}")
    if msg_type not in (MSG_REQUEST, MSG_NOTICE):
        raise CheckpointError(f"unknown message type {msg_type:#x}")
    return msg_type, json.loads(body[2:].decode("utf-8"))


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf


def read_frame(sock: socket.socket) -> bytes | None:
    hdr = _recv_exact(sock, 4)
    if hdr is None:
        return None
    (length,) = _LEN.unpack(hdr)
    if length > MAX_FRAME:
        raise CheckpointError(f"frame length {length} exceeds limit")
    return _recv_exact(sock, length)


# -- snapshot store -----------------------------------------------------------

@dataclass(frozen=True)
class Snapshot:
    snapshot_id: str
    request_id: str
    registers: dict
    regions: tuple[MemoryRegion, ...]
    descriptors: tuple[Descriptor, ...]
    taken_at: float


class SnapshotStore:
    def __init__(self, root: Path | str) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def persist(self, snapshot: Snapshot) -> None:
        sdir = self.root / snapshot.snapshot_id
        with self._lock:
            if sdir.exists():
                raise CheckpointError(f"snapshot {snapshot.snapshot_id} exists")
            sdir.mkdir(parents=True)
        manifest = {
            "snapshot_id": snapshot.snapshot_id,
            "request_id": snapshot.request_id,
            "registers": snapshot.registers,
            "taken_at": snapshot.taken_at,
            "descriptors": [{"number": d.number, "kind": d.kind, "target": d.target}
                            for d in snapshot.descriptors],
            "regions": [{"base": r.base, "size": r.size, "perms": r.perms,
                         "file": f"region-{i:03d}.bin"}
                        for i, r in enumerate(snapshot.regions)],
        }
        for i, region in enumerate(snapshot.regions):
            (sdir / f"region-{i:03d}.bin").write_bytes(region.content)
        (sdir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True),
                                            encoding="utf-8")

    def fetch(self, snapshot_id: str) -> Snapshot:
        sdir = self.root / snapshot_id
        manifest_path = sdir / "manifest.json"
        if not manifest_path.exists():
            raise CheckpointError(f"unknown snapshot: {snapshot_id}")
        doc = json.loads(manifest_path.read_text(encoding="utf-8"))
        regions = tuple(
            MemoryRegion(r["base"], r["size"], r["perms"],
                         (sdir / r["file"]).read_bytes())
            for r in doc["regions"])
        descriptors = tuple(
            Descriptor(d["number"], d["kind"], d["target"])
            for d in doc["descriptors"])
        return Snapshot(doc["snapshot_id"], doc["request_id"], doc["registers"],
                        regions, descriptors, doc["taken_at"])

    def list_ids(self) -> list[str]:
        return sorted(p.name for p in self.root.iterdir() if p.is_dir())


# -- daemon core ---------------------------------------------------------------

class CheckpointCore:
    """Transport-independent request handling: resolve the target's state via
    the provider, persist a snapshot, answer with exactly one notice."""

    def __init__(self, store: SnapshotStore, provider, on_snapshot=None) -> None:
        self.store = store
        self.provider = provider
        self.on_snapshot = on_snapshot
        self._seen: set[str] = set()
        self._lock = threading.Lock()

    def handle_dump(self, request: DumpRequest) -> CompletionNotice:
        started = time.monotonic()
        with self._lock:
            if request.request_id in self._seen:
                raise CheckpointError(f"duplicate request id {request.request_id}")
            self._seen.add(request.request_id)
        state = self.provider.read_state(request.target)
        if state is None:
            notice = CompletionNotice(request.request_id, None, "failed",
                                      time.monotonic() - started)
        else:
            snapshot = Snapshot(
                snapshot_id=new_id("snap"),
                request_id=request.request_id,
                registers=dict(state.registers),
                regions=tuple(state.regions),
                descriptors=tuple(state.descriptors),
                taken_at=time.time(),
            )
            self.store.persist(snapshot)
            notice = CompletionNotice(request.request_id, snapshot.snapshot_id,
                                      "ok", time.monotonic() - started)
        if self.on_snapshot is not None:
            self.on_snapshot(request, notice)
        return notice


class CheckpointDaemon:
    """Socket front-end for a CheckpointCore. `endpoint` is "host:port" for
    TCP or a filesystem path for a Unix socket. Serves many connections;
    requests within one connection are answered in order."""

    def __init__(self, core: CheckpointCore, endpoint: str) -> None:
        self.core = core
        self.endpoint = endpoint
        self._sock: socket.socket | None = None
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()
        self.bound_endpoint: str | None = None

    def start(self) -> str:
        if "/" in self.endpoint:
            sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
            sock.bind(self.endpoint)
            self.bound_endpoint = self.endpoint
        else:
            host, _, port = self.endpoint.rpartition(":")
            sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            sock.bind((host or "127.0.0.1", int(port)))
            bound = sock.getsockname()
            self.bound_endpoint = f"{bound[0]}:{bound[1]}"
        sock.listen(16)
        sock.settimeout(0.2)
        self._sock = sock
        t = threading.Thread(target=self._accept_loop, daemon=True,
                             name="checkpointd-accept")
        t.start()
        self._threads.append(t)
        return self.bound_endpoint

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            t = threading.Thread(target=self._serve_conn, args=(conn,), daemon=True)
            t.start()
            self._threads.append(t)

    def _serve_conn(self, conn: socket.socket) -> None:
        with conn:
            while not self._stop.is_set():
                try:
                    body = read_frame(conn)
                except (CheckpointError, OSError) as exc:
                    log.warning("checkpointd: unreadable frame, closing: %s", exc)
                    return
                if body is None:
                    return
                try:
                    msg_type, doc = decode_body(body)
                    if msg_type != MSG_REQUEST:
                        raise CheckpointError("expected a dump request")
                    request = DumpRequest(**doc)
                except (CheckpointError, ValueError, TypeError, KeyError) as exc:
                    log.warning("checkpointd: malformed frame dropped: %s", exc)
                    continue
                notice = self.core.handle_dump(request)
                try:
                    conn.sendall(encode_frame(MSG_NOTICE, notice.to_doc()))
                except OSError:
                    return

    def stop(self) -> None:
        self._stop.set()
        if self._sock is not None:
            self._sock.close()


# -- client ----------------------------------------------------------------

class LocalTransport:
    """In-process transport: calls the daemon core directly (embedded mode)."""

    def __init__(self, core: CheckpointCore) -> None:
        self.core = core

    def request(self, request: DumpRequest, timeout: float) -> CompletionNotice:
        return self.core.handle_dump(request)

    def close(self) -> None:
        pass


class SocketTransport:
    """One connection to a running daemon, reused across requests."""

    def __init__(self, endpoint: str) -> None:
        self.endpoint = endpoint
        self._sock: socket.socket | None = None
        self._lock = threading.Lock()

    def _connect(self) -> socket.socket:
        if self._sock is None:
            if "/" in self.endpoint:
                sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
                sock.connect(self.endpoint)
            else:
                host, _, port = self.endpoint.rpartition(":")
                sock = socket.create_connection((host or "127.0.0.1", int(port)))
            self._sock = sock
        return self._sock

    def request(self, request: DumpRequest, timeout: float) -> CompletionNotice:
        with self._lock:
            try:
                sock = self._connect()
                sock.settimeout(timeout)
                sock.sendall(encode_frame(MSG_REQUEST, request.to_doc()))
                body = read_frame(sock)
            except socket.timeout as exc:
                self.close()
                raise CheckpointTimeout(f"no notice within {timeout}s") from exc
            except OSError as exc:
                self.close()
                raise CheckpointError(f"daemon unreachable: {exc}") from exc
            if body is None:
                self.close()
                raise CheckpointError("daemon closed the connection")
            msg_type, doc = decode_body(body)
            if msg_type != MSG_NOTICE:
                raise CheckpointError("expected a completion notice")
            notice = CompletionNotice(**doc)
            if notice.request_id != request.request_id:
                raise CheckpointError(
                    f"notice for unknown request {notice.request_id}")
            return notice

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None


class CheckpointClient:
    """What the tracer holds: builds dump requests and blocks until the
    matching completion notice. Split into new_request/execute so the caller
    can record the pending request id before the blocking exchange."""

    def __init__(self, transport, timeout: float = 5.0) -> None:
        self.transport = transport
        self.timeout = timeout

    def new_request(self, session_id: str, trace_id: str, target: int,
                    trigger_seq: int) -> DumpRequest:
        return DumpRequest(
            request_id=new_id("req"),
            session_id=session_id,
            trace_id=trace_id,
            target=target,
            trigger_seq=trigger_seq,
        )

    def execute(self, request: DumpRequest) -> CompletionNotice:
        return self.transport.request(request, self.timeout)

    def request_dump(self, session_id: str, trace_id: str, target: int,
                     trigger_seq: int) -> CompletionNotice:
        return self.execute(self.new_request(session_id, trace_id, target,
                                             trigger_seq))

    def close(self) -> None:
        self.transport.close()
