"""Live monitoring service: WebSocket event feed plus the read API.

One plain-TCP server speaks both roles. `GET /feed` with an Upgrade header
becomes a WebSocket subscription (RFC 6455 framing, text frames only); every
other request is a JSON read endpoint over the underlying stores:

    GET /                       service banner + store head
    GET /sessions               all sessions, oldest first
    GET /sessions/{id}          one session
    GET /sessions/{id}/history  the session's commit chain, oldest first
    GET /commits/{id}           one commit (tree as path -> content digest)
    GET /blobs/{digest}         raw stored bytes (application/octet-stream)
    GET /traces/{id}            trace header, events, snapshot markers, gaps
    GET /snapshots/{id}         snapshot manifest; region content base64
    GET /events?session=&kinds=&after=&limit=   stored events
    GET /stats?day=YYYY-MM-DD   per-day aggregates

Feed protocol: each message is one JSON text frame. Event frames are exactly
the stored event document (schema-versioned with "v"). Control frames carry a
"ctl" field instead: {"ctl":"hello","cursor":N} on connect and
{"ctl":"gap","last_event_id":N} before a slow client is disconnected.
Query parameters: ?kinds=a,b filters by kind, ?session=ID by session,
?cursor=N backfills everything after event_id N before going live (default is
live-only). Delivery to one client is in event_id order with no duplicates;
a client that cannot keep up is dropped rather than allowed to stall intake.

Raw packet payloads never appear on the feed — captures surface only as
summary events — so the feed stays light no matter the traffic volume.
"""
from __future__ import annotations

import base64
import hashlib
import json
import logging
import queue
import socket
import struct
import threading
from urllib.parse import parse_qs, unquote, urlsplit

from .events import Event
from .eventstore import Query
from .fsvault import VaultError
from .tracer import TracerError
from .util import new_id

log = logging.getLogger("trapline.monitor")

WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"
OP_TEXT, OP_CLOSE, OP_PING, OP_PONG = 0x1, 0x8, 0x9, 0xA
MAX_HTTP_HEADER = 64 * 1024
MAX_WS_PAYLOAD = 1024 * 1024


class MonitorError(Exception):
    pass


# -- WebSocket framing -------------------------------------------------------

def ws_accept_value(key: str) -> str:
    digest = hashlib.sha1((key + WS_GUID).encode("ascii")).digest()
    return base64.b64encode(digest).decode("ascii")


def encode_frame(opcode: int, payload: bytes) -> bytes:
    head = bytes([0x80 | opcode])
    n = len(payload)
    if n < 126:
        head += bytes([n])
    elif n < 65536:
        head += bytes([126]) + struct.pack(">H", n)
    else:
        head += bytes([127]) + struct.pack(">Q", n)
    return head + payload


def encode_text(doc: dict) -> bytes:
    return encode_frame(OP_TEXT, json.dumps(doc, sort_keys=True).encode("utf-8"))


def encode_close(code: int = 1000) -> bytes:
    return encode_frame(OP_CLOSE, struct.pack(">H", code))


class FrameParser:
    """Incremental parser for client-to-server (masked) WebSocket frames."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[tuple[int, bytes]]:
        self._buf.extend(data)
        frames = []
        while True:
            parsed = self._try_parse()
            if parsed is None:
                return frames
            frames.append(parsed)

    def _try_parse(self) -> tuple[int, bytes] | None:
        buf = self._buf
        if len(buf) < 2:
            return None
        opcode = buf[0] & 0x0F
        masked = bool(buf[1] & 0x80)
        length = buf[1] & 0x7F
        offset = 2
        if length == 126:
            if len(buf) < 4:
                return None
            length = struct.unpack_from(">H", buf, 2)[0]
            offset = 4
        elif length == 127:
            if len(buf) < 10:
                return None
            length = struct.unpack_from(">Q", buf, 2)[0]
            offset = 10
        if length > MAX_WS_PAYLOAD:
            raise MonitorError("oversized websocket frame")
        mask = b""
        if masked:
            if len(buf) < offset + 4:
                return None
            mask = bytes(buf[offset:offset + 4])
            offset += 4
        if len(buf) < offset + length:
            return None
        payload = bytes(buf[offset:offset + length])
        del buf[:offset + length]
        if masked:
            payload = bytes(b ^ mask[i % 4] for i, b in enumerate(payload))
        return opcode, payload


# -- subscriptions -----------------------------------------------------------

class FeedSubscriber:
    """One client's view of the feed: filters, a bounded buffer, and the
    last event_id delivered (for order/no-duplicate enforcement)."""

    def __init__(self, kinds: frozenset[str] | None, session_id: str | None,
                 maxsize: int) -> None:
        self.client_id = new_id("sub")
        self.kinds = kinds
        self.session_id = session_id
        self.queue: queue.Queue[Event] = queue.Queue(maxsize=maxsize)
        self.gapped = False
        self.last_sent = 0
        self.delivered = 0
        self.closed = threading.Event()

    def matches(self, event: Event) -> bool:
        if self.kinds is not None and event.kind not in self.kinds:
            return False
        if self.session_id is not None and event.session_id != self.session_id:
            return False
        return True

    def offer(self, event: Event) -> bool:
        """Non-blocking enqueue; marks the subscriber gapped when full."""
        if self.gapped or self.closed.is_set() or not self.matches(event):
            return False
        try:
            self.queue.put_nowait(event)
            return True
        except queue.Full:
            self.gapped = True
            return False

    def next_event(self, timeout: float) -> Event | None:
        """Next in-order event from the buffer, skipping already-sent ids
        (an id can arrive twice when live delivery races a cursor backfill)."""
        try:
            event = self.queue.get(timeout=timeout)
        except queue.Empty:
            return None
        while event.event_id <= self.last_sent:
            try:
                event = self.queue.get_nowait()
            except queue.Empty:
                return None
        self.last_sent = event.event_id
        self.delivered += 1
        return event


class FeedHub:
    """Fan-out from the store sink to all live subscribers.

    publish() never blocks: a full subscriber buffer marks that subscriber
    gapped (it will be sent a gap notice and disconnected by its own serve
    loop), so intake latency is independent of client speed.
    """

    def __init__(self, queue_size: int = 1024) -> None:
        self.queue_size = queue_size
        self._subs: dict[str, FeedSubscriber] = {}
        self._lock = threading.Lock()

    def subscribe(self, kinds: frozenset[str] | None = None,
                  session_id: str | None = None) -> FeedSubscriber:
        sub = FeedSubscriber(kinds, session_id, self.queue_size)
        with self._lock:
            self._subs[sub.client_id] = sub
        return sub

    def unsubscribe(self, sub: FeedSubscriber) -> None:
        sub.closed.set()
        with self._lock:
            self._subs.pop(sub.client_id, None)

    def publish(self, event: Event) -> int:
        with self._lock:
            subs = list(self._subs.values())
        return sum(1 for sub in subs if sub.offer(event))

    def subscriber_count(self) -> int:
        with self._lock:
            return len(self._subs)


class SessionIndex:
    """Sessions derived from the event log (created/archived lifecycle)."""

    def __init__(self) -> None:
        self._sessions: dict[str, dict] = {}
        self._order: list[str] = []
        self._lock = threading.Lock()

    def apply(self, event: Event) -> None:
        if event.session_id is None:
            return
        with self._lock:
            if event.kind == "session_created":
                doc = {
                    "session_id": event.session_id, "state": "active",
                    "started_at": event.ts, "ended_at": None,
                    "service": event.body.get("service"),
                    "source": event.body.get("source"),
                    "env_id": event.body.get("env_id"),
                    "template": event.body.get("template"),
                    "net_identity": event.body.get("net_identity"),
                    "artifact_refs": None,
                }
                self._sessions[event.session_id] = doc
                self._order.append(event.session_id)
            elif event.kind == "session_archived":
                doc = self._sessions.setdefault(
                    event.session_id, {"session_id": event.session_id})
                doc["state"] = "archived"
                doc["ended_at"] = event.ts
                doc["artifact_refs"] = event.body.get("artifact_refs")
                session = event.body.get("session", {})
                for key in ("service", "source", "env_id", "started_at"):
                    doc.setdefault(key, session.get(key))
                if event.session_id not in self._order:
                    self._order.append(event.session_id)

    def list(self) -> list[dict]:
        with self._lock:
            return [dict(self._sessions[sid]) for sid in self._order]

    def get(self, session_id: str) -> dict | None:
        with self._lock:
            doc = self._sessions.get(session_id)
            return dict(doc) if doc else None


# -- HTTP plumbing -----------------------------------------------------------

def _read_http_request(conn: socket.socket) -> tuple[str, str, dict] | None:
    """Parse one request head; returns (method, target, headers)."""
    buf = bytearray()
    while b"\r\n\r\n" not in buf:
        if len(buf) > MAX_HTTP_HEADER:
            raise MonitorError("oversized request head")
        chunk = conn.recv(4096)
        if not chunk:
            return None
        buf.extend(chunk)
    head = bytes(buf).split(b"\r\n\r\n", 1)[0].decode("latin-1")
    lines = head.split("\r\n")
    parts = lines[0].split()
    if len(parts) != 3:
        raise MonitorError(f"bad request line: {lines[0]!r}")
    method, target = parts[0], parts[1]
    headers: dict[str, str] = {}
    for line in lines[1:]:
        if ":" in line:
            name, value = line.split(":", 1)
            headers[name.strip().lower()] = value.strip()
    return method, target, headers


_CORS = (b"Access-Control-Allow-Origin: *\r\n"
         b"Access-Control-Allow-Methods: GET, OPTIONS\r\n"
         b"Access-Control-Allow-Headers: Content-Type\r\n")

_STATUS_TEXT = {200: "OK", 204: "No Content", 400: "Bad Request",
                404: "Not Found", 405: "Method Not Allowed",
                426: "Upgrade Required", 500: "Internal Server Error"}


def _respond(conn: socket.socket, status: int, body: bytes = b"",
             content_type: str = "application/json") -> None:
    reason = _STATUS_TEXT.get(status, "OK")
    head = (f"HTTP/1.1 {status} {reason}\r\n"
            f"Content-Type: {content_type}\r\n"
            f"Content-Length: {len(body)}\r\n"
            f"Connection: close\r\n").encode("latin-1")
    conn.sendall(head + _CORS + b"\r\n" + body)


def _respond_json(conn: socket.socket, doc: dict, status: int = 200) -> None:
    _respond(conn, status, json.dumps(doc, sort_keys=True).encode("utf-8"))


def _error_json(conn: socket.socket, status: int, message: str) -> None:
    _respond_json(conn, {"error": message}, status=status)


# -- the service ---------------------------------------------------------------

class Monitor:
    """Serves the feed and the read API for one orchestrator's stores."""

    def __init__(self, orch, host: str = "127.0.0.1", port: int = 0,
                 queue_size: int = 1024) -> None:
        self.orch = orch
        self.store = orch.store
        self.host = host
        self.port = port
        self.hub = FeedHub(queue_size=queue_size)
        self.index = SessionIndex()
        for event in self.store.scan():
            self.index.apply(event)
        self.store.add_sink(self._on_event)
        self._sock: socket.socket | None = None
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    # the store invokes sinks only after the event is durable, so everything
    # entering the hub is already readable from the store.
    def _on_event(self, event: Event) -> None:
        self.index.apply(event)
        self.broadcast(event)

    def broadcast(self, event: Event) -> int:
        """Offer one stored event to every live subscription; returns the
        number of subscriber buffers it entered."""
        return self.hub.publish(event)

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> tuple[str, int]:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((self.host, self.port))
        sock.listen(64)
        sock.settimeout(0.2)
        self._sock = sock
        self.port = sock.getsockname()[1]
        thread = threading.Thread(target=self._accept_loop,
                                  name="monitor-accept", daemon=True)
        thread.start()
        self._threads.append(thread)
        log.info("monitor listening on %s:%d", self.host, self.port)
        return self.host, self.port

    def stop(self) -> None:
        self._stop.set()
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
        for thread in self._threads:
            thread.join(timeout=2.0)

    def _accept_loop(self) -> None:
        assert self._sock is not None
        while not self._stop.is_set():
            try:
                conn, _addr = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            thread = threading.Thread(target=self._handle_conn, args=(conn,),
                                      daemon=True)
            thread.start()

    # -- connection handling -------------------------------------------------

    def _handle_conn(self, conn: socket.socket) -> None:
        try:
            conn.settimeout(10.0)
            request = _read_http_request(conn)
            if request is None:
                return
            method, target, headers = request
            split = urlsplit(target)
            path = unquote(split.path)
            params = {k: v[-1] for k, v in parse_qs(split.query).items()}
            if method == "OPTIONS":
                _respond(conn, 204)
                return
            if method != "GET":
                _error_json(conn, 405, "GET only")
                return
            if path == "/feed":
                if headers.get("upgrade", "").lower() != "websocket":
                    _error_json(conn, 426, "feed requires a websocket upgrade")
                    return
                self._serve_feed(conn, headers, params)
                return
            self._serve_read(conn, path, params)
        except MonitorError as exc:
            try:
                _error_json(conn, 400, str(exc))
            except OSError:
                pass
        except OSError:
            pass
        except Exception:
            log.exception("request handling failed")
            try:
                _error_json(conn, 500, "internal error")
            except OSError:
                pass
        finally:
            try:
                conn.close()
            except OSError:
                pass

    # -- feed ---------------------------------------------------------------

    def open_subscription(self, kinds: frozenset[str] | None = None,
                          session_id: str | None = None,
                          cursor: int | None = None,
                          ) -> tuple[FeedSubscriber, list[Event]]:
        """Register a subscription; returns it plus the backfill events owed
        for the given cursor (already marked as sent on the subscriber)."""
        sub = self.hub.subscribe(kinds, session_id)
        backfill: list[Event] = []
        if cursor is not None:
            for event in self.store.after(cursor):
                if sub.matches(event):
                    backfill.append(event)
                    sub.last_sent = event.event_id
        return sub, backfill

    def _serve_feed(self, conn: socket.socket, headers: dict,
                    params: dict) -> None:
        key = headers.get("sec-websocket-key")
        if not key:
            _error_json(conn, 400, "missing Sec-WebSocket-Key")
            return
        kinds = None
        if params.get("kinds"):
            kinds = frozenset(k for k in params["kinds"].split(",") if k)
        session_id = params.get("session") or None
        cursor = int(params["cursor"]) if "cursor" in params else None

        conn.sendall(
            b"HTTP/1.1 101 Switching Protocols\r\n"
            b"Upgrade: websocket\r\nConnection: Upgrade\r\n"
            b"Sec-WebSocket-Accept: " + ws_accept_value(key).encode("ascii")
            + b"\r\n\r\n")

        sub, backfill = self.open_subscription(kinds, session_id, cursor)
        send_lock = threading.Lock()

        def send(data: bytes) -> None:
            with send_lock:
                conn.sendall(data)

        def read_client() -> None:
            # control frames only; a close (or EOF) ends the subscription
            parser = FrameParser()
            try:
                while not sub.closed.is_set():
                    data = conn.recv(4096)
                    if not data:
                        return
                    for opcode, payload in parser.feed(data):
                        if opcode == OP_CLOSE:
                            try:
                                send(encode_close())
                            except OSError:
                                pass
                            return
                        if opcode == OP_PING:
                            send(encode_frame(OP_PONG, payload))
            except (OSError, MonitorError):
                pass
            finally:
                sub.closed.set()

        try:
            # delivery paces on the client socket, not on a poll interval, so
            # a fast client drains at wire speed; a stalled one blocks only
            # its own serve thread while its buffer overflow marks the gap.
            conn.settimeout(None)
            send(encode_text({"v": 1, "ctl": "hello",
                              "cursor": self.store.head_id(),
                              "client_id": sub.client_id}))
            for event in backfill:
                send(encode_text(event.to_doc()))
                sub.delivered += 1
            reader = threading.Thread(target=read_client, daemon=True)
            reader.start()
            while not self._stop.is_set() and not sub.closed.is_set():
                event = sub.next_event(timeout=0.1)
                if event is not None:
                    send(encode_text(event.to_doc()))
                if sub.gapped and sub.queue.empty():
                    send(encode_text({"v": 1, "ctl": "gap",
                                      "last_event_id": sub.last_sent}))
                    send(encode_close(1008))
                    return
        except (OSError, MonitorError):
            pass
        finally:
            self.hub.unsubscribe(sub)

    # -- read API -------------------------------------------------------------

    def _serve_read(self, conn: socket.socket, path: str, params: dict) -> None:
        parts = [p for p in path.split("/") if p]
        if path == "/":
            _respond_json(conn, {"service": "trapline-monitor", "v": 1,
                                 "head": self.store.head_id(),
                                 "sessions": len(self.index.list())})
        elif parts == ["sessions"]:
            _respond_json(conn, {"sessions": self.index.list()})
        elif len(parts) == 2 and parts[0] == "sessions":
            doc = self.index.get(parts[1])
            if doc is None:
                _error_json(conn, 404, f"unknown session {parts[1]}")
            else:
                _respond_json(conn, doc)
        elif len(parts) == 3 and parts[0] == "sessions" and parts[2] == "history":
            try:
                history = self.orch.vault.history(parts[1])
            except VaultError:
                history = []
            if not history and self.index.get(parts[1]) is None:
                _error_json(conn, 404, f"unknown session {parts[1]}")
                return
            _respond_json(conn, {"session_id": parts[1],
                                 "commits": [c.to_doc() for c in history]})
        elif len(parts) == 2 and parts[0] == "commits":
            try:
                commit = self.orch.vault.get_commit(parts[1])
            except VaultError:
                _error_json(conn, 404, f"unknown commit {parts[1]}")
                return
            _respond_json(conn, commit.to_doc())
        elif len(parts) == 2 and parts[0] == "blobs":
            try:
                data = self.orch.vault.blobs.get(parts[1])
            except VaultError:
                _error_json(conn, 404, f"unknown blob {parts[1]}")
                return
            _respond(conn, 200, data, content_type="application/octet-stream")
        elif len(parts) == 2 and parts[0] == "traces":
            self._serve_trace(conn, parts[1])
        elif len(parts) == 2 and parts[0] == "snapshots":
            self._serve_snapshot(conn, parts[1])
        elif parts == ["events"]:
            kinds = None
            if params.get("kinds"):
                kinds = frozenset(k for k in params["kinds"].split(",") if k)
            q = Query(session_id=params.get("session") or None,
                      kinds=kinds,
                      ts_min=float(params["ts_min"]) if "ts_min" in params else None,
                      ts_max=float(params["ts_max"]) if "ts_max" in params else None)
            events = self.store.query(q)
            if "after" in params:
                # the cursor narrows the candidates, so it must apply
                # before the limit: "the first N events past the cursor"
                floor = int(params["after"])
                events = [e for e in events if e.event_id > floor]
            limit = int(params.get("limit", 0))
            if limit:
                events = events[:limit]
            _respond_json(conn, {"events": [e.to_doc() for e in events]})
        elif parts == ["stats"]:
            day = params.get("day")
            if not day:
                _error_json(conn, 400, "stats requires ?day=YYYY-MM-DD")
                return
            stats = self.store.stats(day)
            _respond_json(conn, stats.to_doc())
        else:
            _error_json(conn, 404, f"no route for {path}")

    def _serve_trace(self, conn: socket.socket, trace_id: str) -> None:
        try:
            tlog = self.orch.tracer.get_log(trace_id)
        except TracerError:
            _error_json(conn, 404, f"unknown trace {trace_id}")
            return
        _respond_json(conn, {
            "trace_id": tlog.trace_id, "session_id": tlog.session_id,
            "command_line": tlog.command_line,
            "image_digest": tlog.exec_digest, "sealed": tlog.sealed,
            "events": [e.to_doc() for e in tlog.events],
            "snapshots": [{"seq": r.seq, "snapshot_id": r.snapshot_id,
                           "request_id": r.request_id, "at": r.noticed_at}
                          for r in tlog.snapshot_refs],
            "gaps": list(tlog.gaps),
        })

    def _serve_snapshot(self, conn: socket.socket, snapshot_id: str) -> None:
        from .checkpointd import CheckpointError
        try:
            snap = self.orch.snapshots.fetch(snapshot_id)
        except CheckpointError:
            _error_json(conn, 404, f"unknown snapshot {snapshot_id}")
            return
        _respond_json(conn, {
            "snapshot_id": snap.snapshot_id, "request_id": snap.request_id,
            "taken_at": snap.taken_at, "registers": snap.registers,
            "regions": [{"base": r.base, "size": r.size, "perms": r.perms,
                         "content_b64": base64.b64encode(r.content).decode("ascii")}
                        for r in snap.regions],
            "descriptors": [{"number": d.number, "kind": d.kind,
                             "target": d.target} for d in snap.descriptors],
        })
