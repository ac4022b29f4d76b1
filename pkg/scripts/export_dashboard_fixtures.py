#!/usr/bin/env python3
"""Capture real monitor output as fixtures for the dashboard test suite.

Replays the bundled malware scenario, stands up the monitor, and records
what an actual client sees: every read-endpoint response for the session's
artifacts, plus a complete /feed transcript (hello frame and every event
frame, in wire order) taken over a real WebSocket connection with a
cursor=0 backfill.

The dashboard tests replay these documents through fetch/WebSocket fakes,
so every rendered value they assert against originated from a live server.

    python scripts/export_dashboard_fixtures.py [--out FILE]
"""
from __future__ import annotations

import argparse
import base64
import json
import shutil
import socket
import sys
import tempfile
import urllib.request
from datetime import datetime, timezone
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO / "src"))

from trapline.clock import SimClock
from trapline.monitor import OP_TEXT, FrameParser, Monitor, encode_close
from trapline.orchestrator import Orchestrator, OrchestratorConfig
from trapline.sandbox import load_template_dir
from trapline.script import load_script

SCENARIO = REPO / "scenarios" / "malware_lifecycle.attack"
TEMPLATE = REPO / "scenarios" / "templates" / "linux-basic"


def get_json(base: str, target: str) -> dict | list:
    with urllib.request.urlopen(base + target) as resp:
        return json.loads(resp.read())


def get_raw(base: str, target: str) -> bytes:
    with urllib.request.urlopen(base + target) as resp:
        return resp.read()


def feed_transcript(host: str, port: int, head: int) -> list[dict]:
    """Real /feed connection: handshake, cursor=0 backfill, close."""
    sock = socket.create_connection((host, port), timeout=10.0)
    key = base64.b64encode(b"fixture-export-0").decode("ascii")
    sock.sendall((f"GET /feed?cursor=0 HTTP/1.1\r\n"
                  f"Host: {host}:{port}\r\n"
                  f"Upgrade: websocket\r\nConnection: Upgrade\r\n"
                  f"Sec-WebSocket-Key: {key}\r\n"
                  f"Sec-WebSocket-Version: 13\r\n\r\n").encode("ascii"))
    raw = b""
    while b"\r\n\r\n" not in raw:
        raw += sock.recv(4096)
    head_end = raw.index(b"\r\n\r\n") + 4
    assert b" 101 " in raw[:head_end], raw[:head_end]

    parser = FrameParser()
    frames: list[dict] = []
    pending = list(parser.feed(raw[head_end:]))
    while True:
        for opcode, payload in pending:
            if opcode == OP_TEXT:
                frames.append(json.loads(payload))
        pending = []
        docs = [f for f in frames if "event_id" in f]
        if docs and docs[-1]["event_id"] >= head:
            break
        pending = list(parser.feed(sock.recv(65536)))
    # masked zero-payload close frame, then drop the connection
    sock.sendall(bytes([0x88, 0x80]) + b"\x00\x00\x00\x00")
    sock.close()
    return frames


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default=str(REPO / "frontend" / "fixtures" /
                                             "lifecycle.json"))
    args = parser.parse_args()

    data_dir = Path(tempfile.mkdtemp(prefix="trapline-fixtures-"))
    orch = Orchestrator(OrchestratorConfig(data_dir=data_dir, pool_target=1),
                        clock=SimClock())
    monitor = None
    try:
        orch.register_template(load_template_dir(TEMPLATE))
        record, events = orch.replay(
            load_template_dir(TEMPLATE).template_id, load_script(SCENARIO),
            source="203.0.113.9:51000", service="ssh")
        monitor = Monitor(orch)
        host, port = monitor.start()
        base = f"http://{host}:{port}"

        sid = record.session.session_id
        refs = record.artifact_refs
        history = get_json(base, f"/sessions/{sid}/history")
        day = datetime.fromtimestamp(events[0].ts, tz=timezone.utc) \
            .strftime("%Y-%m-%d")

        blobs: dict[str, str] = {}
        commits: dict[str, dict] = {}
        for commit_doc in history["commits"]:
            cid = commit_doc["commit_id"]
            commits[cid] = get_json(base, f"/commits/{cid}")
            for digest in commit_doc["tree"].values():
                if digest not in blobs:
                    raw = get_raw(base, f"/blobs/{digest}")
                    blobs[digest] = base64.b64encode(raw).decode("ascii")

        traces = {tid: get_json(base, f"/traces/{tid}")
                  for tid in refs["traces"]}
        snapshots = {sn: get_json(base, f"/snapshots/{sn}")
                     for sn in refs["snapshots"]}

        fixture = {
            "banner": get_json(base, "/"),
            "sessions": get_json(base, "/sessions"),
            "session": get_json(base, f"/sessions/{sid}"),
            "history": history,
            "commits": commits,
            "blobs": blobs,
            "traces": traces,
            "snapshots": snapshots,
            "events": get_json(base, f"/events?session={sid}"),
            "stats": get_json(base, f"/stats?day={day}"),
            "feed": feed_transcript(host, port, orch.store.head_id()),
            "meta": {
                "session_id": sid,
                "trace_ids": refs["traces"],
                "snapshot_ids": refs["snapshots"],
                "implant_path": "/tmp/.hidden/svc",
                "day": day,
                "head": orch.store.head_id(),
            },
        }
    finally:
        if monitor is not None:
            monitor.stop()
        orch.shutdown()
        shutil.rmtree(data_dir, ignore_errors=True)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(fixture, sort_keys=True, indent=1) + "\n")
    feed = fixture["feed"]
    print(f"wrote {out} ({out.stat().st_size} bytes): "
          f"{len(fixture['history']['commits'])} commits, {len(blobs)} blobs, "
          f"{len(feed)} feed frames "
          f"(hello + {sum(1 for f in feed if 'event_id' in f)} events)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
