"""Command-line front end.

    trapline serve --config gateway.conf          run listeners + monitor
    trapline replay --template DIR --script FILE  run a scenario, no network
    trapline fslog SESSION                        commit chain of a session
    trapline fsdiff A B                           changed paths between commits
    trapline fscheckout COMMIT DEST               materialize a commit
    trapline pcapinfo FILE                        capture record/byte totals
    trapline tracedump TRACE_ID                   pretty-print a trace log
    trapline snapshot show SNAPSHOT_ID            dump registers/regions/fds
    trapline events query [--kind K] [--session S]
    trapline events stats --day YYYY-MM-DD
    trapline checkpointd serve --endpoint EP --state-dir DIR

Artifact commands read the data directory (--data-dir, default
./trapline-data or $TRAPLINE_DATA).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import signal
import sys
import threading
from pathlib import Path

from .checkpointd import (CheckpointCore, CheckpointDaemon, CheckpointError,
                          FileStateProvider, SnapshotStore)
from .clock import SimClock
from .eventstore import EventStore, Query, StoreError
from .fsvault import Vault, VaultError
from .gateway import ConfigError, Gateway, load_config
from .monitor import Monitor
from .netcap import CaptureError, read_pcap
from .orchestrator import Orchestrator, OrchestratorConfig
from .sandbox import SandboxError, load_template_dir
from .script import ScriptError, load_script
from .tracer import TracerError, read_trace_log


def _data_dir(args) -> Path:
    return Path(args.data_dir or os.environ.get("TRAPLINE_DATA",
                                                "./trapline-data"))


def _vault(args) -> Vault:
    return Vault(_data_dir(args) / "vault")


# -- serve ---------------------------------------------------------------------

def cmd_serve(args) -> int:
    try:
        config = load_config(args.config)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.listen:
        config = dataclasses.replace(config, listen_host=args.listen)

    orch = Orchestrator(OrchestratorConfig(
        data_dir=Path(config.data_dir), pool_target=config.pool_target))
    try:
        for template_dir in config.template_dirs:
            orch.register_template(load_template_dir(template_dir))
        config.validate_templates(orch.sandbox.template_ids())
    except (SandboxError, ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        orch.shutdown()
        return 2
    orch.warm_all()

    monitor = None
    if config.monitor_port:
        monitor = Monitor(orch, host=config.listen_host,
                          port=config.monitor_port)
        host, port = monitor.start()
        print(f"monitor on http://{host}:{port} (feed at /feed)")

    gateway = Gateway(orch, config)
    try:
        ports = gateway.start()
    except OSError as exc:
        print(f"bind failed: {exc}", file=sys.stderr)
        if monitor:
            monitor.stop()
        orch.shutdown()
        return 2
    for name, port in ports.items():
        print(f"service {name} on {config.listen_host}:{port}")

    stop = threading.Event()
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    try:
        while not stop.wait(0.5):
            pass
    finally:
        gateway.stop()
        if monitor:
            monitor.stop()
        orch.shutdown()
    return 0


# -- replay ----------------------------------------------------------------------

def cmd_replay(args) -> int:
    try:
        template = load_template_dir(args.template)
        script = load_script(args.script)
    except (SandboxError, ScriptError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    orch = Orchestrator(
        OrchestratorConfig(data_dir=_data_dir(args), pool_target=1),
        clock=SimClock())
    try:
        orch.register_template(template)
        record, events = orch.replay(template.template_id, script,
                                     source=args.source, service=args.service)
    finally:
        orch.shutdown()

    if args.json:
        print(json.dumps({"record": record.to_doc(),
                          "events": [e.to_doc() for e in events]},
                         sort_keys=True, indent=2))
        return 0
    session = record.session
    refs = record.artifact_refs
    print(f"session  {session.session_id} ({session.service} from {session.source})")
    print(f"events   {len(events)}")
    print(f"commits  {len(refs['commits'])} "
          f"({refs['commit_range'][0][:12]}..{refs['commit_range'][-1][:12]})")
    print(f"pcap     {refs['pcap']} ({refs['pcap_packets']} packets, "
          f"{refs['pcap_bytes']} bytes)")
    print(f"traces   {len(refs['traces'])} {refs['traces']}")
    print(f"snapshots {len(refs['snapshots'])} {refs['snapshots']}")
    return 0


# -- filesystem history ------------------------------------------------------------

def cmd_fslog(args) -> int:
    try:
        history = _vault(args).history(args.session)
    except VaultError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if not history:
        print(f"no history for session {args.session}", file=sys.stderr)
        return 1
    for seq, commit in enumerate(history):
        print(f"{seq:4d}  {commit.commit_id[:16]}  {commit.ts:.6f}  "
              f"{len(commit.tree):4d} paths  {commit.message}")
    return 0


def cmd_fsdiff(args) -> int:
    try:
        change = _vault(args).diff(args.a, args.b)
    except VaultError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for path in sorted(change.added):
        print(f"A {path}")
    for path in sorted(change.modified):
        print(f"M {path}")
    for path in sorted(change.deleted):
        print(f"D {path}")
    return 0


def cmd_fscheckout(args) -> int:
    try:
        dest = _vault(args).checkout(args.commit, args.dest)
    except VaultError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(dest)
    return 0


# -- pcap ---------------------------------------------------------------------------

def cmd_pcapinfo(args) -> int:
    try:
        header, records = read_pcap(args.file)
    except (CaptureError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    captured = sum(r.incl_len for r in records)
    original = sum(r.orig_len for r in records)
    vmaj, vmin = header["version"]
    print(f"version    {vmaj}.{vmin}")
    print(f"linktype   {header['linktype']}")
    print(f"snaplen    {header['snaplen']}")
    print(f"records    {len(records)}")
    print(f"captured   {captured} bytes")
    print(f"original   {original} bytes")
    if args.verbose:
        for i, rec in enumerate(records):
            print(f"  {i:4d}  {rec.ts_sec}.{rec.ts_usec:06d}  "
                  f"incl={rec.incl_len} orig={rec.orig_len}")
    return 0


# -- traces and snapshots --------------------------------------------------------------

def cmd_tracedump(args) -> int:
    path = _data_dir(args) / "traces" / f"{args.trace_id}.tlog"
    if not path.exists():
        print(f"error: no trace log {path}", file=sys.stderr)
        return 1
    try:
        header, records = read_trace_log(path)
    except TracerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"trace    {header['trace_id']} (session {header['session_id']})")
    print(f"command  {header['command_line']}")
    print(f"image    {header['image_digest']}")
    for rec in records:
        tag = rec.get("t")
        if tag == "ev":
            print(f"  {rec['seq']:6d}  {rec['kind']:<11s} "
                  f"{rec['address']:#014x}  {rec['detail']}")
        elif tag == "snap":
            print(f"  ------  snapshot {rec['snapshot_id']} "
                  f"(request {rec['request_id']}) after seq {rec['seq']}")
        elif tag == "gap":
            print(f"  ------  GAP after seq {rec['seq']}: {rec['reason']}")
        elif tag == "seal":
            print(f"  sealed: {rec['events']} events, "
                  f"{rec['snapshots']} snapshots")
    return 0


def _hexline(data: bytes, offset: int) -> str:
    chunk = data[offset:offset + 16]
    hexpart = " ".join(f"{b:02x}" for b in chunk)
    text = "".join(chr(b) if 32 <= b < 127 else "." for b in chunk)
    return f"    {offset:08x}  {hexpart:<47s}  |{text}|"


def cmd_snapshot_show(args) -> int:
    store = SnapshotStore(_data_dir(args) / "snapshots")
    try:
        snap = store.fetch(args.snapshot_id)
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"snapshot {snap.snapshot_id} (request {snap.request_id}) "
          f"taken at {snap.taken_at:.6f}")
    print("registers:")
    for name in sorted(snap.registers):
        print(f"    {name:<4s} {snap.registers[name]:#018x}")
    print(f"regions ({len(snap.regions)}):")
    for region in snap.regions:
        print(f"  {region.base:#014x}  {region.size:8d} bytes  {region.perms}")
        for offset in range(0, min(len(region.content), args.head), 16):
            print(_hexline(region.content, offset))
    print(f"descriptors ({len(snap.descriptors)}):")
    for desc in snap.descriptors:
        print(f"    fd {desc.number}: {desc.kind} -> {desc.target}")
    return 0


# -- events -------------------------------------------------------------------------

def cmd_events_query(args) -> int:
    try:
        store = EventStore(_data_dir(args) / "events")
    except StoreError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    kinds = frozenset(args.kind) if args.kind else None
    q = Query(session_id=args.session, kinds=kinds, limit=args.limit)
    for event in store.query(q):
        print(event.to_json())
    store.close()
    return 0


def cmd_events_stats(args) -> int:
    try:
        store = EventStore(_data_dir(args) / "events")
    except StoreError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    stats = store.stats(args.day)
    store.close()
    print(json.dumps(stats.to_doc(), sort_keys=True, indent=2))
    return 0


# -- checkpoint daemon -----------------------------------------------------------------

def cmd_checkpointd_serve(args) -> int:
    provider = FileStateProvider(args.state_dir)
    store = SnapshotStore(args.snapshot_dir or
                          (_data_dir(args) / "snapshots"))
    daemon = CheckpointDaemon(CheckpointCore(store, provider), args.endpoint)
    try:
        bound = daemon.start()
    except OSError as exc:
        print(f"bind failed: {exc}", file=sys.stderr)
        return 2
    print(f"checkpointd on {bound}")
    stop = threading.Event()
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    try:
        while not stop.wait(0.5):
            pass
    finally:
        daemon.stop()
    return 0


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trapline",
        description="honeypot session orchestration and forensics toolkit")
    parser.add_argument("--data-dir", default=None,
                        help="artifact directory (default ./trapline-data)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the gateway listeners and monitor")
    p.add_argument("--config", required=True)
    p.add_argument("--listen", default=None, help="override listen address")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("replay", help="run a scripted scenario end-to-end")
    p.add_argument("--template", required=True, help="template directory")
    p.add_argument("--script", required=True, help="attack script file")
    p.add_argument("--service", default="ssh")
    p.add_argument("--source", default="203.0.113.9:51000")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("fslog", help="print a session's commit chain")
    p.add_argument("session")
    p.set_defaults(func=cmd_fslog)

    p = sub.add_parser("fsdiff", help="paths changed between two commits")
    p.add_argument("a")
    p.add_argument("b")
    p.set_defaults(func=cmd_fsdiff)

    p = sub.add_parser("fscheckout", help="materialize a commit to a directory")
    p.add_argument("commit")
    p.add_argument("dest")
    p.set_defaults(func=cmd_fscheckout)

    p = sub.add_parser("pcapinfo", help="record and byte totals of a capture")
    p.add_argument("file")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_pcapinfo)

    p = sub.add_parser("tracedump", help="pretty-print a trace log")
    p.add_argument("trace_id")
    p.set_defaults(func=cmd_tracedump)

    p = sub.add_parser("snapshot", help="snapshot inspection")
    snap_sub = p.add_subparsers(dest="snapshot_command", required=True)
    ps = snap_sub.add_parser("show")
    ps.add_argument("snapshot_id")
    ps.add_argument("--head", type=int, default=64,
                    help="bytes of each region to hexdump")
    ps.set_defaults(func=cmd_snapshot_show)

    p = sub.add_parser("events", help="query the event store")
    ev_sub = p.add_subparsers(dest="events_command", required=True)
    pq = ev_sub.add_parser("query")
    pq.add_argument("--kind", action="append", default=None)
    pq.add_argument("--session", default=None)
    pq.add_argument("--limit", type=int, default=0)
    pq.set_defaults(func=cmd_events_query)
    pst = ev_sub.add_parser("stats")
    pst.add_argument("--day", required=True)
    pst.set_defaults(func=cmd_events_stats)

    p = sub.add_parser("checkpointd", help="standalone checkpoint daemon")
    cd_sub = p.add_subparsers(dest="checkpointd_command", required=True)
    pc = cd_sub.add_parser("serve")
    pc.add_argument("--endpoint", required=True,
                    help='"host:port" or a unix socket path')
    pc.add_argument("--state-dir", required=True,
                    help="directory of <pid>.json process-state files")
    pc.add_argument("--snapshot-dir", default=None)
    pc.set_defaults(func=cmd_checkpointd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
