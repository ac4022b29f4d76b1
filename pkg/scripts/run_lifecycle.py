#!/usr/bin/env python3
"""Replay the bundled captured-malware scenario and walk its evidence.

Runs scenarios/malware_lifecycle.attack through a fresh orchestrator, then
reads every artifact back the way an analyst would: the commit chain, the
recovered implant binary, the capture file's outbound flows, the instruction
trace with its snapshot markers, and the plaintext strings that only exist
in memory after the malware decrypts them.

    python scripts/run_lifecycle.py [--data-dir DIR] [--keep]

Without --keep the artifact directory is a temp dir wiped at exit.
"""
from __future__ import annotations

import argparse
import shutil
import sys
import tempfile
import time
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO / "src"))

from trapline.checkpointd import SnapshotStore
from trapline.clock import SimClock
from trapline.fsvault import Vault
from trapline.netcap import read_pcap
from trapline.orchestrator import Orchestrator, OrchestratorConfig
from trapline.sandbox import load_template_dir
from trapline.script import load_script
from trapline.tracer import read_trace_log

SCENARIO = REPO / "scenarios" / "malware_lifecycle.attack"
TEMPLATE = REPO / "scenarios" / "templates" / "linux-basic"


def printable_strings(data: bytes, floor: int = 4) -> list[str]:
    """ASCII runs of at least `floor` chars, the classic triage extraction."""
    found, run = [], bytearray()
    for byte in data + b"\0":
        if 32 <= byte < 127:
            run.append(byte)
            continue
        if len(run) >= floor:
            found.append(run.decode("ascii"))
        run.clear()
    return found


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--data-dir", default=None,
                        help="artifact directory (default: temp dir)")
    parser.add_argument("--keep", action="store_true",
                        help="leave artifacts in place at exit")
    args = parser.parse_args()

    data_dir = Path(args.data_dir) if args.data_dir else \
        Path(tempfile.mkdtemp(prefix="trapline-lifecycle-"))
    template = load_template_dir(TEMPLATE)
    script = load_script(SCENARIO)

    orch = Orchestrator(OrchestratorConfig(data_dir=data_dir, pool_target=1),
                        clock=SimClock())
    started = time.perf_counter()
    try:
        orch.register_template(template)
        record, events = orch.replay(
            template.template_id, script,
            source="203.0.113.9:51000", service="ssh")
    finally:
        orch.shutdown()
    elapsed = time.perf_counter() - started

    session = record.session
    refs = record.artifact_refs
    print(f"== session {session.session_id}")
    print(f"   {session.service} from {session.source}, "
          f"{len(events)} events, replay took {elapsed:.2f}s")

    # -- filesystem history: watch the implant appear and vanish
    vault = Vault(data_dir / "vault")
    history = vault.history(session.session_id)
    print(f"\n== filesystem history ({len(history)} commits)")
    for seq, commit in enumerate(history):
        print(f"   {seq}  {commit.commit_id[:16]}  {commit.message}")

    implant_path = "/tmp/.hidden/svc"
    pre_delete = max(
        (c for c in history if implant_path in c.tree),
        key=lambda c: c.ts)
    recovered_dir = vault.checkout(pre_delete.commit_id,
                                   data_dir / "recovered")
    implant = (Path(recovered_dir) / implant_path.lstrip("/")).read_bytes()
    print(f"\n== recovered implant from commit {pre_delete.commit_id[:16]}")
    print(f"   {implant_path}: {len(implant)} bytes, "
          f"header {implant[:4].hex()}, strings {printable_strings(implant)}")
    gone = vault.checkout(history[-1].commit_id, data_dir / "final")
    assert not (Path(gone) / implant_path.lstrip("/")).exists()
    print("   (absent from the final commit: the self-delete is real)")

    # -- capture: the outbound FTP exfiltration flow
    _, rows = read_pcap(Path(refs["pcap"]))
    print(f"\n== capture {Path(refs['pcap']).name} "
          f"({refs['pcap_packets']} packets, {refs['pcap_bytes']} bytes)")
    for row in rows:
        text = row.payload[40:]       # past the synthesized IPv4+TCP framing
        if b"USER" in text or b"STOR" in text:
            print(f"   {text.decode('ascii', 'replace').strip()!r}")

    # -- trace: instruction flow, snapshots at each memory write
    trace_id = refs["traces"][0]
    header, trace_rows = read_trace_log(
        data_dir / "traces" / f"{trace_id}.tlog")
    print(f"\n== trace {trace_id} of {header['command_line']!r}")
    snapshot_ids = []
    for row in trace_rows:
        if row.get("t") == "ev":
            print(f"   {row['seq']:3d}  {row['kind']:<11s} "
                  f"{row['address']:#014x}  {row['detail']}")
        elif row.get("t") == "snap":
            snapshot_ids.append(row["snapshot_id"])
            print(f"        snapshot {row['snapshot_id']} "
                  f"after seq {row['seq']}")

    # -- snapshots: the decrypted strings exist only in memory
    store = SnapshotStore(data_dir / "snapshots")
    final = store.fetch(snapshot_ids[-1])
    print(f"\n== snapshot {final.snapshot_id} (after the decryption write)")
    for region in final.regions:
        strings = printable_strings(region.content)
        if strings:
            print(f"   {region.base:#014x} {region.perms}: {strings}")

    if args.keep or args.data_dir:
        print(f"\nartifacts kept in {data_dir}")
    else:
        shutil.rmtree(data_dir, ignore_errors=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
