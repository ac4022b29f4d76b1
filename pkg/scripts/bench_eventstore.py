#!/usr/bin/env python3
"""Measure event store append throughput and query cost.

Appends synthetic events for a fixed duration, reports the sustained rate,
reopens the store to prove nothing was lost, then times indexed queries
against a full linear scan over the same corpus.

    python scripts/bench_eventstore.py [--seconds N] [--batch N] [--pad N]
"""
from __future__ import annotations

import argparse
import random
import shutil
import sys
import tempfile
import time
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO / "src"))

from trapline.events import KINDS
from trapline.eventstore import EventStore, Query


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seconds", type=float, default=10.0)
    parser.add_argument("--batch", type=int, default=512)
    parser.add_argument("--pad", type=int, default=64,
                        help="bytes of filler per event body")
    args = parser.parse_args()

    root = Path(tempfile.mkdtemp(prefix="trapline-bench-"))
    rng = random.Random(1)
    kinds = sorted(KINDS)
    sessions = [f"ses-{i:04d}" for i in range(16)] + [None]
    pad = "x" * args.pad
    base_ts = 1_700_000_000.0

    store = EventStore(root / "events")
    appended = 0
    started = time.perf_counter()
    while time.perf_counter() - started < args.seconds:
        for _ in range(args.batch):
            store.append(rng.choice(kinds),
                         {"n": appended, "pad": pad},
                         session_id=rng.choice(sessions),
                         ts=base_ts + rng.random() * 86_400)
            appended += 1
    elapsed = time.perf_counter() - started
    head = store.head_id()
    store.close()
    print(f"appended {appended} events in {elapsed:.1f}s "
          f"({appended / elapsed:,.0f}/s), head id {head}")

    reloaded = EventStore(root / "events")
    assert reloaded.head_id() == appended, "loss across reopen"
    print(f"reopened: {reloaded.head_id()} events intact")

    queries = [
        ("one session", Query(session_id="ses-0003")),
        ("one kind", Query(kinds=frozenset({"exec"}))),
        ("kind+session", Query(kinds=frozenset({"fs", "exec"}),
                               session_id="ses-0001")),
        ("time window", Query(ts_min=base_ts + 3_600,
                              ts_max=base_ts + 7_200)),
        ("first 100", Query(limit=100)),
    ]
    scan = list(reloaded.query(Query()))
    for label, q in queries:
        t0 = time.perf_counter()
        hits = list(reloaded.query(q))
        dt = time.perf_counter() - t0
        control = [e for e in scan if q.matches(e)]
        if q.limit:
            control = control[:q.limit]
        assert [e.event_id for e in hits] == [e.event_id for e in control]
        print(f"query {label:<12s} {len(hits):7d} hits in {dt * 1e3:8.2f}ms "
              f"(matches scan)")
    reloaded.close()
    shutil.rmtree(root, ignore_errors=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
