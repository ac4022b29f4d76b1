/**
 * Pure document-to-text rendering. Every value in every line comes from a
 * server document; these functions only arrange, never invent.
 */
import type { TreeDiff, TreeEntry } from "./timeline.js";
import type {
  EventDoc,
  SessionDoc,
  SnapshotDoc,
  TraceDoc,
} from "./types.js";

function clock(ts: number): string {
  return new Date(ts * 1000).toISOString().slice(11, 19);
}

function str(value: unknown): string {
  if (value === undefined || value === null) return "";
  return typeof value === "string" ? value : JSON.stringify(value);
}

/** The badge an exec row carries, straight from the recorded verdict. */
export function verdictBadge(event: EventDoc): string {
  const verdict = event.body["verdict"];
  if (verdict === "alien") return "[ALIEN]";
  if (verdict === "trusted") return "[trusted]";
  return "";
}

function summarize(event: EventDoc): string {
  const body = event.body;
  switch (event.kind) {
    case "connection":
      return `${str(body["source"])} -> ${str(body["service"])}`;
    case "session_created":
      return `${str(body["service"])} session for ${str(body["source"])}`;
    case "session_archived": {
      const refs = body["artifact_refs"] as
        | { commits?: unknown[]; traces?: unknown[] }
        | undefined;
      return `archived: ${refs?.commits?.length ?? 0} commits, ${refs?.traces?.length ?? 0} traces`;
    }
    case "fs_commit":
      return str(body["message"]);
    case "exec":
      return `${str(body["command_line"])} ${verdictBadge(event)}`.trim();
    case "trace_opened":
      return `trace ${str(body["trace_id"])} on ${str(body["command_line"])}`;
    case "snapshot":
      return `snapshot ${str(body["snapshot_id"])} after seq ${str(body["trigger_seq"])}`;
    case "capture":
      return `capture ${str(body["state"])}`;
    case "degradation":
      return `${str(body["component"])}: ${str(body["reason"])}`;
    default:
      return JSON.stringify(body);
  }
}

/** One feed panel row. */
export function feedRow(event: EventDoc): string {
  const session = event.session_id ?? "-";
  return `#${event.event_id} ${clock(event.ts)} ${event.kind.padEnd(16)} ${session}  ${summarize(event)}`;
}

export function sessionRow(doc: SessionDoc): string {
  const refs = doc.artifact_refs;
  return (
    `${doc.session_id}  ${doc.service} from ${doc.source}  [${doc.state}]  ` +
    `${refs.commits.length} commits, ${refs.pcap_packets} packets, ` +
    `${refs.traces.length} traces, ${refs.snapshots.length} snapshots`
  );
}

/** Timeline tree with diff markers against the previous cursor. */
export function treeLines(entries: TreeEntry[], diff: TreeDiff): string[] {
  const lines = entries.map((entry) => {
    const marker = diff.added.has(entry.path)
      ? "+"
      : diff.modified.has(entry.path)
        ? "~"
        : " ";
    return `${marker} ${entry.path}  ${entry.digest.slice(0, 16)}`;
  });
  for (const path of [...diff.deleted].sort()) {
    lines.push(`- ${path}  (deleted in this commit)`);
  }
  return lines;
}

/** Trace inspector: events interleaved with snapshot and gap markers. */
export function traceLines(doc: TraceDoc): string[] {
  const bySeq = new Map(doc.snapshots.map((s) => [s.seq, s]));
  const gapsBySeq = new Map(doc.gaps.map((g) => [g.seq, g]));
  const lines = [
    `trace ${doc.trace_id} (session ${doc.session_id})` +
      (doc.sealed ? " [sealed]" : ""),
    `command ${doc.command_line}`,
    `image   ${doc.image_digest.slice(0, 24)}…`,
  ];
  for (const event of doc.events) {
    const address = `0x${event.address.toString(16).padStart(12, "0")}`;
    lines.push(
      `  ${String(event.seq).padStart(4)}  ${event.kind.padEnd(11)} ${address}  ${event.detail}`,
    );
    const snap = bySeq.get(event.seq);
    if (snap !== undefined) {
      lines.push(`        ── snapshot ${snap.snapshot_id} (request ${snap.request_id})`);
    }
    const gap = gapsBySeq.get(event.seq);
    if (gap !== undefined) {
      lines.push(`        ── GAP: ${gap.reason}`);
    }
  }
  return lines;
}

export function snapshotHeader(doc: SnapshotDoc): string[] {
  const registers = Object.entries(doc.registers)
    .sort(([a], [b]) => (a < b ? -1 : 1))
    .map(([name, value]) => `${name}=0x${value.toString(16)}`)
    .join(" ");
  return [
    `snapshot ${doc.snapshot_id} (request ${doc.request_id})`,
    `registers ${registers}`,
    `regions ${doc.regions.length}, descriptors ${doc.descriptors.length}`,
  ];
}
