/**
 * Document shapes served by the monitor, as published in its API docs.
 *
 * Every field here mirrors a server-side document verbatim; the dashboard
 * renders these values and never synthesizes its own.
 */

/** One stored event. `event_id` is dense and strictly increasing. */
export interface EventDoc {
  v: number;
  event_id: number;
  ts: number;
  session_id: string | null;
  kind: string;
  body: Record<string, unknown>;
}

/** First frame on every /feed connection. */
export interface HelloFrame {
  v: number;
  ctl: "hello";
  cursor: number;
  client_id: string;
}

/** Sent before the server closes a subscriber that fell behind. */
export interface GapFrame {
  v: number;
  ctl: "gap";
  last_event_id: number;
}

export type CtlFrame = HelloFrame | GapFrame;
export type FeedFrame = EventDoc | CtlFrame;

export function isCtl(frame: FeedFrame): frame is CtlFrame {
  return "ctl" in frame;
}

export function isHello(frame: FeedFrame): frame is HelloFrame {
  return isCtl(frame) && frame.ctl === "hello";
}

export function isGap(frame: FeedFrame): frame is GapFrame {
  return isCtl(frame) && frame.ctl === "gap";
}

export function isEvent(frame: FeedFrame): frame is EventDoc {
  return !isCtl(frame);
}

/** Artifact pointers a finished session leaves behind. */
export interface ArtifactRefs {
  pcap: string;
  pcap_packets: number;
  pcap_bytes: number;
  commit_range: string[];
  commits: string[];
  traces: string[];
  snapshots: string[];
  bytes_in: number;
  bytes_out: number;
}

/** GET /sessions/{id} (and each element of GET /sessions). */
export interface SessionDoc {
  session_id: string;
  source: string;
  service: string;
  env_id: string;
  template: string;
  net_identity: string;
  state: string;
  started_at: number;
  ended_at: number | null;
  artifact_refs: ArtifactRefs;
}

export interface SessionListDoc {
  sessions: SessionDoc[];
}

/** One filesystem commit; `tree` maps absolute path -> content digest. */
export interface CommitDoc {
  commit_id: string;
  parent_id: string | null;
  session_id: string;
  ts: number;
  message: string;
  tree: Record<string, string>;
}

/** GET /sessions/{id}/history, oldest commit first. */
export interface HistoryDoc {
  session_id: string;
  commits: CommitDoc[];
}

export interface TraceEventRow {
  t: "ev";
  seq: number;
  at: number;
  kind: string;
  address: number;
  detail: string;
}

export interface TraceSnapshotRef {
  seq: number;
  at: number;
  snapshot_id: string;
  request_id: string;
}

export interface TraceGap {
  seq: number;
  reason: string;
  at: number;
}

/** GET /traces/{id}. */
export interface TraceDoc {
  trace_id: string;
  session_id: string;
  command_line: string;
  image_digest: string;
  events: TraceEventRow[];
  snapshots: TraceSnapshotRef[];
  gaps: TraceGap[];
  sealed: boolean;
}

export interface SnapshotRegion {
  base: number;
  size: number;
  perms: string;
  content_b64: string;
}

export interface SnapshotDescriptor {
  number: number;
  kind: string;
  target: string;
}

/** GET /snapshots/{id}; region content is base64 of the raw dump. */
export interface SnapshotDoc {
  snapshot_id: string;
  request_id: string;
  taken_at: number;
  registers: Record<string, number>;
  regions: SnapshotRegion[];
  descriptors: SnapshotDescriptor[];
}

/** GET /stats?day=YYYY-MM-DD. */
export interface StatsDoc {
  day: string;
  total: number;
  counts_by_kind: Record<string, number>;
  counts_by_service: Record<string, number>;
  distinct_sources: number;
}

/** GET / — service banner. */
export interface BannerDoc {
  service: string;
  v: number;
  head: number;
  sessions: number;
}

export interface EventListDoc {
  events: EventDoc[];
}
