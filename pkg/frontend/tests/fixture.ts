/**
 * Test doubles fed exclusively by recorded server output.
 *
 * fixtures/lifecycle.json is produced by scripts/export_dashboard_fixtures.py
 * in the repository root: it replays the bundled malware scenario against a
 * live monitor and records every read-endpoint response plus a complete
 * /feed transcript taken over a real WebSocket connection. The fakes here
 * serve those documents back under the documented routes and feed
 * semantics, so everything the dashboard renders in these tests originated
 * from the real server.
 */
import { readFileSync } from "node:fs";

import type { ResponseLike } from "../src/api.js";
import type { FeedSocketLike, SocketFactory } from "../src/feed.js";
import type {
  BannerDoc,
  CommitDoc,
  EventDoc,
  HistoryDoc,
  SessionDoc,
  SessionListDoc,
  SnapshotDoc,
  StatsDoc,
  TraceDoc,
} from "../src/types.js";
import { decodeBase64 } from "../src/hexview.js";

export interface Fixture {
  banner: BannerDoc;
  sessions: SessionListDoc;
  session: SessionDoc;
  history: HistoryDoc;
  commits: Record<string, CommitDoc>;
  blobs: Record<string, string>;
  traces: Record<string, TraceDoc>;
  snapshots: Record<string, SnapshotDoc>;
  events: { events: EventDoc[] };
  stats: StatsDoc;
  feed: Array<EventDoc | { ctl: string; [key: string]: unknown }>;
  meta: {
    session_id: string;
    trace_ids: string[];
    snapshot_ids: string[];
    implant_path: string;
    day: string;
    head: number;
  };
}

let cached: Fixture | null = null;

export function loadFixture(): Fixture {
  if (cached === null) {
    const raw = readFileSync(
      new URL("../fixtures/lifecycle.json", import.meta.url),
      "utf-8",
    );
    cached = JSON.parse(raw) as Fixture;
  }
  return cached;
}

/** The transcript's event frames (everything that is not a ctl frame). */
export function feedEvents(fixture: Fixture): EventDoc[] {
  return fixture.feed.filter((frame): frame is EventDoc => !("ctl" in frame));
}

function jsonResponse(doc: unknown): ResponseLike {
  return {
    ok: true,
    status: 200,
    json: () => Promise.resolve(doc),
    arrayBuffer: () => Promise.reject(new Error("json endpoint")),
    text: () => Promise.resolve(JSON.stringify(doc)),
  };
}

function bytesResponse(bytes: Uint8Array): ResponseLike {
  const buffer = bytes.buffer.slice(
    bytes.byteOffset,
    bytes.byteOffset + bytes.byteLength,
  ) as ArrayBuffer;
  return {
    ok: true,
    status: 200,
    json: () => Promise.reject(new Error("binary endpoint")),
    arrayBuffer: () => Promise.resolve(buffer),
    text: () => Promise.reject(new Error("binary endpoint")),
  };
}

function errorResponse(status: number, message: string): ResponseLike {
  return {
    ok: false,
    status,
    json: () => Promise.resolve({ error: message }),
    arrayBuffer: () => Promise.reject(new Error(message)),
    text: () => Promise.resolve(JSON.stringify({ error: message })),
  };
}

/**
 * fetch stand-in serving the recorded responses under the documented
 * routes. Records every URL it is asked for, so tests can assert the
 * client only requests things the API actually names.
 */
export class FakeFetch {
  requested: string[] = [];

  constructor(private readonly fixture: Fixture) {}

  fetch = (url: string): Promise<ResponseLike> => {
    this.requested.push(url);
    return Promise.resolve(this.route(new URL(url)));
  };

  private route(url: URL): ResponseLike {
    const fx = this.fixture;
    const path = url.pathname;
    const sid = fx.meta.session_id;

    if (path === "/") return jsonResponse(fx.banner);
    if (path === "/sessions") return jsonResponse(fx.sessions);
    if (path === `/sessions/${sid}`) return jsonResponse(fx.session);
    if (path === `/sessions/${sid}/history`) return jsonResponse(fx.history);

    const commit = path.match(/^\/commits\/([0-9a-f]+)$/);
    if (commit !== null) {
      const doc = fx.commits[commit[1] as string];
      return doc !== undefined
        ? jsonResponse(doc)
        : errorResponse(404, "no such commit");
    }
    const blob = path.match(/^\/blobs\/([0-9a-f]+)$/);
    if (blob !== null) {
      const b64 = fx.blobs[blob[1] as string];
      return b64 !== undefined
        ? bytesResponse(decodeBase64(b64))
        : errorResponse(404, "no such object");
    }
    const trace = path.match(/^\/traces\/([\w-]+)$/);
    if (trace !== null) {
      const doc = fx.traces[trace[1] as string];
      return doc !== undefined
        ? jsonResponse(doc)
        : errorResponse(404, "no such trace");
    }
    const snapshot = path.match(/^\/snapshots\/([\w-]+)$/);
    if (snapshot !== null) {
      const doc = fx.snapshots[snapshot[1] as string];
      return doc !== undefined
        ? jsonResponse(doc)
        : errorResponse(404, "no such snapshot");
    }

    if (path === "/events") {
      // documented query semantics: filters, then the cursor, then limit
      let events = fx.events.events.slice();
      const session = url.searchParams.get("session");
      if (session !== null) {
        events = events.filter((e) => e.session_id === session);
      }
      const kinds = url.searchParams.get("kinds");
      if (kinds !== null) {
        const allowed = new Set(kinds.split(","));
        events = events.filter((e) => allowed.has(e.kind));
      }
      const after = url.searchParams.get("after");
      if (after !== null) {
        events = events.filter((e) => e.event_id > Number(after));
      }
      const limit = url.searchParams.get("limit");
      if (limit !== null && Number(limit) > 0) {
        events = events.slice(0, Number(limit));
      }
      return jsonResponse({ events });
    }

    if (path === "/stats") {
      const day = url.searchParams.get("day");
      if (day === null) return errorResponse(400, "day parameter required");
      if (day === fx.stats.day) return jsonResponse(fx.stats);
      return jsonResponse({
        day,
        total: 0,
        counts_by_kind: {},
        counts_by_service: {},
        distinct_sources: 0,
      });
    }

    return errorResponse(404, "no route");
  }
}

/**
 * /feed stand-in reproducing the documented connection behavior from the
 * recorded transcript: hello first (real store head), then every stored
 * event matching the query's kinds/session filters with event_id beyond
 * the cursor, in order. Each entry in `drops` severs one connection after
 * that many event frames, to exercise the client's resume path.
 */
export class FakeFeedServer {
  connections: FakeFeedSocket[] = [];
  /** Each entry severs one connection after that many event frames. */
  drops: number[] = [];
  /** When true, new connections die before the handshake completes. */
  refuse = false;

  constructor(private readonly fixture: Fixture) {}

  factory(): SocketFactory {
    return (url: string) => {
      const socket = new FakeFeedSocket(this, url);
      this.connections.push(socket);
      queueMicrotask(() => socket.serve());
      return socket;
    };
  }

  /** Consume the next drop instruction, if any is armed. */
  takeDrop(): number | null {
    return this.drops.shift() ?? null;
  }

  get head(): number {
    return this.fixture.meta.head;
  }

  eventsFor(url: URL): EventDoc[] {
    const cursor = url.searchParams.get("cursor");
    if (cursor === null) return []; // live-only: nothing new arrives in tests
    const kinds = url.searchParams.get("kinds");
    const allowed = kinds === null ? null : new Set(kinds.split(","));
    const session = url.searchParams.get("session");
    return feedEvents(this.fixture).filter(
      (e) =>
        e.event_id > Number(cursor) &&
        (allowed === null || allowed.has(e.kind)) &&
        (session === null || e.session_id === session),
    );
  }
}

export class FakeFeedSocket implements FeedSocketLike {
  onopen: (() => void) | null = null;
  onmessage: ((ev: { data: string }) => void) | null = null;
  onclose: (() => void) | null = null;
  onerror: (() => void) | null = null;
  closed = false;
  readonly url: URL;

  constructor(
    private readonly server: FakeFeedServer,
    url: string,
  ) {
    this.url = new URL(url);
  }

  serve(): void {
    if (this.closed) return;
    if (this.server.refuse) {
      this.close();
      return;
    }
    this.onopen?.();
    this.deliver({
      v: 1,
      ctl: "hello",
      cursor: this.server.head,
      client_id: `fake-${this.server.connections.length}`,
    });
    const drop = this.server.takeDrop();
    let sent = 0;
    for (const event of this.server.eventsFor(this.url)) {
      if (this.closed) return;
      this.deliver(event);
      sent += 1;
      if (drop !== null && sent >= drop) {
        this.close();
        return;
      }
    }
  }

  deliver(frame: unknown): void {
    this.onmessage?.({ data: JSON.stringify(frame) });
  }

  close(): void {
    if (this.closed) return;
    this.closed = true;
    this.onclose?.();
  }
}

/** Poll until `condition` holds (events here arrive via microtasks). */
export async function waitFor(
  condition: () => boolean,
  timeoutMs = 2000,
): Promise<void> {
  const started = Date.now();
  while (!condition()) {
    if (Date.now() - started > timeoutMs) {
      throw new Error("condition not reached in time");
    }
    await new Promise((resolve) => setTimeout(resolve, 1));
  }
}
