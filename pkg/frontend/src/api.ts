/**
 * Typed client for the monitor's read endpoints.
 *
 * Configuration is the server base URL and nothing else. The fetch
 * implementation is injectable so tests can serve recorded responses.
 */
import type {
  BannerDoc,
  CommitDoc,
  EventDoc,
  EventListDoc,
  HistoryDoc,
  SessionDoc,
  SessionListDoc,
  SnapshotDoc,
  StatsDoc,
  TraceDoc,
} from "./types.js";

/** The slice of the Response surface the client needs. */
export interface ResponseLike {
  ok: boolean;
  status: number;
  json(): Promise<unknown>;
  arrayBuffer(): Promise<ArrayBuffer>;
  text(): Promise<string>;
}

export type FetchLike = (url: string) => Promise<ResponseLike>;

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly url: string,
    detail: string,
  ) {
    super(`GET ${url} -> ${status}: ${detail}`);
    this.name = "ApiError";
  }
}

export interface EventQuery {
  session?: string;
  kinds?: string[];
  after?: number;
  limit?: number;
}

export class MonitorApi {
  private readonly base: string;
  private readonly fetchFn: FetchLike;

  constructor(baseUrl: string, fetchFn?: FetchLike) {
    this.base = baseUrl.replace(/\/+$/, "");
    this.fetchFn =
      fetchFn ?? ((url: string) => globalThis.fetch(url) as Promise<ResponseLike>);
  }

  /** ws:// form of the base URL, for the feed. */
  feedUrl(params: URLSearchParams): string {
    const ws = this.base.replace(/^http/, "ws");
    const query = params.toString();
    return query ? `${ws}/feed?${query}` : `${ws}/feed`;
  }

  private async get(path: string): Promise<ResponseLike> {
    const url = this.base + path;
    const resp = await this.fetchFn(url);
    if (!resp.ok) {
      throw new ApiError(resp.status, url, await resp.text());
    }
    return resp;
  }

  private async getJson<T>(path: string): Promise<T> {
    return (await (await this.get(path)).json()) as T;
  }

  banner(): Promise<BannerDoc> {
    return this.getJson("/");
  }

  async sessions(): Promise<SessionDoc[]> {
    return (await this.getJson<SessionListDoc>("/sessions")).sessions;
  }

  session(sessionId: string): Promise<SessionDoc> {
    return this.getJson(`/sessions/${encodeURIComponent(sessionId)}`);
  }

  history(sessionId: string): Promise<HistoryDoc> {
    return this.getJson(`/sessions/${encodeURIComponent(sessionId)}/history`);
  }

  commit(commitId: string): Promise<CommitDoc> {
    return this.getJson(`/commits/${encodeURIComponent(commitId)}`);
  }

  /** Raw stored bytes for a content digest. */
  async blob(digest: string): Promise<Uint8Array> {
    const resp = await this.get(`/blobs/${encodeURIComponent(digest)}`);
    return new Uint8Array(await resp.arrayBuffer());
  }

  trace(traceId: string): Promise<TraceDoc> {
    return this.getJson(`/traces/${encodeURIComponent(traceId)}`);
  }

  snapshot(snapshotId: string): Promise<SnapshotDoc> {
    return this.getJson(`/snapshots/${encodeURIComponent(snapshotId)}`);
  }

  async events(query: EventQuery = {}): Promise<EventDoc[]> {
    const params = new URLSearchParams();
    if (query.session !== undefined) params.set("session", query.session);
    if (query.kinds !== undefined && query.kinds.length > 0) {
      params.set("kinds", query.kinds.join(","));
    }
    if (query.after !== undefined) params.set("after", String(query.after));
    if (query.limit !== undefined) params.set("limit", String(query.limit));
    const qs = params.toString();
    const doc = await this.getJson<EventListDoc>(qs ? `/events?${qs}` : "/events");
    return doc.events;
  }

  stats(day: string): Promise<StatsDoc> {
    return this.getJson(`/stats?day=${encodeURIComponent(day)}`);
  }
}
