/**
 * Live event feed over the monitor's WebSocket endpoint.
 *
 * Delivery contract (server side): per connection, event documents arrive
 * in event_id order with no duplicates; the first frame is a hello carrying
 * the store head; a client that falls behind gets a gap notice and a close.
 *
 * This client adds resume-on-drop: it remembers the last event_id it has
 * seen and reconnects with `?cursor=<last>`, so the server backfills
 * everything missed and the rendered stream stays duplicate-free and
 * loss-free across disconnects. Events the backfill repeats (the id guard)
 * are discarded before they reach the caller.
 */
import type { EventDoc, FeedFrame, GapFrame, HelloFrame } from "./types.js";
import { isEvent, isGap, isHello } from "./types.js";

/** Structural slice of a WebSocket the client needs (fakeable in tests). */
export interface FeedSocketLike {
  onopen: (() => void) | null;
  onmessage: ((ev: { data: string }) => void) | null;
  onclose: (() => void) | null;
  onerror: (() => void) | null;
  close(): void;
}

export type SocketFactory = (url: string) => FeedSocketLike;
export type Scheduler = (fn: () => void, delayMs: number) => void;

export type FeedStatus =
  | "idle"
  | "connecting"
  | "open"
  | "reconnecting"
  | "stopped"
  | "gave-up";

export interface FeedOptions {
  /** Restrict the stream to these event kinds. */
  kinds?: string[];
  /** Restrict the stream to one session. */
  session?: string;
  /**
   * Backfill everything after this event_id on the first connection
   * (0 = full history). Omit for live-only.
   */
  cursor?: number;
  socketFactory?: SocketFactory;
  scheduler?: Scheduler;
  retryDelayMs?: number;
  maxRetries?: number;
}

export interface FeedCallbacks {
  onEvent: (event: EventDoc) => void;
  onHello?: (hello: HelloFrame) => void;
  onGap?: (gap: GapFrame) => void;
  onStatus?: (status: FeedStatus) => void;
}

const defaultFactory: SocketFactory = (url) =>
  new WebSocket(url) as unknown as FeedSocketLike;

export class FeedClient {
  /** Highest event_id delivered to the caller; the reconnect cursor. */
  lastEventId: number | null = null;
  status: FeedStatus = "idle";

  private socket: FeedSocketLike | null = null;
  private stopped = false;
  private retries = 0;
  private readonly factory: SocketFactory;
  private readonly scheduler: Scheduler;
  private readonly retryDelayMs: number;
  private readonly maxRetries: number;

  constructor(
    private readonly baseUrl: string,
    private readonly callbacks: FeedCallbacks,
    private readonly options: FeedOptions = {},
  ) {
    this.factory = options.socketFactory ?? defaultFactory;
    this.scheduler =
      options.scheduler ?? ((fn, ms) => void setTimeout(fn, ms));
    this.retryDelayMs = options.retryDelayMs ?? 1000;
    this.maxRetries = options.maxRetries ?? Number.POSITIVE_INFINITY;
  }

  /** The /feed URL for the next connection attempt. */
  url(): string {
    const params = new URLSearchParams();
    if (this.options.kinds !== undefined && this.options.kinds.length > 0) {
      params.set("kinds", this.options.kinds.join(","));
    }
    if (this.options.session !== undefined) {
      params.set("session", this.options.session);
    }
    const cursor = this.lastEventId ?? this.options.cursor;
    if (cursor !== undefined && cursor !== null) {
      params.set("cursor", String(cursor));
    }
    const ws = this.baseUrl.replace(/^http/, "ws").replace(/\/+$/, "");
    const query = params.toString();
    return query ? `${ws}/feed?${query}` : `${ws}/feed`;
  }

  connect(): void {
    if (this.stopped) return;
    this.setStatus(this.lastEventId === null ? "connecting" : "reconnecting");
    const socket = this.factory(this.url());
    this.socket = socket;
    socket.onopen = () => {
      this.retries = 0;
      this.setStatus("open");
    };
    socket.onmessage = (ev) => this.handleFrame(ev.data);
    socket.onerror = () => socket.close();
    socket.onclose = () => this.handleClose();
  }

  stop(): void {
    this.stopped = true;
    this.setStatus("stopped");
    this.socket?.close();
    this.socket = null;
  }

  private handleFrame(data: string): void {
    const frame = JSON.parse(data) as FeedFrame;
    if (isHello(frame)) {
      this.callbacks.onHello?.(frame);
      return;
    }
    if (isGap(frame)) {
      // the live queue overflowed server-side; the events themselves are
      // safe in the store, and the reconnect cursor will backfill them
      this.callbacks.onGap?.(frame);
      return;
    }
    if (isEvent(frame)) {
      if (this.lastEventId !== null && frame.event_id <= this.lastEventId) {
        return; // duplicate of something already rendered
      }
      this.lastEventId = frame.event_id;
      this.callbacks.onEvent(frame);
    }
  }

  private handleClose(): void {
    if (this.stopped) return;
    this.retries += 1;
    if (this.retries > this.maxRetries) {
      this.setStatus("gave-up");
      return;
    }
    this.setStatus("reconnecting");
    this.scheduler(() => this.connect(), this.retryDelayMs);
  }

  private setStatus(status: FeedStatus): void {
    this.status = status;
    this.callbacks.onStatus?.(status);
  }
}
