/**
 * What the analyst is looking at: the selected session, the timeline
 * cursor, the live/paused toggle, and the active feed filters.
 *
 * Pausing never tears down the feed — incoming events buffer (up to a
 * bound) so the analyst can inspect a frozen panel and then resume with
 * nothing missing. Should the buffer overflow, the overflow is reported
 * rather than silently swallowed, and the feed cursor still covers
 * recovery on the next reconnect.
 */
import type { EventDoc } from "./types.js";

export const PAUSE_BUFFER_LIMIT = 10_000;

export interface Filters {
  kinds: Set<string> | null;
  session: string | null;
}

export interface ResumeResult {
  delivered: number;
  dropped: number;
}

export class ViewState {
  selectedSession: string | null = null;
  live = true;
  filters: Filters = { kinds: null, session: null };

  /** Events the feed panel renders, in arrival order. */
  rows: EventDoc[] = [];

  private buffer: EventDoc[] = [];
  private droppedWhilePaused = 0;

  constructor(private readonly bufferLimit = PAUSE_BUFFER_LIMIT) {}

  /** Feed delivery: straight to rows when live, buffered when paused. */
  ingest(event: EventDoc): void {
    if (this.live) {
      this.rows.push(event);
      return;
    }
    if (this.buffer.length >= this.bufferLimit) {
      this.buffer.shift();
      this.droppedWhilePaused += 1;
    }
    this.buffer.push(event);
  }

  pause(): void {
    this.live = false;
  }

  /** Flush everything buffered while paused, oldest first. */
  resume(): ResumeResult {
    const delivered = this.buffer.length;
    const dropped = this.droppedWhilePaused;
    this.rows.push(...this.buffer);
    this.buffer = [];
    this.droppedWhilePaused = 0;
    this.live = true;
    return { delivered, dropped };
  }

  get buffered(): number {
    return this.buffer.length;
  }

  /** The rows the feed panel should show under the active filters. */
  visibleRows(): EventDoc[] {
    return this.rows.filter((event) => this.matches(event));
  }

  matches(event: EventDoc): boolean {
    if (this.filters.kinds !== null && !this.filters.kinds.has(event.kind)) {
      return false;
    }
    if (
      this.filters.session !== null &&
      event.session_id !== this.filters.session
    ) {
      return false;
    }
    return true;
  }

  setKindFilter(kinds: string[] | null): void {
    this.filters.kinds = kinds === null ? null : new Set(kinds);
  }

  setSessionFilter(session: string | null): void {
    this.filters.session = session;
  }
}
