/**
 * Browser wiring: one page, four panels — live feed, sessions, filesystem
 * timeline, trace/snapshot inspector. All data arrives through MonitorApi
 * and FeedClient; this file only moves documents into the DOM.
 *
 * The server base URL is the page's own origin unless ?monitor=<url> says
 * otherwise — configuration stops there by design.
 */
import { MonitorApi } from "./api.js";
import { FeedClient } from "./feed.js";
import { hexdump, snapshotStrings } from "./hexview.js";
import { Timeline } from "./timeline.js";
import {
  feedRow,
  sessionRow,
  snapshotHeader,
  traceLines,
  treeLines,
} from "./render.js";
import { ViewState } from "./viewstate.js";
import { decodeBase64 } from "./hexview.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (node === null) throw new Error(`missing #${id}`);
  return node as T;
}

function baseUrl(): string {
  const override = new URLSearchParams(window.location.search).get("monitor");
  return override ?? window.location.origin;
}

const api = new MonitorApi(baseUrl());
const state = new ViewState();
let timeline: Timeline | null = null;

function renderFeed(): void {
  const rows = state.visibleRows();
  el<HTMLPreElement>("feed").textContent = rows
    .slice(-500)
    .map(feedRow)
    .join("\n");
  el<HTMLElement>("feed-count").textContent =
    `${rows.length} events` +
    (state.live ? "" : ` (paused, ${state.buffered} buffered)`);
}

function renderTimeline(): void {
  if (timeline === null || timeline.length === 0) return;
  const commit = timeline.commit;
  el<HTMLElement>("timeline-pos").textContent =
    `${timeline.cursor + 1}/${timeline.length}  ` +
    `${commit.commit_id.slice(0, 16)}  ${commit.message}`;
  el<HTMLPreElement>("tree").textContent = treeLines(
    timeline.tree(),
    timeline.diff(),
  ).join("\n");
}

async function selectSession(sessionId: string): Promise<void> {
  state.selectedSession = sessionId;
  state.setSessionFilter(sessionId);
  timeline = new Timeline(api, sessionId);
  await timeline.load();
  renderTimeline();
  renderFeed();

  const session = await api.session(sessionId);
  const inspector = el<HTMLPreElement>("inspector");
  const parts: string[] = [];
  for (const traceId of session.artifact_refs.traces) {
    const trace = await api.trace(traceId);
    parts.push(...traceLines(trace), "");
  }
  for (const snapshotId of session.artifact_refs.snapshots) {
    const snapshot = await api.snapshot(snapshotId);
    parts.push(...snapshotHeader(snapshot));
    for (const { region, strings } of snapshotStrings(snapshot)) {
      parts.push(
        `  region 0x${region.base.toString(16)} ${region.perms}` +
          `  strings: ${strings.join(", ")}`,
      );
      parts.push(...hexdump(decodeBase64(region.content_b64), region.base)
        .slice(0, 8)
        .map((line) => `    ${line}`));
    }
    parts.push("");
  }
  inspector.textContent = parts.join("\n");
}

async function refreshSessions(): Promise<void> {
  const sessions = await api.sessions();
  const list = el<HTMLUListElement>("sessions");
  list.replaceChildren(
    ...sessions.map((doc) => {
      const item = document.createElement("li");
      item.textContent = sessionRow(doc);
      item.onclick = () => void selectSession(doc.session_id);
      return item;
    }),
  );
}

const feed = new FeedClient(
  baseUrl(),
  {
    onEvent: (event) => {
      state.ingest(event);
      renderFeed();
      if (
        event.kind === "session_created" ||
        event.kind === "session_archived"
      ) {
        void refreshSessions();
      }
      if (
        event.kind === "fs_commit" &&
        event.session_id === state.selectedSession
      ) {
        void timeline?.load().then(renderTimeline);
      }
    },
    onStatus: (status) => {
      el<HTMLElement>("feed-status").textContent = status;
    },
    onGap: (gap) => {
      el<HTMLElement>("feed-status").textContent =
        `gap after #${gap.last_event_id}; resuming from cursor`;
    },
  },
  { cursor: 0 },
);

el<HTMLButtonElement>("pause").onclick = () => {
  if (state.live) {
    state.pause();
  } else {
    const { dropped } = state.resume();
    if (dropped > 0) {
      el<HTMLElement>("feed-status").textContent =
        `${dropped} events fell off the pause buffer`;
    }
  }
  el<HTMLButtonElement>("pause").textContent = state.live ? "pause" : "resume";
  renderFeed();
};
el<HTMLButtonElement>("back").onclick = () => {
  timeline?.back();
  renderTimeline();
};
el<HTMLButtonElement>("forward").onclick = () => {
  timeline?.forward();
  renderTimeline();
};

void refreshSessions();
feed.connect();
