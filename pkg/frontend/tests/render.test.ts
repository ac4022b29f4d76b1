/**
 * Rendering stays faithful to the documents: verdict badges come from the
 * recorded verdict, trace markers land on the right rows, tree lines carry
 * the diff markers.
 */
import { describe, expect, it } from "vitest";

import { feedRow, sessionRow, traceLines, verdictBadge } from "../src/render.js";
import { diffTrees } from "../src/timeline.js";
import { treeLines } from "../src/render.js";
import { feedEvents, loadFixture } from "./fixture.js";

const fixture = loadFixture();

describe("feed rows", () => {
  it("badges the alien exec with its recorded verdict", () => {
    const execs = feedEvents(fixture).filter((e) => e.kind === "exec");
    const alien = execs.filter((e) => e.body["verdict"] === "alien");
    const trusted = execs.filter((e) => e.body["verdict"] === "trusted");
    expect(alien).toHaveLength(1);
    expect(trusted.length).toBeGreaterThan(0);

    expect(verdictBadge(alien[0]!)).toBe("[ALIEN]");
    expect(feedRow(alien[0]!)).toContain("[ALIEN]");
    expect(feedRow(alien[0]!)).toContain(
      String(alien[0]!.body["command_line"]),
    );
    expect(feedRow(trusted[0]!)).toContain("[trusted]");
  });

  it("puts the id, kind, and session in every row", () => {
    for (const event of feedEvents(fixture)) {
      const row = feedRow(event);
      expect(row).toContain(`#${event.event_id}`);
      expect(row).toContain(event.kind);
      if (event.session_id !== null) {
        expect(row).toContain(event.session_id);
      }
    }
  });
});

describe("session rows", () => {
  it("summarizes the artifact refs it was given", () => {
    const row = sessionRow(fixture.session);
    expect(row).toContain(fixture.session.session_id);
    expect(row).toContain(
      `${fixture.session.artifact_refs.commits.length} commits`,
    );
    expect(row).toContain(
      `${fixture.session.artifact_refs.pcap_packets} packets`,
    );
  });
});

describe("trace inspector", () => {
  it("marks snapshots under their trigger rows", () => {
    const trace = fixture.traces[fixture.meta.trace_ids[0] as string]!;
    const lines = traceLines(trace);

    for (const event of trace.events) {
      expect(lines.some((l) => l.includes(` ${event.detail}`))).toBe(true);
    }
    for (const snap of trace.snapshots) {
      const row = lines.findIndex((l) =>
        l.includes(`snapshot ${snap.snapshot_id}`),
      );
      const trigger = lines.findIndex((l) =>
        l.trimStart().startsWith(`${snap.seq} `),
      );
      expect(row).toBeGreaterThan(trigger);
      expect(trigger).toBeGreaterThanOrEqual(0);
    }
    expect(lines[0]).toContain("[sealed]");
  });
});

describe("tree lines", () => {
  it("marks adds, modifications, and deletions from the diff", () => {
    const parent = { "/a": "d1", "/b": "d2", "/c": "d3" };
    const child = { "/a": "d1", "/b": "changed", "/new": "d4" };
    const entries = Object.entries(child)
      .map(([path, digest]) => ({ path, digest }))
      .sort((x, y) => x.path.localeCompare(y.path));
    const lines = treeLines(entries, diffTrees(parent, child));

    expect(lines).toContain("  /a  d1");
    expect(lines.some((l) => l.startsWith("~ /b"))).toBe(true);
    expect(lines.some((l) => l.startsWith("+ /new"))).toBe(true);
    expect(lines.some((l) => l.startsWith("- /c"))).toBe(true);
  });
});
