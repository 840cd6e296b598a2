import { describe, expect, it } from "vitest";

import { initialState } from "../src/model.js";
import type { RunSummary } from "../src/model.js";
import { renderApp, renderRunList, renderRunTimeline } from "../src/render.js";
import { run, stage } from "./fixtures.js";

function chipStatuses(html: string): string[] {
  return [...html.matchAll(/class="chip ([a-z_]+)"/g)].map((m) => m[1]);
}

describe("renderRunTimeline", () => {
  it("renders 3 success chips plus a waiting chip with approval controls", () => {
    const summary = run(
      "site-1",
      "waiting_approval",
      [
        stage("pull", "succeeded"),
        stage("build", "succeeded"),
        stage("test", "succeeded", [["unit", "succeeded"], ["smoke", "succeeded"]]),
        stage("deploy", "waiting_approval"),
      ],
      "Deploy to production?",
    );
    const state = initialState();
    state.activeRunId = "site-1";
    const html = renderRunTimeline(summary, state);
    expect(chipStatuses(html)).toEqual([
      "succeeded",
      "succeeded",
      "succeeded",
      "waiting_approval",
    ]);
    expect(html).toContain('data-action="approve"');
    expect(html).toContain('data-action="reject"');
    expect(html).toContain("Deploy to production?");
  });

  it("maps a terminal failure to success/failed/skipped/skipped", () => {
    const summary = run("site-2", "failed", [
      stage("pull", "succeeded"),
      stage("build", "failed"),
      stage("test", "skipped"),
      stage("deploy", "skipped"),
    ]);
    const html = renderRunTimeline(summary, initialState());
    expect(chipStatuses(html)).toEqual(["succeeded", "failed", "skipped", "skipped"]);
    expect(html).not.toContain('data-action="approve"');
  });

  it("preserves API stage order", () => {
    const summary = run("site-3", "running", [
      stage("zeta", "succeeded"),
      stage("alpha", "running"),
    ]);
    const html = renderRunTimeline(summary, initialState());
    expect(html.indexOf("zeta")).toBeLessThan(html.indexOf("alpha"));
  });

  it("shows raw JSON when the payload has an unexpected shape", () => {
    const broken = { id: "x-1", stage_results: null } as unknown as RunSummary;
    const html = renderRunTimeline(broken, initialState());
    expect(html).toContain("render-error");
    expect(html).toContain("&quot;x-1&quot;");
  });

  it("disables the buttons while a decision is in flight", () => {
    const summary = run("site-4", "waiting_approval", [stage("deploy", "waiting_approval")], "go?");
    const state = initialState();
    state.approval.inFlight = true;
    const html = renderRunTimeline(summary, state);
    expect(html).toMatch(/data-action="approve"[^>]*disabled/);
  });

  it("shows who decided elsewhere after a conflict", () => {
    const summary = run("site-5", "waiting_approval", [stage("deploy", "waiting_approval")], "go?");
    const state = initialState();
    state.approval.conflict = "already decided elsewhere by cli";
    const html = renderRunTimeline(summary, state);
    expect(html).toContain("already decided elsewhere by cli");
    expect(html).not.toContain("data-action=\"approve\"");
  });

  it("escapes hostile text from the API", () => {
    const summary = run("site-6", "running", [stage("<script>alert(1)</script>", "running")]);
    const html = renderRunTimeline(summary, initialState());
    expect(html).not.toContain("<script>");
  });
});

describe("renderRunList and renderApp", () => {
  it("shows an empty-state message instead of crashing on no runs", () => {
    const state = initialState();
    expect(renderRunList(state)).toContain("No runs yet");
    const app = renderApp(state);
    expect(app).toContain("flowline");
    expect(app).toContain("Select a run");
  });

  it("marks the active run row", () => {
    const state = initialState();
    state.runs = [
      run("site-1", "succeeded", [stage("pull", "succeeded")]),
      run("site-2", "running", [stage("pull", "running")]),
    ];
    state.activeRunId = "site-2";
    const html = renderRunList(state);
    expect(html).toMatch(/run-row active[^>]*data-run="site-2"/);
  });

  it("shows the error banner with retry when the API is down", () => {
    const state = initialState();
    state.error = "fetch failed";
    const html = renderApp(state);
    expect(html).toContain("banner");
    expect(html).toContain("retry");
  });
});
