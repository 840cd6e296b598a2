// HTML-string views. Pure functions of state: no DOM access, so the unit
// suite runs them directly and the browser layer just swaps innerHTML.

import type { AppState, InfraState, RunSummary, StageResult } from "./model.js";

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

const CHIP_STATES = new Set([
  "pending",
  "running",
  "waiting_approval",
  "succeeded",
  "failed",
  "skipped",
  "aborted",
]);

function chip(stage: StageResult): string {
  const status = CHIP_STATES.has(stage.status) ? stage.status : "pending";
  const jobs = stage.job_results.length
    ? `<span class="jobs">${stage.job_results
        .map((j) => `<i class="job ${escapeHtml(j.status)}" title="${escapeHtml(j.name)}"></i>`)
        .join("")}</span>`
    : "";
  return (
    `<span class="chip ${status}" data-stage="${escapeHtml(stage.name)}">` +
    `${escapeHtml(stage.name)}${jobs}</span>`
  );
}

function approvalControls(run: RunSummary, state: AppState): string {
  const gate = run.gate;
  if (!gate) {
    return "";
  }
  if (state.approval.conflict) {
    return `<span class="decided">${escapeHtml(state.approval.conflict)}</span>`;
  }
  if (gate.decision) {
    const who = gate.decided_by ? ` by ${gate.decided_by}` : "";
    return `<span class="decided">${escapeHtml(gate.decision + who)}</span>`;
  }
  if (run.state !== "waiting_approval") {
    return "";
  }
  const disabled = state.approval.inFlight || state.approval.submitted ? "disabled" : "";
  return (
    `<span class="approval" data-run="${escapeHtml(run.id)}">` +
    `<em>${escapeHtml(gate.prompt)}</em> ` +
    `<button data-action="approve" data-run="${escapeHtml(run.id)}" ${disabled}>Approve</button>` +
    `<button data-action="reject" data-run="${escapeHtml(run.id)}" ${disabled}>Reject</button>` +
    `</span>`
  );
}

/** One row of status chips for a run, stage order preserved from the API. */
export function renderRunTimeline(run: RunSummary, state: AppState): string {
  try {
    const chips = run.stage_results.map(chip).join("");
    return (
      `<div class="timeline" data-run="${escapeHtml(run.id)}">` +
      `<span class="run-id">${escapeHtml(run.id)}</span>` +
      `<span class="run-state ${escapeHtml(run.state)}">${escapeHtml(run.state)}</span>` +
      chips +
      approvalControls(run, state) +
      `</div>`
    );
  } catch (err) {
    // Error boundary: surface the raw payload instead of a blank panel.
    return `<pre class="render-error">${escapeHtml(JSON.stringify(run, null, 2))}</pre>`;
  }
}

export function renderRunList(state: AppState): string {
  if (state.runs.length === 0) {
    return `<p class="empty">No runs yet. Push a change or trigger one manually.</p>`;
  }
  return state.runs
    .map((run) => {
      const active = run.id === state.activeRunId ? " active" : "";
      const chips = run.stage_results
        .map((s) => `<i class="dot ${escapeHtml(s.status)}" title="${escapeHtml(s.name)}"></i>`)
        .join("");
      return (
        `<div class="run-row${active}" data-action="select-run" data-run="${escapeHtml(run.id)}">` +
        `<span class="run-id">${escapeHtml(run.id)}</span>` +
        `<span class="cause">${escapeHtml(run.cause)}</span>` +
        `<span class="run-state ${escapeHtml(run.state)}">${escapeHtml(run.state)}</span>` +
        `<span class="dots">${chips}</span>` +
        `</div>`
      );
    })
    .join("");
}

export function renderLog(state: AppState): string {
  const lines = state.log.lines.map((line) => escapeHtml(line)).join("\n");
  const tail = state.log.complete ? "" : `\n<span class="streaming">…</span>`;
  return `<pre class="log" data-lines="${state.log.lines.length}">${lines}${tail}</pre>`;
}

export function renderPipelines(state: AppState): string {
  if (state.pipelines.length === 0) {
    return `<p class="empty">No pipelines configured.</p>`;
  }
  return state.pipelines
    .map((p) => {
      const active = p.name === state.selectedPipeline ? " active" : "";
      return (
        `<div class="pipeline-row${active}" data-action="select-pipeline" data-pipeline="${escapeHtml(p.name)}">` +
        `<strong>${escapeHtml(p.name)}</strong>` +
        `<span class="stages">${p.stages.map(escapeHtml).join(" → ")}</span>` +
        `<button data-action="trigger" data-pipeline="${escapeHtml(p.name)}">Run now</button>` +
        `</div>`
      );
    })
    .join("");
}

export function renderInfra(infra: InfraState | null): string {
  if (!infra) {
    return `<p class="empty">No infrastructure state recorded.</p>`;
  }
  const rows = infra.resources
    .map(
      (r) =>
        `<tr><td>${escapeHtml(r.address)}</td><td>${escapeHtml(r.id)}</td>` +
        `<td>${escapeHtml(r.provider)}</td></tr>`,
    )
    .join("");
  const outputs = Object.entries(infra.outputs)
    .map(([k, v]) => `<tr><td>${escapeHtml(k)}</td><td colspan="2">${escapeHtml(String(v))}</td></tr>`)
    .join("");
  return (
    `<table class="infra"><thead><tr><th>resource</th><th>id</th><th>provider</th></tr></thead>` +
    `<tbody>${rows}</tbody>` +
    `<tbody class="outputs">${outputs}</tbody></table>` +
    `<p class="serial">state serial ${infra.serial}</p>`
  );
}

export function renderApp(state: AppState): string {
  const banner = state.error
    ? `<div class="banner" data-action="retry">` +
      `${escapeHtml(state.error)} — click to retry</div>`
    : "";
  const detail = state.activeRun
    ? renderRunTimeline(state.activeRun, state) + renderLog(state)
    : `<p class="empty">Select a run to follow it.</p>`;
  return (
    banner +
    `<header><h1>flowline</h1></header>` +
    `<section id="pipelines"><h2>Pipelines</h2>${renderPipelines(state)}</section>` +
    `<section id="runs"><h2>Runs</h2>${renderRunList(state)}</section>` +
    `<section id="detail"><h2>Run detail</h2>${detail}</section>` +
    `<section id="infra"><h2>Infrastructure</h2>${renderInfra(state.infra)}</section>`
  );
}
