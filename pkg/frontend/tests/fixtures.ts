import type { RunSummary, StageResult } from "../src/model.js";

export function stage(name: string, status: string, jobs: Array<[string, string]> = []): StageResult {
  return {
    name,
    status,
    started: null,
    finished: null,
    job_results: jobs.map(([jobName, jobStatus]) => ({
      name: jobName,
      status: jobStatus,
      exit_code: null,
    })),
  };
}

export function run(
  id: string,
  state: string,
  stages: StageResult[],
  gatePrompt: string | null = null,
): RunSummary {
  return {
    id,
    pipeline: id.split("-")[0],
    revision: { id: "a".repeat(64), message: null, observed_at: "2026-01-01T00:00:00Z" },
    cause: "manual",
    state,
    created: "2026-01-01T00:00:00Z",
    started: null,
    finished: null,
    stage_results: stages,
    metrics: null,
    gate: gatePrompt
      ? {
          prompt: gatePrompt,
          timeout_s: 60,
          decision: null,
          decided_by: null,
          decided_at: null,
        }
      : null,
  };
}
