// Shapes mirrored from the service API plus the dashboard's own state.

export interface PipelineInfo {
  name: string;
  stages: string[];
  trigger: { poll: boolean; webhook: boolean; interval_s: number };
}

export interface JobResult {
  name: string;
  status: string;
  exit_code: number | null;
}

export interface StageResult {
  name: string;
  status: string;
  started: string | null;
  finished: string | null;
  job_results: JobResult[];
}

export interface RunGate {
  prompt: string;
  timeout_s: number;
  decision: string | null;
  decided_by: string | null;
  decided_at: string | null;
}

export interface RunSummary {
  id: string;
  pipeline: string;
  revision: { id: string; message: string | null; observed_at: string };
  cause: string;
  state: string;
  created: string;
  started: string | null;
  finished: string | null;
  stage_results: StageResult[];
  metrics: Record<string, unknown> | null;
  gate: RunGate | null;
}

export interface LogPage {
  events: string[];
  next_offset: number;
  complete: boolean;
}

export interface InfraResource {
  address: string;
  id: string;
  provider: string;
  attrs: Record<string, unknown>;
  depends_on: string[];
}

export interface InfraState {
  version: number;
  serial: number;
  lineage: string;
  resources: InfraResource[];
  outputs: Record<string, unknown>;
}

export const TERMINAL_STATES = new Set(["succeeded", "failed", "aborted"]);

/** Append-only log buffer filled from successive LogPage responses. */
export interface LogBuffer {
  lines: string[];
  nextOffset: number;
  complete: boolean;
}

export function emptyLogBuffer(): LogBuffer {
  return { lines: [], nextOffset: 0, complete: false };
}

/**
 * Merge one page into the buffer. The page must have been requested at
 * the buffer's current offset; anything else (a late or duplicated
 * response) is discarded so lines are never reordered or duplicated.
 */
export function mergeLogPage(
  buffer: LogBuffer,
  requestedOffset: number,
  page: LogPage,
): LogBuffer {
  if (requestedOffset !== buffer.nextOffset || buffer.complete) {
    return buffer;
  }
  if (page.next_offset < buffer.nextOffset) {
    return buffer;
  }
  return {
    lines: buffer.lines.concat(page.events),
    nextOffset: page.next_offset,
    complete: page.complete,
  };
}

export interface ApprovalUiState {
  submitted: boolean;
  inFlight: boolean;
  conflict: string | null; // message when someone else decided first
}

export interface AppState {
  pipelines: PipelineInfo[];
  selectedPipeline: string | null;
  runs: RunSummary[];
  activeRunId: string | null;
  activeRun: RunSummary | null;
  log: LogBuffer;
  approval: ApprovalUiState;
  infra: InfraState | null;
  error: string | null; // transient network problem, shown non-modally
}

export function initialState(): AppState {
  return {
    pipelines: [],
    selectedPipeline: null,
    runs: [],
    activeRunId: null,
    activeRun: null,
    log: emptyLogBuffer(),
    approval: { submitted: false, inFlight: false, conflict: null },
    infra: null,
    error: null,
  };
}

export function selectRun(state: AppState, runId: string): AppState {
  if (state.activeRunId === runId) {
    return state;
  }
  return {
    ...state,
    activeRunId: runId,
    activeRun: null,
    log: emptyLogBuffer(),
    approval: { submitted: false, inFlight: false, conflict: null },
  };
}
