// Shapes mirrored from the service API plus the dashboard's own state.
export const TERMINAL_STATES = new Set(["succeeded", "failed", "aborted"]);
export function emptyLogBuffer() {
    return { lines: [], nextOffset: 0, complete: false };
}
/**
 * Merge one page into the buffer. The page must have been requested at
 * the buffer's current offset; anything else (a late or duplicated
 * response) is discarded so lines are never reordered or duplicated.
 */
export function mergeLogPage(buffer, requestedOffset, page) {
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
export function initialState() {
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
export function selectRun(state, runId) {
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
