import { ApiClient, ApiError } from "./api.js";
import { TERMINAL_STATES, initialState, mergeLogPage, selectRun, } from "./model.js";
import { renderApp } from "./render.js";
/**
 * Polling orchestrator: one refresh cycle pulls pipelines, the selected
 * pipeline's runs, the active run with its next log page, and the infra
 * state, then re-renders. Default cadence is one cycle every 2 s.
 */
export class DashboardController {
    constructor(options = {}) {
        this.state = initialState();
        this.timer = null;
        this.api = new ApiClient(options.baseUrl ?? "", options.fetchFn);
        this.pollIntervalMs = options.pollIntervalMs ?? 2000;
        this.approverName = options.approverName ?? "dashboard";
        this.onRender = options.onRender ?? (() => undefined);
    }
    html() {
        return renderApp(this.state);
    }
    render() {
        this.onRender(this.html());
    }
    async start() {
        await this.refresh();
        this.timer = setInterval(() => {
            void this.refresh();
        }, this.pollIntervalMs);
    }
    stop() {
        if (this.timer !== null) {
            clearInterval(this.timer);
            this.timer = null;
        }
    }
    async refresh() {
        try {
            this.state.pipelines = await this.api.pipelines();
            if (!this.state.selectedPipeline && this.state.pipelines.length > 0) {
                this.state.selectedPipeline = this.state.pipelines[0].name;
            }
            if (this.state.selectedPipeline) {
                this.state.runs = await this.api.runs(this.state.selectedPipeline);
                if (!this.state.activeRunId && this.state.runs.length > 0) {
                    this.state = selectRun(this.state, this.state.runs[0].id);
                }
            }
            if (this.state.activeRunId) {
                await this.refreshActiveRun(this.state.activeRunId);
            }
            this.state.infra = await this.api.infraState();
            this.state.error = null;
        }
        catch (err) {
            // Non-modal: keep the last good view, offer retry.
            this.state.error = err instanceof Error ? err.message : String(err);
        }
        this.render();
    }
    async refreshActiveRun(runId) {
        this.state.activeRun = await this.api.run(runId);
        if (!this.state.log.complete) {
            const offset = this.state.log.nextOffset;
            const page = await this.api.logPage(runId, offset);
            this.state.log = mergeLogPage(this.state.log, offset, page);
        }
        if (this.state.activeRun.state !== "waiting_approval" &&
            !TERMINAL_STATES.has(this.state.activeRun.state)) {
            // Gate not reached (or re-entered later): allow a fresh submission.
            this.state.approval = { submitted: false, inFlight: false, conflict: null };
        }
    }
    async handleSelectRun(runId) {
        this.state = selectRun(this.state, runId);
        await this.refresh();
    }
    async handleSelectPipeline(name) {
        if (this.state.selectedPipeline !== name) {
            this.state.selectedPipeline = name;
            this.state.runs = [];
            this.state.activeRunId = null;
            this.state.activeRun = null;
        }
        await this.refresh();
    }
    async handleTrigger(pipeline) {
        try {
            const run = await this.api.triggerRun(pipeline);
            this.state = selectRun(this.state, run.id);
        }
        catch (err) {
            this.state.error = err instanceof Error ? err.message : String(err);
        }
        await this.refresh();
    }
    /** POST the decision once; a 409 means somebody else decided first. */
    async submitApproval(decision) {
        const runId = this.state.activeRunId;
        if (!runId || this.state.approval.inFlight || this.state.approval.submitted) {
            return;
        }
        this.state.approval.inFlight = true;
        this.render();
        try {
            await this.api.postApproval(runId, decision, this.approverName);
            this.state.approval = { submitted: true, inFlight: false, conflict: null };
        }
        catch (err) {
            if (err instanceof ApiError && err.status === 409) {
                let message = "already decided elsewhere";
                try {
                    const run = await this.api.run(runId);
                    if (run.gate?.decided_by) {
                        message = `already decided elsewhere by ${run.gate.decided_by}`;
                    }
                }
                catch {
                    // keep the generic message
                }
                this.state.approval = { submitted: true, inFlight: false, conflict: message };
            }
            else {
                this.state.approval.inFlight = false;
                this.state.error = err instanceof Error ? err.message : String(err);
            }
        }
        await this.refresh();
    }
    /** Event delegation target for the browser layer. */
    async dispatch(action, dataset) {
        switch (action) {
            case "select-run":
                if (dataset.run)
                    await this.handleSelectRun(dataset.run);
                break;
            case "select-pipeline":
                if (dataset.pipeline)
                    await this.handleSelectPipeline(dataset.pipeline);
                break;
            case "trigger":
                if (dataset.pipeline)
                    await this.handleTrigger(dataset.pipeline);
                break;
            case "approve":
            case "reject":
                await this.submitApproval(action);
                break;
            case "retry":
                await this.refresh();
                break;
        }
    }
}
