export class ApiError extends Error {
    constructor(status, code, message) {
        super(message);
        this.status = status;
        this.code = code;
    }
}
/**
 * Thin typed client over the documented endpoints. Identical GETs issued
 * while one is still in flight share the same promise, so a slow server
 * never piles up duplicate polls.
 */
export class ApiClient {
    constructor(baseUrl = "", fetchFn = globalThis.fetch.bind(globalThis)) {
        this.baseUrl = baseUrl;
        this.fetchFn = fetchFn;
        this.pending = new Map();
    }
    async request(method, path, body) {
        const response = await this.fetchFn(this.baseUrl + path, {
            method,
            headers: body === undefined ? undefined : { "Content-Type": "application/json" },
            body: body === undefined ? undefined : JSON.stringify(body),
        });
        const text = await response.text();
        let parsed = null;
        try {
            parsed = text ? JSON.parse(text) : null;
        }
        catch {
            parsed = null;
        }
        if (!response.ok) {
            const detail = (parsed ?? {});
            throw new ApiError(response.status, detail.error?.code ?? "error", detail.error?.message ?? `${method} ${path}: HTTP ${response.status}`);
        }
        return parsed;
    }
    get(path) {
        const existing = this.pending.get(path);
        if (existing) {
            return existing;
        }
        const promise = this.request("GET", path).finally(() => {
            this.pending.delete(path);
        });
        this.pending.set(path, promise);
        return promise;
    }
    pendingCount() {
        return this.pending.size;
    }
    pipelines() {
        return this.get("/api/pipelines");
    }
    runs(pipeline, limit = 25) {
        const name = encodeURIComponent(pipeline);
        return this.get(`/api/pipelines/${name}/runs?limit=${limit}`);
    }
    run(runId) {
        return this.get(`/api/runs/${encodeURIComponent(runId)}`);
    }
    logPage(runId, offset, limit = 500) {
        const id = encodeURIComponent(runId);
        return this.get(`/api/runs/${id}/log?offset=${offset}&limit=${limit}`);
    }
    infraState() {
        return this.get("/api/infra/state").catch((err) => {
            if (err instanceof ApiError && err.status === 404) {
                return null;
            }
            throw err;
        });
    }
    postApproval(runId, decision, by) {
        const id = encodeURIComponent(runId);
        return this.request("POST", `/api/runs/${id}/approval`, {
            decision,
            by,
        });
    }
    triggerRun(pipeline) {
        const name = encodeURIComponent(pipeline);
        return this.request("POST", `/api/pipelines/${name}/runs`, {});
    }
}
