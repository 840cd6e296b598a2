import type { InfraState, LogPage, PipelineInfo, RunSummary } from "./model.js";

export class ApiError extends Error {
  constructor(
    public status: number,
    public code: string,
    message: string,
  ) {
    super(message);
  }
}

interface ErrorBody {
  error?: { code?: string; message?: string };
}

/**
 * Thin typed client over the documented endpoints. Identical GETs issued
 * while one is still in flight share the same promise, so a slow server
 * never piles up duplicate polls.
 */
export class ApiClient {
  private pending = new Map<string, Promise<unknown>>();

  constructor(
    private baseUrl: string = "",
    private fetchFn: typeof fetch = globalThis.fetch.bind(globalThis),
  ) {}

  private async request(method: string, path: string, body?: unknown): Promise<unknown> {
    const response = await this.fetchFn(this.baseUrl + path, {
      method,
      headers: body === undefined ? undefined : { "Content-Type": "application/json" },
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    const text = await response.text();
    let parsed: unknown = null;
    try {
      parsed = text ? JSON.parse(text) : null;
    } catch {
      parsed = null;
    }
    if (!response.ok) {
      const detail = (parsed ?? {}) as ErrorBody;
      throw new ApiError(
        response.status,
        detail.error?.code ?? "error",
        detail.error?.message ?? `${method} ${path}: HTTP ${response.status}`,
      );
    }
    return parsed;
  }

  private get(path: string): Promise<unknown> {
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

  pendingCount(): number {
    return this.pending.size;
  }

  pipelines(): Promise<PipelineInfo[]> {
    return this.get("/api/pipelines") as Promise<PipelineInfo[]>;
  }

  runs(pipeline: string, limit = 25): Promise<RunSummary[]> {
    const name = encodeURIComponent(pipeline);
    return this.get(`/api/pipelines/${name}/runs?limit=${limit}`) as Promise<RunSummary[]>;
  }

  run(runId: string): Promise<RunSummary> {
    return this.get(`/api/runs/${encodeURIComponent(runId)}`) as Promise<RunSummary>;
  }

  logPage(runId: string, offset: number, limit = 500): Promise<LogPage> {
    const id = encodeURIComponent(runId);
    return this.get(`/api/runs/${id}/log?offset=${offset}&limit=${limit}`) as Promise<LogPage>;
  }

  infraState(): Promise<InfraState | null> {
    return (this.get("/api/infra/state") as Promise<InfraState>).catch((err) => {
      if (err instanceof ApiError && err.status === 404) {
        return null;
      }
      throw err;
    });
  }

  postApproval(runId: string, decision: "approve" | "reject", by: string): Promise<RunSummary> {
    const id = encodeURIComponent(runId);
    return this.request("POST", `/api/runs/${id}/approval`, {
      decision,
      by,
    }) as Promise<RunSummary>;
  }

  triggerRun(pipeline: string): Promise<RunSummary> {
    const name = encodeURIComponent(pipeline);
    return this.request("POST", `/api/pipelines/${name}/runs`, {}) as Promise<RunSummary>;
  }
}
