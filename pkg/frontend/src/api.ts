// Thin fetch wrapper over the service. Every capability here has a CLI
// equivalent; the client adds nothing of its own.

import type {
  CheckpointRow,
  CompileResult,
  ErrorBody,
  OverrideResult,
  ProjectRow,
  RunEvent,
  RunGraph,
  RunRow,
  RunStartOptions,
  TensorDoc,
  TensorView,
  TraceEntry,
  TraceStream,
} from "./types";

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly body: ErrorBody,
  ) {
    super(body.message || `request failed with ${status}`);
    this.name = "ApiError";
  }

  get code(): string {
    return this.body.code;
  }
}

type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class Client {
  private readonly fetchImpl: FetchLike;

  constructor(
    readonly baseUrl: string = "",
    fetchImpl?: FetchLike,
  ) {
    this.fetchImpl = fetchImpl ?? ((url, init) => fetch(url, init));
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const response = await this.raw(method, path, body);
    return (await response.json()) as T;
  }

  private async raw(method: string, path: string, body?: unknown): Promise<Response> {
    const init: RequestInit = { method };
    if (body !== undefined) {
      init.headers = { "content-type": "application/json" };
      init.body = JSON.stringify(body);
    }
    const response = await this.fetchImpl(this.baseUrl + path, init);
    if (!response.ok) {
      let parsed: ErrorBody = { code: "error", message: `HTTP ${response.status}` };
      try {
        const doc = (await response.json()) as { error?: ErrorBody };
        if (doc.error) parsed = doc.error;
      } catch {
        // not JSON; keep the synthetic body
      }
      throw new ApiError(response.status, parsed);
    }
    return response;
  }

  createProject(name: string, source: string): Promise<ProjectRow> {
    return this.request("POST", "/projects", { name, source });
  }

  async listProjects(): Promise<ProjectRow[]> {
    const doc = await this.request<{ projects: ProjectRow[] }>("GET", "/projects");
    return doc.projects;
  }

  compileProject(projectId: string): Promise<CompileResult> {
    return this.request("POST", `/projects/${projectId}/compile`);
  }

  async narrative(projectId: string): Promise<string> {
    const response = await this.raw("GET", `/projects/${projectId}/narrative`);
    return response.text();
  }

  startRun(projectId: string, options: RunStartOptions = {}): Promise<{ run_id: string }> {
    return this.request("POST", `/projects/${projectId}/runs`, options);
  }

  async listRuns(): Promise<RunRow[]> {
    const doc = await this.request<{ runs: RunRow[] }>("GET", "/runs");
    return doc.runs;
  }

  graph(runId: string): Promise<RunGraph> {
    return this.request("GET", `/runs/${runId}/graph`);
  }

  async checkpoints(runId: string): Promise<CheckpointRow[]> {
    const doc = await this.request<{ checkpoints: CheckpointRow[] }>(
      "GET",
      `/runs/${runId}/checkpoints`,
    );
    return doc.checkpoints;
  }

  tensor(runId: string, flowIndex: string, view: TensorView): Promise<TensorDoc> {
    const fi = encodeURIComponent(flowIndex);
    return this.request("GET", `/runs/${runId}/checkpoints/${fi}/tensor?view=${view}`);
  }

  override(runId: string, flowIndex: string, value: unknown): Promise<OverrideResult> {
    const fi = encodeURIComponent(flowIndex);
    return this.request("POST", `/runs/${runId}/checkpoints/${fi}/override`, { value });
  }

  fork(runId: string, flowIndex: string): Promise<{ run_id: string }> {
    const fi = encodeURIComponent(flowIndex);
    return this.request("POST", `/runs/${runId}/checkpoints/${fi}/fork`);
  }

  resume(runId: string, clear?: string[]): Promise<{ run_id: string }> {
    return this.request("POST", `/runs/${runId}/resume`, clear ? { clear } : {});
  }

  async trace(
    runId: string,
    stream: TraceStream,
    range: { from?: string; to?: string } = {},
  ): Promise<TraceEntry[]> {
    const params = new URLSearchParams();
    if (range.from) params.set("from", range.from);
    if (range.to) params.set("to", range.to);
    const suffix = params.size ? `?${params}` : "";
    const doc = await this.request<{ entries: TraceEntry[] }>(
      "GET",
      `/runs/${runId}/trace/${stream}${suffix}`,
    );
    return doc.entries;
  }

  async events(runId: string, since = 0): Promise<RunEvent[]> {
    const doc = await this.request<{ events: RunEvent[] }>(
      "GET",
      `/runs/${runId}/events?since=${since}`,
    );
    return doc.events;
  }

  eventsUrl(runId: string, since = 0): string {
    const base = this.baseUrl || (typeof location !== "undefined" ? location.origin : "");
    return `${base.replace(/^http/, "ws")}/runs/${runId}/events/ws?since=${since}`;
  }
}
