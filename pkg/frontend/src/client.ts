import type { EventRow, Finding, JobView, LayoutDoc } from "./types.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

/** Non-2xx response, decoded from the service's uniform error body. */
export class ApiFailure extends Error {
  status: number;
  code: string;
  findings: Finding[];

  constructor(status: number, code: string, message: string, findings: Finding[] = []) {
    super(message);
    this.status = status;
    this.code = code;
    this.findings = findings;
  }
}

async function failureFrom(res: Response): Promise<ApiFailure> {
  let code = `http-${res.status}`;
  let message = res.statusText || `request failed with ${res.status}`;
  let findings: Finding[] = [];
  try {
    const body = await res.json();
    if (body && typeof body === "object") {
      if (typeof body.code === "string") code = body.code;
      if (typeof body.message === "string") message = body.message;
      if (Array.isArray(body.findings)) findings = body.findings;
    }
  } catch {
    // non-JSON error body; keep the status-line message
  }
  return new ApiFailure(res.status, code, message, findings);
}

export interface SubmitPayload {
  imageBytes: Uint8Array;
  imageName?: string;
  sourceDoc: LayoutDoc;
  targetDoc: LayoutDoc;
  masks: Array<{ name: string; bytes: Uint8Array }>;
  config: Record<string, unknown>;
  idempotencyKey?: string;
}

export interface SubmitReply {
  jobId: string;
  state: string;
  duplicate: boolean;
}

export interface EventPage {
  jobId: string;
  state: string;
  events: EventRow[];
}

/** Thin typed wrapper over the job service's HTTP routes. */
export class ServiceClient {
  private base: string;
  private fetchImpl: FetchLike;

  constructor(baseUrl = "", fetchImpl?: FetchLike) {
    this.base = baseUrl.replace(/\/+$/, "");
    this.fetchImpl = fetchImpl ?? ((url, init) => fetch(url, init));
  }

  private url(path: string): string {
    return `${this.base}${path}`;
  }

  private async json<T>(path: string, init?: RequestInit): Promise<T> {
    const res = await this.fetchImpl(this.url(path), init);
    if (!res.ok) throw await failureFrom(res);
    return (await res.json()) as T;
  }

  async health(): Promise<{ status: string; backend: string; workers: number }> {
    return this.json("/api/health");
  }

  async submitJob(payload: SubmitPayload): Promise<SubmitReply> {
    const form = new FormData();
    const blob = (bytes: Uint8Array, type: string) =>
      new Blob([bytes.buffer.slice(bytes.byteOffset, bytes.byteOffset + bytes.byteLength) as ArrayBuffer], { type });
    form.append("image", blob(payload.imageBytes, "image/png"), payload.imageName ?? "source.png");
    form.append(
      "source_layout",
      new Blob([JSON.stringify(payload.sourceDoc)], { type: "application/json" }),
      "source_layout.json",
    );
    form.append(
      "target_layout",
      new Blob([JSON.stringify(payload.targetDoc)], { type: "application/json" }),
      "target_layout.json",
    );
    for (const mask of payload.masks) {
      form.append("masks", blob(mask.bytes, "image/png"), mask.name);
    }
    form.append("config", JSON.stringify(payload.config));
    if (payload.idempotencyKey) {
      form.append("idempotency_key", payload.idempotencyKey);
    }
    const reply = await this.json<{ job_id: string; state: string; duplicate: boolean }>(
      "/api/jobs",
      { method: "POST", body: form },
    );
    return { jobId: reply.job_id, state: reply.state, duplicate: reply.duplicate };
  }

  async getJob(jobId: string): Promise<JobView> {
    return this.json(`/api/jobs/${jobId}`);
  }

  async cancel(jobId: string): Promise<JobView> {
    return this.json(`/api/jobs/${jobId}/cancel`, { method: "POST" });
  }

  /** One page of the recorded event log, rows with seq > after. */
  async pollEvents(jobId: string, after = 0): Promise<EventPage> {
    const page = await this.json<{ job_id: string; state: string; events: EventRow[] }>(
      `/api/jobs/${jobId}/events?poll=true&after=${after}`,
    );
    return { jobId: page.job_id, state: page.state, events: page.events };
  }

  /** The live server-sent event stream; the caller owns the response body. */
  async eventStream(jobId: string, after = 0, signal?: AbortSignal): Promise<Response> {
    const res = await this.fetchImpl(this.url(`/api/jobs/${jobId}/events?after=${after}`), { signal });
    if (!res.ok) throw await failureFrom(res);
    return res;
  }

  /** The finished image; the service answers 409 until the job is DONE. */
  async resultBytes(jobId: string): Promise<Uint8Array> {
    const res = await this.fetchImpl(this.url(`/api/jobs/${jobId}/result`));
    if (!res.ok) throw await failureFrom(res);
    return new Uint8Array(await res.arrayBuffer());
  }
}
