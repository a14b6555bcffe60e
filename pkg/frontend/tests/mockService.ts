import type { FetchLike } from "../src/client";
import type { EventRow, Finding, JobEvent, LayoutDoc } from "../src/types";

export interface SubmitCapture {
  sourceDoc: LayoutDoc;
  targetDoc: LayoutDoc;
  imageName: string;
  imageBytes: Uint8Array;
  maskNames: string[];
  config: Record<string, unknown>;
  idempotencyKey: string | null;
}

export interface MockOptions {
  /** event batches; each events poll releases the next batch into the log */
  script?: JobEvent[][];
  resultBytes?: Uint8Array;
  /** force submits to fail with these findings (422) */
  rejectFindings?: Finding[];
}

interface MockJob {
  id: string;
  state: string;
  log: EventRow[];
  pending: JobEvent[][];
}

const STATE_BY_EVENT: Record<string, string> = {
  queued: "QUEUED",
  requeued: "QUEUED",
  running: "RUNNING",
  step: "RUNNING",
  done: "DONE",
  failed: "FAILED",
  cancelled: "CANCELLED",
};

function json(status: number, body: unknown): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "content-type": "application/json" },
  });
}

function idSets(doc: LayoutDoc): string[] {
  return (doc.objects ?? []).map((o) => o.id);
}

/**
 * In-memory stand-in for the job service, close enough to drive the UI:
 * multipart submit with id validation and idempotency, polled and
 * streamed events from a deterministic script, cancel, result, health.
 */
export function mockService(options: MockOptions = {}) {
  const jobs = new Map<string, MockJob>();
  const byKey = new Map<string, string>();
  const submits: SubmitCapture[] = [];
  let counter = 0;

  function release(job: MockJob): void {
    const batch = job.pending.shift();
    if (!batch) return;
    for (const event of batch) {
      job.log.push({ seq: job.log.length + 1, event });
      const state = STATE_BY_EVENT[event.type];
      if (state) job.state = state;
    }
  }

  async function handleSubmit(req: Request): Promise<Response> {
    const form = await req.formData();
    const image = form.get("image") as File;
    const sourceDoc = JSON.parse(await (form.get("source_layout") as File).text());
    const targetDoc = JSON.parse(await (form.get("target_layout") as File).text());
    const maskNames = (form.getAll("masks") as File[]).map((f) => f.name);
    const config = JSON.parse((form.get("config") as string) ?? "{}");
    const idempotencyKey = (form.get("idempotency_key") as string | null) ?? null;
    submits.push({
      sourceDoc,
      targetDoc,
      imageName: image.name,
      imageBytes: new Uint8Array(await image.arrayBuffer()),
      maskNames,
      config,
      idempotencyKey,
    });

    if (options.rejectFindings) {
      return json(422, {
        code: "validation",
        message: "job spec failed validation",
        findings: options.rejectFindings,
      });
    }
    const src = new Set(idSets(sourceDoc));
    const tar = idSets(targetDoc);
    const unknown = tar.filter((id) => !src.has(id));
    if (unknown.length || src.size !== tar.length) {
      return json(422, {
        code: "validation",
        message: "job spec failed validation",
        findings: [{
          level: "error",
          code: "ids-mismatch",
          message: `layouts disagree on objects (target-only [${unknown.join(", ")}])`,
          object_id: unknown[0] ?? null,
        }],
      });
    }
    if (idempotencyKey && byKey.has(idempotencyKey)) {
      const existing = jobs.get(byKey.get(idempotencyKey) as string) as MockJob;
      return json(202, { job_id: existing.id, state: existing.state, duplicate: true });
    }
    counter += 1;
    const job: MockJob = {
      id: `JOB${String(counter).padStart(4, "0")}`,
      state: "QUEUED",
      log: [],
      pending: (options.script ?? [[{ type: "queued" }, { type: "running" }, { type: "done" }]])
        .map((batch) => [...batch]),
    };
    jobs.set(job.id, job);
    if (idempotencyKey) byKey.set(idempotencyKey, job.id);
    return json(202, { job_id: job.id, state: job.state, duplicate: false });
  }

  function sseResponse(job: MockJob, after: number): Response {
    while (job.pending.length) release(job);
    let text = "";
    for (const row of job.log) {
      if (row.seq <= after) continue;
      text += `id: ${row.seq}\nevent: ${row.event.type}\ndata: ${JSON.stringify(row.event)}\n\n`;
    }
    text += "event: end\ndata: {}\n\n";
    const encoder = new TextEncoder();
    // deliver in ragged chunks so the parser sees split lines
    const chunks: Uint8Array[] = [];
    for (let i = 0; i < text.length; i += 17) {
      chunks.push(encoder.encode(text.slice(i, i + 17)));
    }
    const body = new ReadableStream<Uint8Array>({
      start(controller) {
        for (const chunk of chunks) controller.enqueue(chunk);
        controller.close();
      },
    });
    return new Response(body, {
      status: 200,
      headers: { "content-type": "text/event-stream" },
    });
  }

  const fetchImpl: FetchLike = async (url, init) => {
    const parsed = new URL(url);
    const method = init?.method ?? "GET";
    const path = parsed.pathname;

    if (method === "POST" && path === "/api/jobs") {
      return handleSubmit(new Request(url, init));
    }
    if (path === "/api/health") {
      return json(200, { status: "ok", backend: "toy", workers: 1, jobs: {} });
    }
    const match = path.match(/^\/api\/jobs\/([^/]+)(\/(events|result|cancel))?$/);
    if (!match) return json(404, { code: "no-route", message: path, findings: [] });
    const job = jobs.get(match[1]);
    if (!job) {
      return json(404, { code: "job-not-found", message: `no job '${match[1]}'`, findings: [] });
    }
    const leaf = match[3];
    if (!leaf && method === "GET") {
      return json(200, {
        id: job.id, state: job.state, created: "", started: null, finished: null,
        error: null, progress: {}, result: job.state === "DONE" ? "result.png" : null,
        backend: "toy", seed: 0, init: "invert", mode: "async",
      });
    }
    if (leaf === "cancel" && method === "POST") {
      if (!["DONE", "FAILED", "CANCELLED"].includes(job.state)) {
        job.state = "CANCELLED";
        job.pending = [];
        job.log.push({ seq: job.log.length + 1, event: { type: "cancelled" } });
      }
      return json(200, { id: job.id, state: job.state });
    }
    if (leaf === "events") {
      const after = Number(parsed.searchParams.get("after") ?? "0");
      if (parsed.searchParams.get("poll") === "true") {
        release(job);
        return json(200, {
          job_id: job.id,
          state: job.state,
          events: job.log.filter((row) => row.seq > after),
        });
      }
      return sseResponse(job, after);
    }
    if (leaf === "result") {
      if (job.state !== "DONE") {
        return json(409, {
          code: "not-done",
          message: `job is ${job.state}; the result exists only once DONE`,
          findings: [],
        });
      }
      const bytes = options.resultBytes ?? new TextEncoder().encode("png:result");
      const copy = bytes.buffer.slice(bytes.byteOffset, bytes.byteOffset + bytes.byteLength) as ArrayBuffer;
      return new Response(copy, { status: 200, headers: { "content-type": "image/png" } });
    }
    return json(404, { code: "no-route", message: path, findings: [] });
  };

  return { fetch: fetchImpl, jobs, submits };
}

/** Region losses that shrink geometrically, shared by the scripted runs. */
export function scriptedLoss(step: number): number {
  return Math.round(0.9 * Math.pow(0.85, step) * 1e6) / 1e6;
}

export function stepEvent(step: number, total: number, ids: string[]): JobEvent {
  const losses: Record<string, number> = {};
  for (const id of ids) losses[id] = scriptedLoss(step);
  return { type: "step", t: total - step, completed: step, total, losses };
}
