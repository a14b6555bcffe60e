import type { ServiceClient } from "./client.js";
import type { EventRow } from "./types.js";

export interface SseMessage {
  id: string | null;
  event: string;
  data: string;
}

/**
 * Incremental parser for a text/event-stream body. Feed it decoded chunks
 * in any split; complete messages (terminated by a blank line) come back
 * in order. Only the fields the job service emits are handled: id, event,
 * data, and comment lines.
 */
export class SseParser {
  private buffer = "";
  private id: string | null = null;
  private event = "message";
  private data: string[] = [];

  push(chunk: string): SseMessage[] {
    this.buffer += chunk;
    const out: SseMessage[] = [];
    for (;;) {
      const nl = this.buffer.indexOf("\n");
      if (nl < 0) break;
      let line = this.buffer.slice(0, nl);
      this.buffer = this.buffer.slice(nl + 1);
      if (line.endsWith("\r")) line = line.slice(0, -1);
      if (line === "") {
        if (this.data.length) {
          out.push({ id: this.id, event: this.event, data: this.data.join("\n") });
        }
        this.event = "message";
        this.data = [];
        continue;
      }
      if (line.startsWith(":")) continue;
      const colon = line.indexOf(":");
      const field = colon < 0 ? line : line.slice(0, colon);
      let value = colon < 0 ? "" : line.slice(colon + 1);
      if (value.startsWith(" ")) value = value.slice(1);
      if (field === "id") this.id = value;
      else if (field === "event") this.event = value;
      else if (field === "data") this.data.push(value);
    }
    return out;
  }
}

export interface WatchOptions {
  transport?: "poll" | "sse";
  /** wait between empty polls; 0 still yields to the event loop */
  pollDelayMs?: number;
  signal?: AbortSignal;
}

export type WatchOutcome = "terminal" | "aborted";

function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}

async function watchByPolling(
  client: ServiceClient,
  jobId: string,
  onRow: (row: EventRow) => void,
  onState: (state: string) => void,
  delayMs: number,
  signal?: AbortSignal,
): Promise<WatchOutcome> {
  let after = 0;
  for (;;) {
    if (signal?.aborted) return "aborted";
    const page = await client.pollEvents(jobId, after);
    for (const row of page.events) {
      after = Math.max(after, row.seq);
      onRow(row);
    }
    onState(page.state);
    // mirror the stream's ending rule: terminal state and nothing new
    if (!page.events.length && isTerminal(page.state)) return "terminal";
    await sleep(delayMs);
  }
}

function isTerminal(state: string): boolean {
  return state === "DONE" || state === "FAILED" || state === "CANCELLED";
}

async function watchByStream(
  client: ServiceClient,
  jobId: string,
  onRow: (row: EventRow) => void,
  signal?: AbortSignal,
): Promise<WatchOutcome> {
  const res = await client.eventStream(jobId, 0, signal);
  const body = res.body;
  if (!body) throw new Error("event stream has no body");
  const reader = body.getReader();
  const decoder = new TextDecoder();
  const parser = new SseParser();
  try {
    for (;;) {
      const { done, value } = await reader.read();
      if (done) return "terminal";
      for (const msg of parser.push(decoder.decode(value, { stream: true }))) {
        if (msg.event === "end") {
          await reader.cancel();
          return "terminal";
        }
        const seq = Number(msg.id ?? NaN);
        if (!Number.isFinite(seq)) continue;
        onRow({ seq, event: JSON.parse(msg.data) });
      }
    }
  } catch (e) {
    if (signal?.aborted) return "aborted";
    throw e;
  }
}

/**
 * Follow one job's event log until it ends, reporting each row once.
 * Polling asks with an `after` cursor and stops when the job is terminal
 * with nothing left to read; the stream transport relies on the server's
 * closing `end` message.
 */
export async function watchEvents(
  client: ServiceClient,
  jobId: string,
  onRow: (row: EventRow) => void,
  onState: (state: string) => void = () => {},
  options: WatchOptions = {},
): Promise<WatchOutcome> {
  if (options.transport === "sse") {
    return watchByStream(client, jobId, onRow, options.signal);
  }
  return watchByPolling(client, jobId, onRow, onState, options.pollDelayMs ?? 250, options.signal);
}
