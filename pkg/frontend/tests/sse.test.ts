import { describe, expect, it } from "vitest";
import { ServiceClient } from "../src/client";
import { SseParser, watchEvents } from "../src/sse";
import { mockService, stepEvent } from "./mockService";
import type { EventRow } from "../src/types";

describe("sse parsing", () => {
  it("parses messages regardless of chunk boundaries", () => {
    const text = 'id: 1\nevent: step\ndata: {"a":1}\n\nid: 2\nevent: done\ndata: {}\n\n';
    for (const size of [1, 3, 7, 1000]) {
      const parser = new SseParser();
      const out = [];
      for (let i = 0; i < text.length; i += size) {
        out.push(...parser.push(text.slice(i, i + size)));
      }
      expect(out).toEqual([
        { id: "1", event: "step", data: '{"a":1}' },
        { id: "2", event: "done", data: "{}" },
      ]);
    }
  });

  it("handles comments, crlf, and multi-line data", () => {
    const parser = new SseParser();
    const out = parser.push(": ping\r\nid: 9\r\nevent: note\r\ndata: one\r\ndata: two\r\n\r\n");
    expect(out).toEqual([{ id: "9", event: "note", data: "one\ntwo" }]);
  });

  it("keeps the last seen id for messages that do not set one", () => {
    const parser = new SseParser();
    const out = parser.push("id: 4\ndata: a\n\ndata: b\n\n");
    expect(out.map((m) => m.id)).toEqual(["4", "4"]);
  });
});

function script() {
  return [
    [{ type: "queued" }, { type: "running" }],
    [stepEvent(1, 5, ["cat"]), stepEvent(2, 5, ["cat"])],
    [stepEvent(3, 5, ["cat"]), stepEvent(4, 5, ["cat"]), stepEvent(5, 5, ["cat"]), { type: "done" }],
  ];
}

async function submitOne(svc: ReturnType<typeof mockService>, client: ServiceClient): Promise<string> {
  const doc = {
    width: 8,
    height: 8,
    objects: [{ id: "cat", token: "cat", bbox: [1, 1, 3, 3], mask: "m.png" }],
  };
  const reply = await client.submitJob({
    imageBytes: new TextEncoder().encode("png"),
    sourceDoc: doc,
    targetDoc: { width: 8, height: 8, objects: [{ id: "cat", bbox: [4, 4, 3, 3] }] },
    masks: [{ name: "m.png", bytes: new TextEncoder().encode("png") }],
    config: { backend: "toy", seed: 0 },
  });
  return reply.jobId;
}

describe("watching a job", () => {
  it("polling delivers every row once and stops at the terminal state", async () => {
    const svc = mockService({ script: script() });
    const client = new ServiceClient("http://svc", svc.fetch);
    const jobId = await submitOne(svc, client);
    const rows: EventRow[] = [];
    const states: string[] = [];
    const outcome = await watchEvents(
      client, jobId,
      (row) => rows.push(row),
      (state) => states.push(state),
      { pollDelayMs: 0 },
    );
    expect(outcome).toBe("terminal");
    expect(rows.map((r) => r.seq)).toEqual([1, 2, 3, 4, 5, 6, 7, 8]);
    expect(rows[rows.length - 1].event.type).toBe("done");
    expect(states[states.length - 1]).toBe("DONE");
  });

  it("the stream transport replays the log and honors the closing message", async () => {
    const svc = mockService({ script: script() });
    const client = new ServiceClient("http://svc", svc.fetch);
    const jobId = await submitOne(svc, client);
    const rows: EventRow[] = [];
    const outcome = await watchEvents(
      client, jobId,
      (row) => rows.push(row),
      () => {},
      { transport: "sse" },
    );
    expect(outcome).toBe("terminal");
    expect(rows.map((r) => r.seq)).toEqual([1, 2, 3, 4, 5, 6, 7, 8]);
    expect(rows.map((r) => r.event.type)).toEqual([
      "queued", "running", "step", "step", "step", "step", "step", "done",
    ]);
  });

  it("an aborted watch reports that instead of spinning forever", async () => {
    // a script that never reaches a terminal state
    const svc = mockService({ script: [[{ type: "queued" }], [], [], [], []] });
    const client = new ServiceClient("http://svc", svc.fetch);
    const jobId = await submitOne(svc, client);
    const controller = new AbortController();
    const watch = watchEvents(client, jobId, () => {}, () => {}, {
      pollDelayMs: 0,
      signal: controller.signal,
    });
    controller.abort();
    expect(await watch).toBe("aborted");
  });
});
