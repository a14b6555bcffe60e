import { describe, expect, it } from "vitest";
import { ServiceClient } from "../src/client";
import { forkFromResult, importSource, loadCompare, submitJob, WatchRegistry } from "../src/controller";
import { bboxOfMask, boxInBounds } from "../src/geometry";
import { exportTarget } from "../src/layoutDoc";
import { lossCurvePoints } from "../src/progress";
import { drawCompare, drawLossCurve } from "../src/render";
import { createStore, validateCanvas } from "../src/state";
import {
  callsOf, canonical, recordingCtx,
  threeObjectDoc, threeObjectMaskBytes, threeObjectMasks,
} from "./helpers";
import { mockService, stepEvent } from "./mockService";

const IDS = ["cat", "dog", "pot"];

/**
 * A five-step run whose worker dies after step 3: the requeued restart
 * replays steps 1..3 before reaching new ground. The progress fold must
 * drop the replay so the curve stays monotone.
 */
function restartingRun() {
  return [
    [{ type: "queued" }, { type: "running" }],
    [stepEvent(1, 5, IDS), stepEvent(2, 5, IDS), stepEvent(3, 5, IDS)],
    [{ type: "requeued", reason: "worker lease expired" }, { type: "running" }],
    [stepEvent(1, 5, IDS), stepEvent(2, 5, IDS), stepEvent(3, 5, IDS), stepEvent(4, 5, IDS), stepEvent(5, 5, IDS)],
    [{ type: "done", output_hash: "6eadbeef" }],
  ];
}

describe("the editing flow end to end", () => {
  it("imports, edits, submits, watches a monotone run, compares, and forks", async () => {
    const store = createStore();
    const ok = importSource(store, JSON.stringify(threeObjectDoc()), {
      imageUrl: "blob:before",
      maskBitmaps: threeObjectMasks(),
      maskBytes: threeObjectMaskBytes(),
    });
    expect(ok).toBe(true);

    // round trip before any edit: the identical document, modulo key order
    expect(canonical(exportTarget(store.getState().canvas))).toBe(canonical(threeObjectDoc()));

    // a drag far past the edge clamps into bounds and flags the box
    store.dispatch({ type: "drag", id: "cat", dx: 10_000, dy: -10_000 });
    const cat = store.getState().canvas.objects.find((o) => o.id === "cat")!;
    expect(cat.target).toEqual({ x: 48, y: 0, w: 16, h: 12 });
    expect(boxInBounds(cat.target, 64, 48)).toBe(true);
    expect(cat.warning).toMatch(/clamped/);
    expect(validateCanvas(store.getState().canvas)).toEqual([]);

    const resultBytes = new TextEncoder().encode("png:final-render");
    const svc = mockService({ script: restartingRun(), resultBytes });
    const client = new ServiceClient("http://svc", svc.fetch);

    const jobId = await submitJob(store, client, {
      imageBytes: new TextEncoder().encode("png:scene"),
      imageName: "before.png",
    });
    expect(jobId).toBe("JOB0001");
    expect(store.getState().submit).toEqual({ phase: "accepted", jobId: "JOB0001", duplicate: false });
    expect(store.getState().canvas.dirty).toBe(false);

    // the service received the source verbatim and the edit as bare boxes
    const seen = svc.submits[0];
    expect(seen.imageName).toBe("before.png");
    expect(canonical(seen.sourceDoc)).toBe(canonical(threeObjectDoc()));
    expect(seen.targetDoc).toEqual({
      width: 64,
      height: 48,
      objects: [
        { id: "cat", bbox: [48, 0, 16, 12] },
        { id: "dog", bbox: [28, 8, 20, 16] },
        { id: "pot", bbox: [10, 30, 12, 10] },
      ],
    });
    expect([...seen.maskNames].sort()).toEqual(["cat_mask.png", "dog_mask.png", "pot_mask.png"]);
    expect(seen.config).toEqual({ backend: "toy", seed: 0, init: "invert", mode: "async" });

    const registry = new WatchRegistry();
    const outcome = await registry.watch(store, client, jobId!, { pollDelayMs: 0 });
    expect(outcome).toBe("terminal");

    const watch = store.getState().watch!;
    expect(watch.state).toBe("DONE");
    expect(watch.terminal).toBe(true);
    expect(watch.lastSeq).toBe(13);
    // the replayed steps 1..3 were dropped, not re-plotted
    expect(watch.dropped).toBe(3);
    expect(watch.points.map((p) => p.step)).toEqual([1, 2, 3, 4, 5]);
    const means = watch.points.map((p) => p.mean!);
    for (let i = 1; i < means.length; i++) {
      expect(means[i]).toBeLessThan(means[i - 1]);
    }

    // the plotted polyline is monotone in both axes (loss falls, y grows)
    const line = lossCurvePoints(watch.points, 300, 120);
    expect(line).toHaveLength(5);
    for (let i = 1; i < line.length; i++) {
      expect(line[i].x).toBeGreaterThan(line[i - 1].x);
      expect(line[i].y).toBeGreaterThan(line[i - 1].y);
    }
    const loss = recordingCtx();
    drawLossCurve(loss.ctx, watch.points, 300, 120);
    const polyline = [...callsOf(loss.calls, "moveTo"), ...callsOf(loss.calls, "lineTo")]
      .map((c) => c.args as [number, number]);
    expect(polyline).toHaveLength(5);
    for (let i = 1; i < polyline.length; i++) {
      expect(polyline[i][0]).toBeGreaterThan(polyline[i - 1][0]);
      expect(polyline[i][1]).toBeGreaterThan(polyline[i - 1][1]);
    }

    // before/after view against the mocked render
    let captured: Uint8Array | null = null;
    const afterUrl = await loadCompare(store, client, jobId!, (bytes) => {
      captured = bytes;
      return "blob:result";
    });
    expect(afterUrl).toBe("blob:result");
    expect(new TextDecoder().decode(captured!)).toBe("png:final-render");
    expect(store.getState().compare).toEqual({
      beforeUrl: "blob:before",
      afterUrl: "blob:result",
      wipe: 0.5,
    });

    // wipe geometry: result fills the canvas, source is clipped to the left
    const cmp = recordingCtx();
    drawCompare(cmp.ctx, "beforeImg", "afterImg", { wipe: 0.5 }, 300, 200);
    const draws = callsOf(cmp.calls, "drawImage");
    expect(draws[0].args).toEqual(["afterImg", 0, 0, 300, 200]);
    expect(draws[1].args).toEqual(["beforeImg", 0, 0, 300, 200]);
    expect(callsOf(cmp.calls, "rect")[0].args).toEqual([0, 0, 150, 200]);
    const clipAt = cmp.calls.findIndex((c) => c.op === "clip");
    const beforeAt = cmp.calls.findIndex((c) => c.op === "drawImage" && c.args[0] === "beforeImg");
    expect(clipAt).toBeGreaterThan(-1);
    expect(clipAt).toBeLessThan(beforeAt);
    expect(callsOf(cmp.calls, "moveTo")[0].args).toEqual([150, 0]);
    expect(callsOf(cmp.calls, "lineTo")[0].args).toEqual([150, 200]);

    // forking seeds a fresh session from the result
    forkFromResult(store, afterUrl);
    const forked = store.getState().canvas;
    expect(forked.imageUrl).toBe("blob:result");
    expect(forked.dirty).toBe(false);
    expect(store.getState().watch).toBeNull();
    expect(store.getState().compare).toBeNull();
    expect(Object.isFrozen(forked.sourceDoc)).toBe(true);

    const forkedCat = forked.objects.find((o) => o.id === "cat")!;
    expect(forkedCat.source).toEqual({ x: 48, y: 0, w: 16, h: 12 });
    expect(forkedCat.target).toEqual(forkedCat.source);
    expect(forkedCat.mask).not.toBeNull();
    expect(bboxOfMask(forkedCat.mask!)).toEqual({ x: 48, y: 0, w: 16, h: 12 });
    const forkedDog = forked.objects.find((o) => o.id === "dog")!;
    expect(forkedDog.source).toEqual({ x: 28, y: 8, w: 20, h: 16 });
    for (const obj of forked.objects) expect(obj.maskFile).toBeNull();

    const entries = forked.sourceDoc!.objects;
    expect(entries.map((e) => e.id)).toEqual(["cat", "dog", "pot"]);
    expect(entries[0].bbox).toEqual([48, 0, 16, 12]);
    expect(typeof entries[0].mask_bits).toBe("string");

    // the forked document survives a serialize and re-import
    const store2 = createStore();
    expect(importSource(store2, JSON.stringify(forked.sourceDoc))).toBe(true);
    expect(store2.getState().canvas.objects.map((o) => o.id)).toEqual(IDS);
  });

  it("renders validation findings beside the object they name", async () => {
    const store = createStore();
    importSource(store, threeObjectDoc(), {
      maskBitmaps: threeObjectMasks(),
      maskBytes: threeObjectMaskBytes(),
    });
    const svc = mockService({
      rejectFindings: [
        { level: "error", code: "layout-dims", message: "target dims 32x32 do not match source 64x48", object_id: null },
        { level: "error", code: "ids-mismatch", message: "unknown object 'dog'", object_id: "dog" },
      ],
    });
    const client = new ServiceClient("http://svc", svc.fetch);
    const jobId = await submitJob(store, client, { imageBytes: new Uint8Array(4) });
    expect(jobId).toBeNull();

    const state = store.getState();
    expect(state.submit.phase).toBe("rejected");
    const dog = state.canvas.objects.find((o) => o.id === "dog")!;
    expect(dog.finding).toBe("unknown object 'dog'");
    expect(state.canvas.objects.find((o) => o.id === "cat")!.finding).toBeNull();
    expect(state.banner).toContain("job spec failed validation");
    expect(state.banner).toContain("target dims 32x32");

    // resubmitting clears the stale findings before the new reply lands
    store.dispatch({ type: "submit-start" });
    for (const obj of store.getState().canvas.objects) expect(obj.finding).toBeNull();
  });

  it("starting a new watch for a job replaces the previous subscription", async () => {
    const store = createStore();
    importSource(store, threeObjectDoc(), {
      maskBitmaps: threeObjectMasks(),
      maskBytes: threeObjectMaskBytes(),
    });
    // plenty of empty polls so the first watch cannot reach a terminal state
    const script = [
      [{ type: "queued" }], [], [], [], [], [], [], [],
      [{ type: "running" }], [{ type: "done" }],
    ];
    const svc = mockService({ script });
    const client = new ServiceClient("http://svc", svc.fetch);
    const jobId = (await submitJob(store, client, { imageBytes: new Uint8Array(4) }))!;

    const registry = new WatchRegistry();
    const first = registry.watch(store, client, jobId, { pollDelayMs: 1 });
    const second = registry.watch(store, client, jobId, { pollDelayMs: 0 });
    expect(await first).toBe("aborted");
    expect(await second).toBe("terminal");
    expect(store.getState().watch!.state).toBe("DONE");
  });
});
