import { describe, expect, it } from "vitest";
import { boxInBounds } from "../src/geometry";
import { parseLayoutDoc } from "../src/layoutDoc";
import { createStore, validateCanvas } from "../src/state";
import { canonical, threeObjectDoc, threeObjectMasks } from "./helpers";
import type { Store } from "../src/state";

function storeWithImport(): Store {
  const store = createStore();
  const { doc, objects } = parseLayoutDoc(threeObjectDoc(), threeObjectMasks());
  store.dispatch({ type: "import-ok", doc, objects, imageUrl: "blob:source", maskBytes: {} });
  return store;
}

describe("dragging", () => {
  it("moves the target box and leaves the source overlay alone", () => {
    const store = storeWithImport();
    store.dispatch({ type: "drag", id: "cat", dx: 12, dy: 4 });
    const cat = store.getState().canvas.objects[0];
    expect(cat.target).toEqual({ x: 16, y: 10, w: 16, h: 12 });
    expect(cat.source).toEqual({ x: 4, y: 6, w: 16, h: 12 });
    expect(cat.warning).toBeNull();
    expect(store.getState().canvas.dirty).toBe(true);
  });

  it("clamps a drag past the edge and flags it", () => {
    const store = storeWithImport();
    store.dispatch({ type: "drag", id: "cat", dx: 999, dy: -999 });
    const cat = store.getState().canvas.objects[0];
    expect(cat.target).toEqual({ x: 48, y: 0, w: 16, h: 12 });
    expect(boxInBounds(cat.target, 64, 48)).toBe(true);
    expect(cat.warning).toMatch(/clamped/);
    expect(validateCanvas(store.getState().canvas)).toEqual([]);
  });

  it("a resize cut short by the image edge is flagged too", () => {
    const store = storeWithImport();
    store.dispatch({ type: "resize", id: "dog", handle: "se", dx: 100, dy: 100 });
    const dog = store.getState().canvas.objects[1];
    expect(dog.target).toEqual({ x: 28, y: 8, w: 36, h: 40 });
    expect(dog.warning).toMatch(/clamped/);
  });

  it("reset restores the source geometry and clears the flags", () => {
    const store = storeWithImport();
    store.dispatch({ type: "drag", id: "cat", dx: 999, dy: 0 });
    store.dispatch({ type: "reset-box", id: "cat" });
    const cat = store.getState().canvas.objects[0];
    expect(cat.target).toEqual(cat.source);
    expect(cat.warning).toBeNull();
  });
});

describe("source immutability", () => {
  it("no amount of editing touches the imported document", () => {
    const store = storeWithImport();
    const before = canonical(store.getState().canvas.sourceDoc);
    store.dispatch({ type: "drag", id: "cat", dx: 30, dy: 10 });
    store.dispatch({ type: "resize", id: "dog", handle: "nw", dx: -5, dy: -5 });
    store.dispatch({ type: "reorder", id: "pot", to: 0 });
    store.dispatch({ type: "set-box", id: "pot", box: { x: 1, y: 1, w: 4, h: 4 } });
    const after = store.getState().canvas.sourceDoc;
    expect(canonical(after)).toBe(before);
    expect(Object.isFrozen(after)).toBe(true);
    expect(Object.isFrozen(after?.objects[0])).toBe(true);
    for (const obj of store.getState().canvas.objects) {
      const original = threeObjectDoc().objects.find((o) => o.id === obj.id);
      expect([obj.source.x, obj.source.y, obj.source.w, obj.source.h]).toEqual(original?.bbox);
    }
  });
});

describe("stacking order", () => {
  it("reorder moves an object within the array and keeps a permutation", () => {
    const store = storeWithImport();
    store.dispatch({ type: "reorder", id: "cat", to: 2 });
    const ids = store.getState().canvas.objects.map((o) => o.id);
    expect(ids).toEqual(["dog", "pot", "cat"]);
    expect([...ids].sort()).toEqual(["cat", "dog", "pot"]);
    store.dispatch({ type: "reorder", id: "cat", to: 99 });
    expect(store.getState().canvas.objects.map((o) => o.id)).toEqual(["dog", "pot", "cat"]);
  });
});

describe("import failures", () => {
  it("a bad import raises the banner and keeps the previous canvas", () => {
    const store = storeWithImport();
    const before = store.getState().canvas;
    store.dispatch({ type: "import-error", message: "layout is not valid JSON: oops" });
    expect(store.getState().banner).toMatch(/not valid JSON/);
    expect(store.getState().canvas).toBe(before);
  });
});

describe("service findings", () => {
  it("findings attach to the object they name, the rest go to the banner", () => {
    const store = storeWithImport();
    store.dispatch({
      type: "submit-error",
      message: "job spec failed validation",
      findings: [
        { level: "error", code: "ids-mismatch", message: "unknown object 'dog'", object_id: "dog" },
        { level: "error", code: "layout-dims", message: "layouts disagree on size", object_id: null },
      ],
    });
    const state = store.getState();
    expect(state.submit.phase).toBe("rejected");
    expect(state.canvas.objects[1].finding).toBe("unknown object 'dog'");
    expect(state.canvas.objects[0].finding).toBeNull();
    expect(state.banner).toContain("job spec failed validation");
    expect(state.banner).toContain("layouts disagree on size");
  });

  it("the next submit clears stale findings", () => {
    const store = storeWithImport();
    store.dispatch({
      type: "submit-error",
      message: "nope",
      findings: [{ level: "error", code: "x", message: "bad dog", object_id: "dog" }],
    });
    store.dispatch({ type: "submit-start" });
    expect(store.getState().canvas.objects[1].finding).toBeNull();
    expect(store.getState().banner).toBeNull();
  });
});

describe("job progress wiring", () => {
  it("events fold into the watched job only", () => {
    const store = storeWithImport();
    store.dispatch({ type: "submit-ok", jobId: "J1", duplicate: false });
    store.dispatch({
      type: "job-event",
      jobId: "J1",
      row: { seq: 1, event: { type: "running" } },
    });
    store.dispatch({
      type: "job-event",
      jobId: "OTHER",
      row: { seq: 2, event: { type: "failed", error: "nope" } },
    });
    expect(store.getState().watch?.state).toBe("RUNNING");
    expect(store.getState().watch?.error).toBeNull();
  });

  it("the wipe stays within [0, 1]", () => {
    const store = storeWithImport();
    store.dispatch({ type: "compare-ready", beforeUrl: "blob:a", afterUrl: "blob:b" });
    store.dispatch({ type: "wipe", value: 3 });
    expect(store.getState().compare?.wipe).toBe(1);
    store.dispatch({ type: "wipe", value: -1 });
    expect(store.getState().compare?.wipe).toBe(0);
  });
});
