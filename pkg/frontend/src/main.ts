import { ServiceClient } from "./client.js";
import {
  WatchRegistry,
  forkFromResult,
  importSource,
  loadCompare,
  submitJob,
} from "./controller.js";
import { handleAt } from "./geometry.js";
import { exportTarget } from "./layoutDoc.js";
import { Ctx2d, drawCompare, drawLossCurve, drawScene, objectColor } from "./render.js";
import { createStore } from "./state.js";
import type { AppState, MaskBitmap, ResizeHandle } from "./types.js";

const store = createStore();
const registry = new WatchRegistry();

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

const sceneCanvas = el<HTMLCanvasElement>("scene");
const lossCanvas = el<HTMLCanvasElement>("loss");
const compareCanvas = el<HTMLCanvasElement>("compare");
const objectList = el<HTMLUListElement>("objects");
const bannerBox = el<HTMLDivElement>("banner");
const statusLine = el<HTMLDivElement>("status");
const previewStrip = el<HTMLDivElement>("previews");
const wipeSlider = el<HTMLInputElement>("wipe");

let client = new ServiceClient(el<HTMLInputElement>("base-url").value);
let imageBytes: Uint8Array | null = null;
let imageName = "source.png";
let sceneScale = 1;

// ------------------------------------------------------------ image cache

const images = new Map<string, HTMLImageElement>();

function imageFor(url: string | null): HTMLImageElement | null {
  if (!url) return null;
  let img = images.get(url);
  if (!img) {
    img = new Image();
    img.onload = () => render(store.getState());
    img.src = url;
    images.set(url, img);
  }
  return img.complete && img.naturalWidth ? img : null;
}

// ------------------------------------------------------- mask png codecs

async function decodeMaskPng(file: File): Promise<MaskBitmap> {
  const bitmap = await createImageBitmap(file);
  const off = document.createElement("canvas");
  off.width = bitmap.width;
  off.height = bitmap.height;
  const ctx = off.getContext("2d") as CanvasRenderingContext2D;
  ctx.drawImage(bitmap, 0, 0);
  const pixels = ctx.getImageData(0, 0, bitmap.width, bitmap.height).data;
  const data = new Uint8Array(bitmap.width * bitmap.height);
  for (let i = 0; i < data.length; i++) {
    data[i] = pixels[i * 4] >= 128 ? 1 : 0;
  }
  return { width: bitmap.width, height: bitmap.height, data };
}

async function encodeMaskPng(mask: MaskBitmap): Promise<Uint8Array> {
  const off = document.createElement("canvas");
  off.width = mask.width;
  off.height = mask.height;
  const ctx = off.getContext("2d") as CanvasRenderingContext2D;
  const pixels = ctx.createImageData(mask.width, mask.height);
  for (let i = 0; i < mask.data.length; i++) {
    const v = mask.data[i] ? 255 : 0;
    pixels.data[i * 4] = v;
    pixels.data[i * 4 + 1] = v;
    pixels.data[i * 4 + 2] = v;
    pixels.data[i * 4 + 3] = 255;
  }
  ctx.putImageData(pixels, 0, 0);
  const blob: Blob = await new Promise((resolve, reject) =>
    off.toBlob((b) => (b ? resolve(b) : reject(new Error("png encode failed"))), "image/png"),
  );
  return new Uint8Array(await blob.arrayBuffer());
}

// ------------------------------------------------------------ import flow

async function runImport(): Promise<void> {
  const imageFile = el<HTMLInputElement>("image-input").files?.[0];
  const layoutFile = el<HTMLInputElement>("layout-input").files?.[0];
  const maskFiles = Array.from(el<HTMLInputElement>("mask-input").files ?? []);
  if (!layoutFile) {
    store.dispatch({ type: "banner", message: "pick a layout JSON file first" });
    return;
  }
  const maskBitmaps: Record<string, MaskBitmap> = {};
  const maskBytes: Record<string, Uint8Array> = {};
  for (const file of maskFiles) {
    try {
      maskBitmaps[file.name] = await decodeMaskPng(file);
    } catch {
      store.dispatch({ type: "banner", message: `mask '${file.name}' is not a readable image` });
      return;
    }
    maskBytes[file.name] = new Uint8Array(await file.arrayBuffer());
  }
  let imageUrl: string | null = null;
  if (imageFile) {
    imageBytes = new Uint8Array(await imageFile.arrayBuffer());
    imageName = imageFile.name;
    imageUrl = URL.createObjectURL(imageFile);
  } else {
    imageBytes = null;
  }
  importSource(store, await layoutFile.text(), { imageUrl, maskBitmaps, maskBytes });
}

// -------------------------------------------------------- mouse handling

interface DragState {
  id: string;
  handle: string;
  lastX: number;
  lastY: number;
}

let drag: DragState | null = null;

function imagePoint(ev: MouseEvent): { x: number; y: number } {
  const rect = sceneCanvas.getBoundingClientRect();
  return {
    x: (ev.clientX - rect.left) / sceneScale,
    y: (ev.clientY - rect.top) / sceneScale,
  };
}

sceneCanvas.addEventListener("mousedown", (ev) => {
  const p = imagePoint(ev);
  const hit = handleAt(store.getState().canvas.objects, p.x, p.y, 6 / sceneScale);
  if (!hit) {
    store.dispatch({ type: "select", id: null });
    return;
  }
  store.dispatch({ type: "select", id: hit.id });
  drag = { id: hit.id, handle: hit.handle, lastX: p.x, lastY: p.y };
});

sceneCanvas.addEventListener("mousemove", (ev) => {
  if (!drag) return;
  const p = imagePoint(ev);
  const dx = Math.round(p.x - drag.lastX);
  const dy = Math.round(p.y - drag.lastY);
  if (!dx && !dy) return;
  drag.lastX += dx;
  drag.lastY += dy;
  if (drag.handle === "move") {
    store.dispatch({ type: "drag", id: drag.id, dx, dy });
  } else {
    store.dispatch({ type: "resize", id: drag.id, handle: drag.handle as ResizeHandle, dx, dy });
  }
});

window.addEventListener("mouseup", () => {
  drag = null;
});

// ----------------------------------------------------------- job actions

async function runSubmit(): Promise<void> {
  if (!imageBytes) {
    store.dispatch({ type: "banner", message: "import an image before submitting" });
    return;
  }
  const jobId = await submitJob(store, client, { imageBytes, imageName, encodeMaskPng });
  if (!jobId) return;
  const outcome = await registry
    .watch(store, client, jobId, { transport: "sse" })
    .catch(() => registry.watch(store, client, jobId, { transport: "poll" }));
  if (outcome !== "terminal") return;
  if (store.getState().watch?.state === "DONE") {
    await loadCompare(store, client, jobId);
  }
}

async function runCancel(): Promise<void> {
  const jobId = store.getState().submit.jobId;
  if (jobId) await client.cancel(jobId).catch(() => undefined);
}

function runExport(): void {
  const state = store.getState();
  if (!state.canvas.sourceDoc) {
    store.dispatch({ type: "banner", message: "nothing to export" });
    return;
  }
  const doc = exportTarget(state.canvas);
  const blob = new Blob([JSON.stringify(doc, null, 2)], { type: "application/json" });
  const link = document.createElement("a");
  link.href = URL.createObjectURL(blob);
  link.download = "target_layout.json";
  link.click();
  URL.revokeObjectURL(link.href);
}

function runFork(): void {
  const compare = store.getState().compare;
  if (!compare) return;
  // the result becomes the new source image, bytes included
  fetch(compare.afterUrl)
    .then((res) => res.arrayBuffer())
    .then((buf) => {
      imageBytes = new Uint8Array(buf);
      imageName = "forked.png";
      forkFromResult(store, compare.afterUrl);
    });
}

// -------------------------------------------------------------- rendering

function renderObjects(state: AppState): void {
  objectList.textContent = "";
  state.canvas.objects.forEach((obj, i) => {
    const li = document.createElement("li");
    li.className = obj.id === state.canvas.selected ? "object selected" : "object";
    const swatch = document.createElement("span");
    swatch.className = "swatch";
    swatch.style.background = objectColor(i);
    const label = document.createElement("span");
    const b = obj.target;
    label.textContent = `${obj.id} (${obj.token})  [${b.x}, ${b.y}, ${b.w}, ${b.h}]`;
    li.append(swatch, label);
    for (const [text, to] of [["↓ back", i - 1], ["↑ front", i + 1]] as const) {
      const btn = document.createElement("button");
      btn.textContent = text;
      btn.onclick = () => store.dispatch({ type: "reorder", id: obj.id, to });
      li.append(btn);
    }
    const reset = document.createElement("button");
    reset.textContent = "reset";
    reset.onclick = () => store.dispatch({ type: "reset-box", id: obj.id });
    li.append(reset);
    const badge = obj.finding ?? obj.warning;
    if (badge) {
      const span = document.createElement("span");
      span.className = obj.finding ? "finding" : "warning";
      span.textContent = `⚠ ${badge}`;
      li.append(span);
    }
    li.onclick = (ev) => {
      if (!(ev.target instanceof HTMLButtonElement)) {
        store.dispatch({ type: "select", id: obj.id });
      }
    };
    objectList.append(li);
  });
}

function renderStatus(state: AppState): void {
  const parts: string[] = [];
  if (state.submit.phase === "sending") parts.push("submitting…");
  if (state.submit.jobId) {
    parts.push(`job ${state.submit.jobId}${state.submit.duplicate ? " (duplicate)" : ""}`);
  }
  if (state.watch) {
    parts.push(state.watch.state.toLowerCase());
    if (state.watch.lastStep) parts.push(`step ${state.watch.lastStep}`);
    if (state.watch.error) parts.push(state.watch.error);
  }
  statusLine.textContent = parts.join("  ·  ") || "idle";
}

function renderPreviews(state: AppState): void {
  previewStrip.textContent = "";
  for (const frame of state.watch?.previews ?? []) {
    const img = document.createElement("img");
    img.src = frame.url;
    img.title = `step ${frame.step}`;
    previewStrip.append(img);
  }
}

function render(state: AppState): void {
  const { canvas } = state;
  if (canvas.imageWidth) {
    sceneScale = Math.min(720 / canvas.imageWidth, 540 / canvas.imageHeight, 8);
    sceneCanvas.width = Math.round(canvas.imageWidth * sceneScale);
    sceneCanvas.height = Math.round(canvas.imageHeight * sceneScale);
    const ctx = sceneCanvas.getContext("2d") as unknown as Ctx2d;
    drawScene(ctx, canvas, { scale: sceneScale, image: imageFor(canvas.imageUrl) ?? undefined });
  }
  drawLossCurve(
    lossCanvas.getContext("2d") as unknown as Ctx2d,
    state.watch?.points ?? [],
    lossCanvas.width,
    lossCanvas.height,
  );
  const compareWrap = el<HTMLDivElement>("compare-wrap");
  if (state.compare) {
    compareWrap.style.display = "";
    const before = imageFor(state.compare.beforeUrl);
    const after = imageFor(state.compare.afterUrl);
    if (before && after) {
      drawCompare(
        compareCanvas.getContext("2d") as unknown as Ctx2d,
        before,
        after,
        state.compare,
        compareCanvas.width,
        compareCanvas.height,
      );
    }
  } else {
    compareWrap.style.display = "none";
  }
  bannerBox.textContent = state.banner ?? "";
  bannerBox.style.display = state.banner ? "" : "none";
  renderObjects(state);
  renderStatus(state);
  renderPreviews(state);
}

// ---------------------------------------------------------------- wiring

el<HTMLButtonElement>("import-btn").onclick = () => void runImport();
el<HTMLButtonElement>("submit-btn").onclick = () => void runSubmit();
el<HTMLButtonElement>("cancel-btn").onclick = () => void runCancel();
el<HTMLButtonElement>("export-btn").onclick = runExport;
el<HTMLButtonElement>("fork-btn").onclick = runFork;

el<HTMLInputElement>("base-url").onchange = (ev) => {
  client = new ServiceClient((ev.target as HTMLInputElement).value);
};
el<HTMLInputElement>("seed").onchange = (ev) => {
  store.dispatch({ type: "config", patch: { seed: Number((ev.target as HTMLInputElement).value) || 0 } });
};
el<HTMLSelectElement>("init").onchange = (ev) => {
  store.dispatch({ type: "config", patch: { init: (ev.target as HTMLSelectElement).value } });
};
el<HTMLInputElement>("eta").onchange = (ev) => {
  const raw = (ev.target as HTMLInputElement).value.trim();
  store.dispatch({ type: "config", patch: { eta: raw === "" ? null : Number(raw) } });
};
el<HTMLInputElement>("step-delay").onchange = (ev) => {
  store.dispatch({ type: "config", patch: { stepDelayMs: Number((ev.target as HTMLInputElement).value) || 0 } });
};
wipeSlider.oninput = () => {
  store.dispatch({ type: "wipe", value: Number(wipeSlider.value) / 100 });
};

store.subscribe(render);
render(store.getState());
