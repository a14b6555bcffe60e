import { ApiFailure, ServiceClient } from "./client.js";
import { bboxOfMask, bitsFromMask, transportMask } from "./geometry.js";
import { deepFreeze, parseLayoutDoc, LayoutParseError, targetForSubmit } from "./layoutDoc.js";
import { watchEvents, WatchOptions } from "./sse.js";
import type { Store } from "./state.js";
import type { JobConfig, LayoutDoc, LayoutObjectDoc, MaskBitmap, ObjectState } from "./types.js";

export interface ImportFiles {
  imageUrl?: string | null;
  /** decoded mask bitmaps by uploaded file name */
  maskBitmaps?: Record<string, MaskBitmap>;
  /** raw mask file bytes by name, forwarded verbatim on submit */
  maskBytes?: Record<string, Uint8Array>;
}

/**
 * Parse a layout document (text or already-parsed JSON) into fresh canvas
 * state. Parse and schema problems land in the banner and leave the
 * current canvas untouched.
 */
export function importSource(store: Store, source: string | unknown, files: ImportFiles = {}): boolean {
  let raw: unknown = source;
  if (typeof source === "string") {
    try {
      raw = JSON.parse(source);
    } catch (e) {
      store.dispatch({
        type: "import-error",
        message: `layout is not valid JSON: ${e instanceof Error ? e.message : e}`,
      });
      return false;
    }
  }
  try {
    const { doc, objects } = parseLayoutDoc(raw, files.maskBitmaps ?? {});
    store.dispatch({
      type: "import-ok",
      doc,
      objects,
      imageUrl: files.imageUrl ?? null,
      maskBytes: files.maskBytes ?? {},
    });
    return true;
  } catch (e) {
    if (e instanceof LayoutParseError) {
      store.dispatch({ type: "import-error", message: e.message });
      return false;
    }
    throw e;
  }
}

/** The config object the service accepts, built from the UI fields. */
export function configDoc(config: JobConfig): Record<string, unknown> {
  const doc: Record<string, unknown> = {
    backend: config.backend,
    seed: config.seed,
    init: config.init,
    mode: config.mode,
  };
  const guidance: Record<string, number> = {};
  if (config.eta !== null) guidance.eta = config.eta;
  if (config.guidanceFraction !== null) guidance.guidance_fraction = config.guidanceFraction;
  if (Object.keys(guidance).length) doc.guidance = guidance;
  if (config.stepDelayMs > 0) doc.step_delay_ms = config.stepDelayMs;
  return doc;
}

export interface SubmitDeps {
  imageBytes: Uint8Array;
  imageName?: string;
  idempotencyKey?: string;
  /** PNG-encode a mask bitmap; required only for inline-mask imports */
  encodeMaskPng?: (mask: MaskBitmap) => Promise<Uint8Array>;
}

/**
 * Collect the uploads the submit route needs. The source document goes up
 * verbatim when it references mask files; an inline-mask import gets a
 * transport document with one synthesized PNG per object. Target boxes go
 * up bbox-only, in stacking order.
 */
async function buildSubmitParts(store: Store, deps: SubmitDeps) {
  const canvas = store.getState().canvas;
  const doc = canvas.sourceDoc;
  if (!doc) throw new Error("nothing imported");
  const masks: Array<{ name: string; bytes: Uint8Array }> = [];
  let sourceDoc: LayoutDoc;
  if (canvas.objects.every((o) => o.maskFile)) {
    sourceDoc = doc;
    const wanted = new Set(canvas.objects.map((o) => o.maskFile as string));
    for (const name of wanted) {
      const bytes = canvas.maskBytes[name];
      if (!bytes) throw new Error(`mask file '${name}' was not uploaded`);
      masks.push({ name, bytes });
    }
  } else {
    if (!deps.encodeMaskPng) {
      throw new Error("this import carries inline masks; a PNG encoder is required to submit");
    }
    const entries: LayoutObjectDoc[] = [];
    for (const entry of doc.objects) {
      const obj = canvas.objects.find((o) => o.id === entry.id) as ObjectState;
      if (!obj.mask) throw new Error(`object '${obj.id}' has no mask to upload`);
      const name = `${obj.id}_mask.png`;
      masks.push({ name, bytes: await deps.encodeMaskPng(obj.mask) });
      entries.push({ id: obj.id, token: obj.token, mask: name, bbox: entry.bbox });
    }
    sourceDoc = { width: doc.width, height: doc.height, objects: entries };
  }
  return { sourceDoc, targetDoc: targetForSubmit(canvas), masks };
}

/**
 * Submit the authored layout as an edit job. Validation findings returned
 * by the service attach to the objects they name; everything else lands
 * in the banner. Resolves with the job id, or null when rejected.
 */
export async function submitJob(
  store: Store,
  client: ServiceClient,
  deps: SubmitDeps,
): Promise<string | null> {
  let parts;
  try {
    parts = await buildSubmitParts(store, deps);
  } catch (e) {
    store.dispatch({ type: "banner", message: e instanceof Error ? e.message : String(e) });
    return null;
  }
  store.dispatch({ type: "submit-start" });
  try {
    const reply = await client.submitJob({
      imageBytes: deps.imageBytes,
      imageName: deps.imageName,
      sourceDoc: parts.sourceDoc,
      targetDoc: parts.targetDoc,
      masks: parts.masks,
      config: configDoc(store.getState().config),
      idempotencyKey: deps.idempotencyKey,
    });
    store.dispatch({ type: "submit-ok", jobId: reply.jobId, duplicate: reply.duplicate });
    return reply.jobId;
  } catch (e) {
    if (e instanceof ApiFailure) {
      store.dispatch({ type: "submit-error", message: e.message, findings: e.findings });
      return null;
    }
    store.dispatch({
      type: "submit-error",
      message: e instanceof Error ? e.message : String(e),
      findings: [],
    });
    return null;
  }
}

/** One live subscription per job: starting a new watch stops the old one. */
export class WatchRegistry {
  private active = new Map<string, AbortController>();

  async watch(
    store: Store,
    client: ServiceClient,
    jobId: string,
    options: Omit<WatchOptions, "signal"> = {},
  ): Promise<"terminal" | "aborted"> {
    this.stop(jobId);
    const controller = new AbortController();
    this.active.set(jobId, controller);
    store.dispatch({ type: "watch-start", jobId });
    try {
      return await watchEvents(
        client,
        jobId,
        (row) => store.dispatch({ type: "job-event", jobId, row }),
        (state) => store.dispatch({ type: "job-state", jobId, state }),
        { ...options, signal: controller.signal },
      );
    } finally {
      if (this.active.get(jobId) === controller) this.active.delete(jobId);
    }
  }

  stop(jobId: string): void {
    this.active.get(jobId)?.abort();
    this.active.delete(jobId);
  }

  stopAll(): void {
    for (const controller of this.active.values()) controller.abort();
    this.active.clear();
  }
}

export type ObjectUrl = (bytes: Uint8Array, type: string) => string;

const defaultObjectUrl: ObjectUrl = (bytes, type) =>
  URL.createObjectURL(new Blob([bytes.buffer.slice(bytes.byteOffset, bytes.byteOffset + bytes.byteLength) as ArrayBuffer], { type }));

/**
 * Fetch the finished image and stage the before/after view against the
 * current source image. Throws ApiFailure (409) while the job is not DONE.
 */
export async function loadCompare(
  store: Store,
  client: ServiceClient,
  jobId: string,
  objectUrl: ObjectUrl = defaultObjectUrl,
): Promise<string> {
  const beforeUrl = store.getState().canvas.imageUrl;
  if (!beforeUrl) throw new Error("no source image loaded");
  const bytes = await client.resultBytes(jobId);
  const afterUrl = objectUrl(bytes, "image/png");
  store.dispatch({ type: "compare-ready", beforeUrl, afterUrl });
  return afterUrl;
}

/**
 * Seed a fresh editing session from a finished job: the result image
 * becomes the new source, each object's source box becomes its last
 * target box, and masks are transported to match what the service
 * rendered. The feedback loop for chained edits.
 */
export function forkFromResult(store: Store, resultUrl: string): void {
  const canvas = store.getState().canvas;
  const { imageWidth, imageHeight } = canvas;
  const objects: ObjectState[] = [];
  const entries: LayoutObjectDoc[] = [];
  for (const obj of canvas.objects) {
    let mask: MaskBitmap | null = null;
    let box = { ...obj.target };
    if (obj.mask) {
      mask = transportMask(obj.mask, obj.source, obj.target, imageWidth, imageHeight);
      box = bboxOfMask(mask) ?? box;
    }
    objects.push({
      id: obj.id,
      token: obj.token,
      source: { ...box },
      target: { ...box },
      mask,
      maskFile: null,
      warning: null,
      finding: null,
    });
    const entry: LayoutObjectDoc = {
      id: obj.id,
      token: obj.token,
      bbox: [box.x, box.y, box.w, box.h],
    };
    if (mask) entry.mask_bits = bitsFromMask(mask);
    entries.push(entry);
  }
  const doc: LayoutDoc = deepFreeze({ width: imageWidth, height: imageHeight, objects: entries });
  store.dispatch({ type: "fork", imageUrl: resultUrl, doc, objects });
}
