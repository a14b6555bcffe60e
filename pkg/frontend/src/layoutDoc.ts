import { bboxOfMask, boxInBounds, boxesEqual } from "./geometry.js";
import { maskFromBits } from "./geometry.js";
import type { Box, CanvasState, LayoutDoc, LayoutObjectDoc, MaskBitmap, ObjectState } from "./types.js";

/** A document that cannot become canvas state; the message is banner text. */
export class LayoutParseError extends Error {}

function fail(msg: string): never {
  throw new LayoutParseError(msg);
}

function isPositiveInt(v: unknown): v is number {
  return typeof v === "number" && Number.isInteger(v) && v > 0;
}

function boxFromBbox(raw: unknown, label: string, width: number, height: number): Box {
  if (!Array.isArray(raw) || raw.length !== 4 || !raw.every((v) => Number.isInteger(v))) {
    fail(`${label}: bbox must be [x, y, w, h] of integers`);
  }
  const [x, y, w, h] = raw as number[];
  const box = { x, y, w, h };
  if (!boxInBounds(box, width, height)) {
    fail(`${label}: bbox [${raw}] leaves the ${width}x${height} image`);
  }
  return box;
}

export function deepFreeze<T>(value: T): T {
  if (value && typeof value === "object") {
    for (const key of Object.keys(value as object)) {
      deepFreeze((value as Record<string, unknown>)[key]);
    }
    Object.freeze(value);
  }
  return value;
}

/**
 * Validate an imported layout document and build the editable state.
 * Target boxes start at the source positions. Masks are decoded from
 * inline bits, or looked up in `maskFiles` for file references; an object
 * whose mask is unavailable still imports as long as it carries a bbox.
 */
export function parseLayoutDoc(
  raw: unknown,
  maskFiles: Record<string, MaskBitmap> = {},
): { doc: LayoutDoc; objects: ObjectState[] } {
  if (typeof raw !== "object" || raw === null || Array.isArray(raw)) {
    fail("layout: expected a JSON object");
  }
  const doc = raw as LayoutDoc;
  if (!isPositiveInt(doc.width) || !isPositiveInt(doc.height)) {
    fail("layout: width and height must be positive integers");
  }
  if (!Array.isArray(doc.objects)) {
    fail("layout: 'objects' must be an array");
  }
  const objects: ObjectState[] = [];
  const seen = new Set<string>();
  doc.objects.forEach((entry, i) => {
    if (typeof entry !== "object" || entry === null) {
      fail(`object ${i}: expected a JSON object`);
    }
    const id = (entry as LayoutObjectDoc).id;
    if (typeof id !== "string" || !id) fail(`object ${i}: missing 'id'`);
    const label = `object '${id}'`;
    if (seen.has(id)) fail(`${label}: duplicate id`);
    seen.add(id);
    const token = (entry as LayoutObjectDoc).token;
    if (typeof token !== "string" || !token.trim()) {
      fail(`${label}: token must be a non-empty string`);
    }

    let mask: MaskBitmap | null = null;
    let maskFile: string | null = null;
    const bits = (entry as LayoutObjectDoc).mask_bits;
    const ref = (entry as LayoutObjectDoc).mask;
    if (typeof bits === "string") {
      try {
        mask = maskFromBits(bits, doc.width, doc.height);
      } catch (e) {
        fail(`${label}: ${e instanceof Error ? e.message : e}`);
      }
    } else if (typeof ref === "string") {
      maskFile = ref;
      const found = maskFiles[ref];
      if (found) {
        if (found.width !== doc.width || found.height !== doc.height) {
          fail(`${label}: mask '${ref}' is ${found.width}x${found.height}, layout says ${doc.width}x${doc.height}`);
        }
        mask = found;
      }
    }

    let box: Box;
    const rawBbox = (entry as LayoutObjectDoc).bbox;
    if (rawBbox !== undefined) {
      box = boxFromBbox(rawBbox, label, doc.width, doc.height);
    } else if (mask) {
      const derived = bboxOfMask(mask);
      if (!derived) fail(`${label}: mask has no set pixels`);
      box = derived;
    } else if (maskFile) {
      fail(`${label}: mask file '${maskFile}' was not supplied and there is no bbox`);
    } else {
      fail(`${label}: needs a bbox or a mask`);
    }

    objects.push({
      id,
      token,
      source: { ...box },
      target: { ...box },
      mask,
      maskFile,
      warning: null,
      finding: null,
    });
  });
  return { doc: deepFreeze(doc), objects };
}

/**
 * The authored target layout, in the same document shape as the import.
 * Objects are emitted in stacking order (front-most last). Each entry
 * keeps every field of its source entry; only `bbox` is replaced, and it
 * is written only when the source entry had one or the box moved, so an
 * untouched import exports as the identical document.
 */
export function exportTarget(canvas: CanvasState): LayoutDoc {
  const doc = canvas.sourceDoc;
  if (!doc) throw new Error("nothing imported");
  const entries = new Map(doc.objects.map((e) => [e.id, e]));
  const objects = canvas.objects.map((obj) => {
    const entry = entries.get(obj.id);
    if (!entry) throw new Error(`object '${obj.id}' is not in the imported document`);
    const out: LayoutObjectDoc = { ...entry };
    if (entry.bbox !== undefined || !boxesEqual(obj.target, obj.source)) {
      out.bbox = [obj.target.x, obj.target.y, obj.target.w, obj.target.h];
    }
    return out;
  });
  return { ...doc, objects };
}

/**
 * The bbox-only target document the job service expects: the server
 * rebuilds target masks by transporting each source mask into its box.
 * Submission order is the stacking order.
 */
export function targetForSubmit(canvas: CanvasState): LayoutDoc {
  return {
    width: canvas.imageWidth,
    height: canvas.imageHeight,
    objects: canvas.objects.map((obj) => ({
      id: obj.id,
      bbox: [obj.target.x, obj.target.y, obj.target.w, obj.target.h],
    })),
  };
}
