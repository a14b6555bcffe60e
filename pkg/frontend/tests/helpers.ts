import type { Ctx2d } from "../src/render";
import type { Box, LayoutDoc, MaskBitmap } from "../src/types";

/** Stable stringify with object keys sorted, arrays kept in order. */
export function canonical(value: unknown): string {
  return JSON.stringify(sortKeys(value));
}

function sortKeys(value: unknown): unknown {
  if (Array.isArray(value)) return value.map(sortKeys);
  if (value && typeof value === "object") {
    const out: Record<string, unknown> = {};
    for (const key of Object.keys(value).sort()) {
      out[key] = sortKeys((value as Record<string, unknown>)[key]);
    }
    return out;
  }
  return value;
}

export function rectMask(width: number, height: number, box: Box): MaskBitmap {
  const data = new Uint8Array(width * height);
  for (let y = box.y; y < box.y + box.h; y++) {
    for (let x = box.x; x < box.x + box.w; x++) {
      data[y * width + x] = 1;
    }
  }
  return { width, height, data };
}

/**
 * The standard three-object fixture: a 64x48 scene with file-referenced
 * masks for cat and dog and an extra vendor key on dog, plus a pot whose
 * box will be derived. Box geometry is chosen so nothing touches an edge.
 */
export function threeObjectDoc(): LayoutDoc {
  return {
    width: 64,
    height: 48,
    objects: [
      { id: "cat", token: "orange cat", bbox: [4, 6, 16, 12], mask: "cat_mask.png" },
      { id: "dog", token: "dog", bbox: [28, 8, 20, 16], mask: "dog_mask.png", note: "keep" },
      { id: "pot", token: "clay pot", bbox: [10, 30, 12, 10], mask: "pot_mask.png" },
    ],
  };
}

export function threeObjectMasks(): Record<string, MaskBitmap> {
  return {
    "cat_mask.png": rectMask(64, 48, { x: 4, y: 6, w: 16, h: 12 }),
    "dog_mask.png": rectMask(64, 48, { x: 28, y: 8, w: 20, h: 16 }),
    "pot_mask.png": rectMask(64, 48, { x: 10, y: 30, w: 12, h: 10 }),
  };
}

export function threeObjectMaskBytes(): Record<string, Uint8Array> {
  // the mock service never decodes these; names are what matter
  return {
    "cat_mask.png": new TextEncoder().encode("png:cat"),
    "dog_mask.png": new TextEncoder().encode("png:dog"),
    "pot_mask.png": new TextEncoder().encode("png:pot"),
  };
}

export interface CtxCall {
  op: string;
  args: unknown[];
}

/** A recording stand-in for a 2d context; every call and property set is logged. */
export function recordingCtx(): { ctx: Ctx2d; calls: CtxCall[] } {
  const calls: CtxCall[] = [];
  const methods = [
    "save", "restore", "beginPath", "rect", "moveTo", "lineTo", "stroke",
    "fill", "clip", "clearRect", "fillRect", "strokeRect", "fillText",
    "setLineDash", "drawImage",
  ];
  const target: Record<string, unknown> = {};
  for (const op of methods) {
    target[op] = (...args: unknown[]) => calls.push({ op, args });
  }
  const ctx = new Proxy(target, {
    set(obj, prop, value) {
      calls.push({ op: `set:${String(prop)}`, args: [value] });
      obj[String(prop)] = value;
      return true;
    },
  }) as unknown as Ctx2d;
  return { ctx, calls };
}

export function callsOf(calls: CtxCall[], op: string): CtxCall[] {
  return calls.filter((c) => c.op === op);
}
