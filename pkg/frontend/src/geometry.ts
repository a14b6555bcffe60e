import type { Box, Handle, MaskBitmap, ObjectState, ResizeHandle } from "./types.js";

/**
 * Clamp a box to stay inside a width x height image. Sizes are capped at
 * the image, floored at one pixel, and the origin is shifted so the whole
 * box fits. All coordinates are rounded to integers (the layout grid).
 */
export function clampBox(box: Box, width: number, height: number): Box {
  const w = Math.min(Math.max(1, Math.round(box.w)), width);
  const h = Math.min(Math.max(1, Math.round(box.h)), height);
  const x = Math.min(Math.max(0, Math.round(box.x)), width - w);
  const y = Math.min(Math.max(0, Math.round(box.y)), height - h);
  return { x, y, w, h };
}

export function boxesEqual(a: Box, b: Box): boolean {
  return a.x === b.x && a.y === b.y && a.w === b.w && a.h === b.h;
}

export function boxInBounds(box: Box, width: number, height: number): boolean {
  return (
    box.w >= 1 && box.h >= 1 &&
    box.x >= 0 && box.y >= 0 &&
    box.x + box.w <= width && box.y + box.h <= height
  );
}

export function applyDrag(box: Box, dx: number, dy: number, width: number, height: number): Box {
  return clampBox({ x: box.x + dx, y: box.y + dy, w: box.w, h: box.h }, width, height);
}

/** The edge moves alone: the opposite side stays pinned, minimum size one pixel. */
export function resizeRequest(box: Box, handle: ResizeHandle, dx: number, dy: number): Box {
  let { x, y, w, h } = box;
  const right = x + w;
  const bottom = y + h;
  if (handle.includes("w")) {
    x = Math.min(Math.round(x + dx), right - 1);
    w = right - x;
  }
  if (handle.includes("e")) {
    w = Math.max(1, Math.round(w + dx));
  }
  if (handle.includes("n")) {
    y = Math.min(Math.round(y + dy), bottom - 1);
    h = bottom - y;
  }
  if (handle.includes("s")) {
    h = Math.max(1, Math.round(h + dy));
  }
  return { x, y, w, h };
}

/**
 * Resize with the anchor pinned: moved edges are pulled back to the image
 * instead of sliding the whole box the way a drag would.
 */
export function applyResize(
  box: Box,
  handle: ResizeHandle,
  dx: number,
  dy: number,
  width: number,
  height: number,
): Box {
  const moved = resizeRequest(box, handle, dx, dy);
  const right = Math.min(moved.x + moved.w, width);
  const bottom = Math.min(moved.y + moved.h, height);
  const x = Math.max(moved.x, 0);
  const y = Math.max(moved.y, 0);
  return { x, y, w: Math.max(1, right - x), h: Math.max(1, bottom - y) };
}

const CORNERS: Array<[ResizeHandle, number, number]> = [
  ["nw", 0, 0],
  ["ne", 1, 0],
  ["sw", 0, 1],
  ["se", 1, 1],
];

/**
 * Hit-test a point against the target boxes, front-most object first
 * (the stacking order puts the front-most object last in the array).
 * Corners win over edges, edges over the interior.
 */
export function handleAt(
  objects: ObjectState[],
  px: number,
  py: number,
  tol: number,
): { id: string; handle: Handle } | null {
  for (let i = objects.length - 1; i >= 0; i--) {
    const obj = objects[i];
    const b = obj.target;
    const near =
      px >= b.x - tol && px <= b.x + b.w + tol &&
      py >= b.y - tol && py <= b.y + b.h + tol;
    if (!near) continue;
    for (const [handle, fx, fy] of CORNERS) {
      const cx = b.x + fx * b.w;
      const cy = b.y + fy * b.h;
      if (Math.abs(px - cx) <= tol && Math.abs(py - cy) <= tol) {
        return { id: obj.id, handle };
      }
    }
    const onWest = Math.abs(px - b.x) <= tol;
    const onEast = Math.abs(px - (b.x + b.w)) <= tol;
    const onNorth = Math.abs(py - b.y) <= tol;
    const onSouth = Math.abs(py - (b.y + b.h)) <= tol;
    const insideX = px >= b.x && px <= b.x + b.w;
    const insideY = py >= b.y && py <= b.y + b.h;
    if (onWest && insideY) return { id: obj.id, handle: "w" };
    if (onEast && insideY) return { id: obj.id, handle: "e" };
    if (onNorth && insideX) return { id: obj.id, handle: "n" };
    if (onSouth && insideX) return { id: obj.id, handle: "s" };
    if (insideX && insideY) return { id: obj.id, handle: "move" };
  }
  return null;
}

/** Tight bounding box of the set pixels, or null for an empty mask. */
export function bboxOfMask(mask: MaskBitmap): Box | null {
  let minX = mask.width;
  let minY = mask.height;
  let maxX = -1;
  let maxY = -1;
  for (let y = 0; y < mask.height; y++) {
    const row = y * mask.width;
    for (let x = 0; x < mask.width; x++) {
      if (mask.data[row + x]) {
        if (x < minX) minX = x;
        if (x > maxX) maxX = x;
        if (y < minY) minY = y;
        if (y > maxY) maxY = y;
      }
    }
  }
  if (maxX < 0) return null;
  return { x: minX, y: minY, w: maxX - minX + 1, h: maxY - minY + 1 };
}

function base64ToBytes(b64: string): Uint8Array {
  const bin = atob(b64);
  const out = new Uint8Array(bin.length);
  for (let i = 0; i < bin.length; i++) out[i] = bin.charCodeAt(i);
  return out;
}

function bytesToBase64(bytes: Uint8Array): string {
  let bin = "";
  for (let i = 0; i < bytes.length; i++) bin += String.fromCharCode(bytes[i]);
  return btoa(bin);
}

/**
 * Unpack base64 row-major bits into a mask. The packing is MSB-first with
 * the final byte zero-padded, so the byte count must be exactly
 * ceil(width*height / 8).
 */
export function maskFromBits(b64: string, width: number, height: number): MaskBitmap {
  const bytes = base64ToBytes(b64);
  const expected = Math.ceil((width * height) / 8);
  if (bytes.length !== expected) {
    throw new Error(`mask_bits has ${bytes.length} bytes, expected ${expected}`);
  }
  const data = new Uint8Array(width * height);
  for (let i = 0; i < data.length; i++) {
    data[i] = (bytes[i >> 3] >> (7 - (i & 7))) & 1;
  }
  return { width, height, data };
}

/** Inverse of maskFromBits. */
export function bitsFromMask(mask: MaskBitmap): string {
  const n = mask.width * mask.height;
  const bytes = new Uint8Array(Math.ceil(n / 8));
  for (let i = 0; i < n; i++) {
    if (mask.data[i]) bytes[i >> 3] |= 1 << (7 - (i & 7));
  }
  return bytesToBase64(bytes);
}

/** Round half to even, matching the service's grid resampling. */
export function rint(v: number): number {
  const f = Math.floor(v);
  const diff = v - f;
  if (diff > 0.5) return f + 1;
  if (diff < 0.5) return f;
  return f % 2 === 0 ? f : f + 1;
}

/**
 * Map the part of a source mask under srcBox onto tarBox: every target
 * pixel pulls from the nearest source pixel under the box-to-box affine
 * map. This mirrors how the service builds target masks from bbox-only
 * submissions, so a forked session shows the masks the server will use.
 */
export function transportMask(
  mask: MaskBitmap,
  srcBox: Box,
  tarBox: Box,
  width: number,
  height: number,
): MaskBitmap {
  const data = new Uint8Array(width * height);
  const sxScale = srcBox.w / tarBox.w;
  const syScale = srcBox.h / tarBox.h;
  for (let ty = tarBox.y; ty < tarBox.y + tarBox.h; ty++) {
    if (ty < 0 || ty >= height) continue;
    let sy = rint((ty - tarBox.y + 0.5) * syScale + srcBox.y - 0.5);
    sy = Math.min(Math.max(sy, srcBox.y), srcBox.y + srcBox.h - 1);
    for (let tx = tarBox.x; tx < tarBox.x + tarBox.w; tx++) {
      if (tx < 0 || tx >= width) continue;
      let sx = rint((tx - tarBox.x + 0.5) * sxScale + srcBox.x - 0.5);
      sx = Math.min(Math.max(sx, srcBox.x), srcBox.x + srcBox.w - 1);
      if (sy >= 0 && sy < mask.height && sx >= 0 && sx < mask.width) {
        data[ty * width + tx] = mask.data[sy * mask.width + sx];
      }
    }
  }
  return { width, height, data };
}
