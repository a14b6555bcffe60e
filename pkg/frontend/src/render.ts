import { lossCurvePoints } from "./progress.js";
import type { CanvasState, CompareState, LossPoint } from "./types.js";

/**
 * The slice of CanvasRenderingContext2D the renderers touch. Tests pass a
 * recording stub; the browser passes the real context.
 */
export interface Ctx2d {
  strokeStyle: unknown;
  fillStyle: unknown;
  lineWidth: number;
  font: string;
  globalAlpha: number;
  save(): void;
  restore(): void;
  beginPath(): void;
  rect(x: number, y: number, w: number, h: number): void;
  moveTo(x: number, y: number): void;
  lineTo(x: number, y: number): void;
  stroke(): void;
  fill(): void;
  clip(): void;
  clearRect(x: number, y: number, w: number, h: number): void;
  fillRect(x: number, y: number, w: number, h: number): void;
  strokeRect(x: number, y: number, w: number, h: number): void;
  fillText(text: string, x: number, y: number): void;
  setLineDash(segments: number[]): void;
  drawImage(image: unknown, dx: number, dy: number, dw: number, dh: number): void;
}

const PALETTE = ["#e4572e", "#17bebb", "#76b041", "#ffc914", "#9b5de5", "#00b4d8"];

export function objectColor(index: number): string {
  return PALETTE[index % PALETTE.length];
}

export interface SceneOptions {
  /** canvas pixels per image pixel */
  scale: number;
  image?: unknown;
}

/**
 * Paint the editing canvas: the image, dashed source overlays, and solid
 * target boxes in stacking order so the front-most object draws last. The
 * selected box gets a heavier stroke; warnings and service findings show
 * as a badge above the box.
 */
export function drawScene(ctx: Ctx2d, canvas: CanvasState, opts: SceneOptions): void {
  const s = opts.scale;
  const w = canvas.imageWidth * s;
  const h = canvas.imageHeight * s;
  ctx.clearRect(0, 0, w, h);
  if (opts.image) {
    ctx.drawImage(opts.image, 0, 0, w, h);
  } else {
    ctx.fillStyle = "#202227";
    ctx.fillRect(0, 0, w, h);
  }
  canvas.objects.forEach((obj, i) => {
    const color = objectColor(i);
    ctx.save();
    ctx.setLineDash([4, 3]);
    ctx.globalAlpha = 0.55;
    ctx.strokeStyle = color;
    ctx.lineWidth = 1;
    ctx.strokeRect(obj.source.x * s, obj.source.y * s, obj.source.w * s, obj.source.h * s);
    ctx.restore();

    ctx.save();
    ctx.strokeStyle = color;
    ctx.lineWidth = obj.id === canvas.selected ? 3 : 2;
    ctx.strokeRect(obj.target.x * s, obj.target.y * s, obj.target.w * s, obj.target.h * s);
    ctx.font = "12px sans-serif";
    ctx.fillStyle = color;
    ctx.fillText(obj.id, obj.target.x * s + 3, obj.target.y * s - 4);
    const badge = obj.finding ?? obj.warning;
    if (badge) {
      ctx.fillStyle = obj.finding ? "#d64545" : "#c79a1b";
      ctx.fillText(`⚠ ${badge}`, obj.target.x * s + 3, obj.target.y * s + 12);
    }
    ctx.restore();
  });
}

/**
 * Stroke the mean region loss per step as a polyline. The fold that
 * produces the points already dropped out-of-order steps, so the x axis
 * is strictly increasing by construction.
 */
export function drawLossCurve(ctx: Ctx2d, points: LossPoint[], width: number, height: number): void {
  ctx.clearRect(0, 0, width, height);
  ctx.fillStyle = "#16181d";
  ctx.fillRect(0, 0, width, height);
  const line = lossCurvePoints(points, width, height);
  if (!line.length) return;
  ctx.save();
  ctx.strokeStyle = "#17bebb";
  ctx.lineWidth = 2;
  ctx.beginPath();
  ctx.moveTo(line[0].x, line[0].y);
  for (let i = 1; i < line.length; i++) ctx.lineTo(line[i].x, line[i].y);
  ctx.stroke();
  ctx.restore();
  const last = line[line.length - 1];
  ctx.fillStyle = "#9aa3ad";
  ctx.font = "11px sans-serif";
  ctx.fillText(`step ${last.step}  loss ${last.mean.toFixed(4)}`, 8, 14);
}

/**
 * Slider-wipe comparison: the result fills the canvas, and the region
 * left of the wipe line is clipped to show the source instead. wipe=0 is
 * all result, wipe=1 all source.
 */
export function drawCompare(
  ctx: Ctx2d,
  before: unknown,
  after: unknown,
  compare: Pick<CompareState, "wipe">,
  width: number,
  height: number,
): void {
  const split = Math.round(compare.wipe * width);
  ctx.clearRect(0, 0, width, height);
  ctx.drawImage(after, 0, 0, width, height);
  ctx.save();
  ctx.beginPath();
  ctx.rect(0, 0, split, height);
  ctx.clip();
  ctx.drawImage(before, 0, 0, width, height);
  ctx.restore();
  ctx.save();
  ctx.strokeStyle = "#ffffff";
  ctx.lineWidth = 2;
  ctx.beginPath();
  ctx.moveTo(split, 0);
  ctx.lineTo(split, height);
  ctx.stroke();
  ctx.restore();
}
