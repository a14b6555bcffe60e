/** Axis-aligned box in image pixel coordinates. */
export interface Box {
  x: number;
  y: number;
  w: number;
  h: number;
}

/** Binary mask, row-major, one 0/1 byte per pixel. */
export interface MaskBitmap {
  width: number;
  height: number;
  data: Uint8Array;
}

/**
 * One object entry as it appears in layout JSON. Masks come either as a
 * file reference (`mask`) or packed inline (`mask_bits`, base64 of
 * row-major bits, most significant bit first). Unknown keys are kept so
 * an untouched import exports byte-for-byte the same document.
 */
export interface LayoutObjectDoc {
  id: string;
  token?: string;
  bbox?: number[];
  mask?: string;
  mask_bits?: string;
  [key: string]: unknown;
}

export interface LayoutDoc {
  width: number;
  height: number;
  objects: LayoutObjectDoc[];
  [key: string]: unknown;
}

export type ResizeHandle = "nw" | "n" | "ne" | "e" | "se" | "s" | "sw" | "w";
export type Handle = ResizeHandle | "move";

/** Per-object editing state. `source` is the read-only overlay. */
export interface ObjectState {
  id: string;
  token: string;
  source: Box;
  target: Box;
  mask: MaskBitmap | null;
  maskFile: string | null;
  warning: string | null;
  finding: string | null;
}

/** Validation finding in the service's error body. */
export interface Finding {
  level: string;
  code: string;
  message: string;
  object_id: string | null;
}

export interface JobEvent {
  type: string;
  completed?: number;
  total?: number;
  t?: number;
  losses?: Record<string, number>;
  preview_png?: string;
  error?: string;
  output_hash?: string;
  reason?: string;
}

export interface EventRow {
  seq: number;
  event: JobEvent;
}

export interface JobView {
  id: string;
  state: string;
  created: string;
  started: string | null;
  finished: string | null;
  error: string | null;
  progress: { completed?: number; total?: number; losses?: Record<string, number> };
  result: string | null;
  backend: string;
  seed: number;
  init: string;
  mode: string;
}

export interface LossPoint {
  step: number;
  losses: Record<string, number>;
  /** mean of the per-object losses, null when the step carried none */
  mean: number | null;
}

export interface PreviewFrame {
  step: number;
  url: string;
}

/** Folded view of one job's event stream. */
export interface ProgressState {
  jobId: string;
  state: string;
  lastSeq: number;
  lastStep: number;
  points: LossPoint[];
  previews: PreviewFrame[];
  dropped: number;
  terminal: boolean;
  error: string | null;
}

export interface JobConfig {
  backend: string;
  seed: number;
  init: string;
  mode: string;
  eta: number | null;
  guidanceFraction: number | null;
  stepDelayMs: number;
}

export interface CanvasState {
  imageUrl: string | null;
  imageWidth: number;
  imageHeight: number;
  /** the imported document, deep-frozen; never written to again */
  sourceDoc: LayoutDoc | null;
  /** array order is the target stacking order, front-most last */
  objects: ObjectState[];
  /** raw uploaded mask files by name, forwarded on submit */
  maskBytes: Record<string, Uint8Array>;
  selected: string | null;
  dirty: boolean;
}

export interface SubmitState {
  phase: "idle" | "sending" | "accepted" | "rejected";
  jobId: string | null;
  duplicate: boolean;
}

export interface CompareState {
  beforeUrl: string;
  afterUrl: string;
  /** fraction of the width showing the source image, from the left */
  wipe: number;
}

export interface AppState {
  canvas: CanvasState;
  config: JobConfig;
  banner: string | null;
  submit: SubmitState;
  watch: ProgressState | null;
  compare: CompareState | null;
}
