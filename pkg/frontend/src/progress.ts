import type { EventRow, LossPoint, ProgressState } from "./types.js";

export function newProgress(jobId: string): ProgressState {
  return {
    jobId,
    state: "QUEUED",
    lastSeq: 0,
    lastStep: 0,
    points: [],
    previews: [],
    dropped: 0,
    terminal: false,
    error: null,
  };
}

const TERMINAL = new Set(["done", "failed", "cancelled"]);

/**
 * Fold one event-log row into the progress view. Rows are keyed by a
 * server-assigned sequence number; a row at or below the cursor is a
 * replay and is ignored. Step events must advance the step index, so a
 * job that restarts from step one cannot make the loss curve jump
 * backwards: stale steps are counted in `dropped` and the curve stays
 * monotone. Previews are kept in arrival order.
 */
export function applyEventRow(progress: ProgressState, row: EventRow): ProgressState {
  if (row.seq <= progress.lastSeq) {
    return { ...progress, dropped: progress.dropped + 1 };
  }
  const next: ProgressState = { ...progress, lastSeq: row.seq };
  const event = row.event;
  switch (event.type) {
    case "queued":
      next.state = "QUEUED";
      break;
    case "requeued":
      next.state = "QUEUED";
      break;
    case "running":
      next.state = "RUNNING";
      break;
    case "step": {
      const step = event.completed ?? 0;
      if (step <= next.lastStep) {
        next.dropped += 1;
        break;
      }
      next.lastStep = step;
      next.state = "RUNNING";
      const losses = event.losses ?? {};
      const values = Object.values(losses);
      const mean = values.length
        ? values.reduce((a, b) => a + b, 0) / values.length
        : null;
      next.points = [...next.points, { step, losses, mean }];
      if (event.preview_png) {
        next.previews = [
          ...next.previews,
          { step, url: `data:image/png;base64,${event.preview_png}` },
        ];
      }
      break;
    }
    case "done":
      next.state = "DONE";
      break;
    case "failed":
      next.state = "FAILED";
      next.error = event.error ?? "job failed";
      break;
    case "cancelled":
      next.state = "CANCELLED";
      break;
    default:
      break;
  }
  if (TERMINAL.has(event.type)) next.terminal = true;
  return next;
}

/**
 * Pixel coordinates for the mean-loss polyline. Only points that carried
 * losses plot; x spreads the step range across the width, y is zero loss
 * at the bottom and the series maximum at the top.
 */
export function lossCurvePoints(
  points: LossPoint[],
  width: number,
  height: number,
  pad = 8,
): Array<{ x: number; y: number; step: number; mean: number }> {
  const plotted = points.filter((p) => p.mean !== null) as Array<LossPoint & { mean: number }>;
  if (!plotted.length) return [];
  const minStep = plotted[0].step;
  const maxStep = plotted[plotted.length - 1].step;
  const top = Math.max(...plotted.map((p) => p.mean), 1e-12);
  const spanX = Math.max(maxStep - minStep, 1);
  const innerW = width - 2 * pad;
  const innerH = height - 2 * pad;
  return plotted.map((p) => ({
    step: p.step,
    mean: p.mean,
    x: pad + ((p.step - minStep) / spanX) * innerW,
    y: pad + (1 - p.mean / top) * innerH,
  }));
}
