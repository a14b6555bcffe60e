import { applyDrag, applyResize, boxInBounds, boxesEqual, clampBox, resizeRequest } from "./geometry.js";
import { applyEventRow, newProgress } from "./progress.js";
import type {
  AppState,
  Box,
  CanvasState,
  EventRow,
  Finding,
  JobConfig,
  LayoutDoc,
  ObjectState,
  ResizeHandle,
} from "./types.js";

export type Action =
  | {
      type: "import-ok";
      doc: LayoutDoc;
      objects: ObjectState[];
      imageUrl: string | null;
      maskBytes: Record<string, Uint8Array>;
    }
  | { type: "import-error"; message: string }
  | { type: "banner"; message: string | null }
  | { type: "select"; id: string | null }
  | { type: "drag"; id: string; dx: number; dy: number }
  | { type: "resize"; id: string; handle: ResizeHandle; dx: number; dy: number }
  | { type: "set-box"; id: string; box: Box }
  | { type: "reset-box"; id: string }
  | { type: "reorder"; id: string; to: number }
  | { type: "config"; patch: Partial<JobConfig> }
  | { type: "submit-start" }
  | { type: "submit-ok"; jobId: string; duplicate: boolean }
  | { type: "submit-error"; message: string; findings: Finding[] }
  | { type: "watch-start"; jobId: string }
  | { type: "job-event"; jobId: string; row: EventRow }
  | { type: "job-state"; jobId: string; state: string }
  | { type: "compare-ready"; beforeUrl: string; afterUrl: string }
  | { type: "wipe"; value: number }
  | { type: "fork"; imageUrl: string; doc: LayoutDoc; objects: ObjectState[] };

export const defaultConfig: JobConfig = {
  backend: "toy",
  seed: 0,
  init: "invert",
  mode: "async",
  eta: null,
  guidanceFraction: null,
  stepDelayMs: 0,
};

const emptyCanvas: CanvasState = {
  imageUrl: null,
  imageWidth: 0,
  imageHeight: 0,
  sourceDoc: null,
  objects: [],
  maskBytes: {},
  selected: null,
  dirty: false,
};

export function initialState(): AppState {
  return {
    canvas: emptyCanvas,
    config: { ...defaultConfig },
    banner: null,
    submit: { phase: "idle", jobId: null, duplicate: false },
    watch: null,
    compare: null,
  };
}

function withObject(
  canvas: CanvasState,
  id: string,
  update: (obj: ObjectState) => ObjectState,
): CanvasState {
  const objects = canvas.objects.map((o) => (o.id === id ? update(o) : o));
  return { ...canvas, objects, dirty: true };
}

function movedBox(obj: ObjectState, requested: Box, clamped: Box): ObjectState {
  const warning = boxesEqual(requested, clamped)
    ? null
    : "clamped to the image bounds";
  return { ...obj, target: clamped, warning, finding: null };
}

/** Every state change flows through here; no other code mutates AppState. */
export function reduce(state: AppState, action: Action): AppState {
  switch (action.type) {
    case "import-ok": {
      const canvas: CanvasState = {
        imageUrl: action.imageUrl,
        imageWidth: action.doc.width,
        imageHeight: action.doc.height,
        sourceDoc: action.doc,
        objects: action.objects,
        maskBytes: action.maskBytes,
        selected: null,
        dirty: false,
      };
      return {
        ...state,
        canvas,
        banner: null,
        submit: { phase: "idle", jobId: null, duplicate: false },
        watch: null,
        compare: null,
      };
    }
    case "import-error":
      // the previous canvas stays untouched; only the banner changes
      return { ...state, banner: action.message };
    case "banner":
      return { ...state, banner: action.message };
    case "select":
      return { ...state, canvas: { ...state.canvas, selected: action.id } };
    case "drag": {
      const { imageWidth, imageHeight } = state.canvas;
      const canvas = withObject(state.canvas, action.id, (obj) => {
        const requested = {
          x: Math.round(obj.target.x + action.dx),
          y: Math.round(obj.target.y + action.dy),
          w: obj.target.w,
          h: obj.target.h,
        };
        return movedBox(obj, requested, applyDrag(obj.target, action.dx, action.dy, imageWidth, imageHeight));
      });
      return { ...state, canvas };
    }
    case "resize": {
      const { imageWidth, imageHeight } = state.canvas;
      const canvas = withObject(state.canvas, action.id, (obj) => {
        const clamped = applyResize(obj.target, action.handle, action.dx, action.dy, imageWidth, imageHeight);
        // flag only when the pointer asked for more than the image allows;
        // the one-pixel size floor applies to both and never warns
        const requested = resizeRequest(obj.target, action.handle, action.dx, action.dy);
        return movedBox(obj, requested, clamped);
      });
      return { ...state, canvas };
    }
    case "set-box": {
      const { imageWidth, imageHeight } = state.canvas;
      const canvas = withObject(state.canvas, action.id, (obj) =>
        movedBox(obj, action.box, clampBox(action.box, imageWidth, imageHeight)),
      );
      return { ...state, canvas };
    }
    case "reset-box": {
      const canvas = withObject(state.canvas, action.id, (obj) => ({
        ...obj,
        target: { ...obj.source },
        warning: null,
        finding: null,
      }));
      return { ...state, canvas };
    }
    case "reorder": {
      const from = state.canvas.objects.findIndex((o) => o.id === action.id);
      if (from < 0) return state;
      const to = Math.min(Math.max(action.to, 0), state.canvas.objects.length - 1);
      if (to === from) return state;
      const objects = [...state.canvas.objects];
      const [obj] = objects.splice(from, 1);
      objects.splice(to, 0, obj);
      return { ...state, canvas: { ...state.canvas, objects, dirty: true } };
    }
    case "config":
      return { ...state, config: { ...state.config, ...action.patch } };
    case "submit-start":
      return {
        ...state,
        banner: null,
        submit: { phase: "sending", jobId: null, duplicate: false },
        canvas: {
          ...state.canvas,
          objects: state.canvas.objects.map((o) => ({ ...o, finding: null })),
        },
      };
    case "submit-ok":
      return {
        ...state,
        submit: { phase: "accepted", jobId: action.jobId, duplicate: action.duplicate },
        canvas: { ...state.canvas, dirty: false },
        watch: newProgress(action.jobId),
        compare: null,
      };
    case "submit-error": {
      // findings that name an object attach to it; the rest join the banner
      const byObject = new Map<string, string[]>();
      const loose: string[] = [];
      for (const f of action.findings) {
        if (f.object_id && state.canvas.objects.some((o) => o.id === f.object_id)) {
          const list = byObject.get(f.object_id) ?? [];
          list.push(f.message);
          byObject.set(f.object_id, list);
        } else {
          loose.push(f.message);
        }
      }
      const objects = state.canvas.objects.map((o) => {
        const messages = byObject.get(o.id);
        return messages ? { ...o, finding: messages.join("; ") } : o;
      });
      const banner = [action.message, ...loose].filter(Boolean).join(" — ");
      return {
        ...state,
        banner,
        submit: { phase: "rejected", jobId: null, duplicate: false },
        canvas: { ...state.canvas, objects },
      };
    }
    case "watch-start":
      return { ...state, watch: newProgress(action.jobId) };
    case "job-event": {
      if (!state.watch || state.watch.jobId !== action.jobId) return state;
      return { ...state, watch: applyEventRow(state.watch, action.row) };
    }
    case "job-state": {
      if (!state.watch || state.watch.jobId !== action.jobId) return state;
      return { ...state, watch: { ...state.watch, state: action.state } };
    }
    case "compare-ready":
      return {
        ...state,
        compare: { beforeUrl: action.beforeUrl, afterUrl: action.afterUrl, wipe: 0.5 },
      };
    case "wipe": {
      if (!state.compare) return state;
      const value = Math.min(Math.max(action.value, 0), 1);
      return { ...state, compare: { ...state.compare, wipe: value } };
    }
    case "fork": {
      const canvas: CanvasState = {
        imageUrl: action.imageUrl,
        imageWidth: action.doc.width,
        imageHeight: action.doc.height,
        sourceDoc: action.doc,
        objects: action.objects,
        maskBytes: {},
        selected: state.canvas.selected,
        dirty: false,
      };
      return {
        ...state,
        canvas,
        banner: null,
        submit: { phase: "idle", jobId: null, duplicate: false },
        watch: null,
        compare: null,
      };
    }
    default:
      return state;
  }
}

export interface Store {
  getState(): AppState;
  dispatch(action: Action): AppState;
  subscribe(listener: (state: AppState) => void): () => void;
}

export function createStore(state: AppState = initialState()): Store {
  const listeners = new Set<(s: AppState) => void>();
  return {
    getState: () => state,
    dispatch(action) {
      state = reduce(state, action);
      for (const fn of listeners) fn(state);
      return state;
    },
    subscribe(listener) {
      listeners.add(listener);
      return () => listeners.delete(listener);
    },
  };
}

/** Sanity checks a caller can surface before export or submit. */
export function validateCanvas(canvas: CanvasState): string[] {
  const problems: string[] = [];
  if (!canvas.sourceDoc) problems.push("nothing imported");
  for (const obj of canvas.objects) {
    if (!boxInBounds(obj.target, canvas.imageWidth, canvas.imageHeight)) {
      problems.push(`object '${obj.id}' is out of bounds`);
    }
  }
  return problems;
}
