"""Job-queue HTTP service: submit layout edits, watch progress, fetch results.

Every job lives in its own directory under a data root (inputs, job spec,
``state.json``, ``events.jsonl``, result image, manifest, telemetry), so the
index is nothing more than a directory scan and a restart never loses work:
jobs found RUNNING at startup are either re-queued or failed, by policy.  A
small worker pool (``workers``, default 1) drains a FIFO queue; all state
changes land in ``state.json`` before they become visible through the API.

Errors use one body shape everywhere: ``{code, message, findings[]}``.
Progress is exposed twice over the same recorded event log: a server-sent
event stream and a polling endpoint with an ``after`` cursor.

Run standalone with ``uvicorn --factory relayout.service_api:app_factory``;
the factory reads RELAYOUT_DATA_DIR, RELAYOUT_WORKERS and RELAYOUT_BACKEND.
"""

from __future__ import annotations

import base64
import dataclasses
import datetime as _dt
import io
import json
import os
import queue
import secrets
import shutil
import threading
import time
from contextlib import asynccontextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image
from fastapi import FastAPI, File, Form, UploadFile
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import FileResponse, JSONResponse, StreamingResponse

from .layout import LayoutError, LayoutObject, LayoutSpec, layout_to_jsonable
from .noise_init import transport_layout
from .pipeline import (
    EditCancelled,
    Finding,
    SpecValidationError,
    edit_layout,
    spec_from_manifest,
    validate_spec,
    write_telemetry_csv,
)
from .util import sha256_bytes

QUEUED = "QUEUED"
RUNNING = "RUNNING"
DONE = "DONE"
FAILED = "FAILED"
CANCELLED = "CANCELLED"
TERMINAL_STATES = frozenset({DONE, FAILED, CANCELLED})

_LEGAL_TRANSITIONS = {
    QUEUED: {RUNNING, CANCELLED},
    RUNNING: {DONE, FAILED, CANCELLED},
    DONE: set(),
    FAILED: set(),
    CANCELLED: set(),
}

_CONFIG_KEYS = frozenset({
    "seed", "init", "mode", "backend", "concepts",
    "guidance", "lfin", "projection", "step_delay_ms",
})

_CROCKFORD = "0123456789ABCDEFGHJKMNPQRSTVWXYZ"


def new_ulid() -> str:
    """Timestamp-sortable 26-char id: 48-bit unix millis + 80 random bits."""
    value = (int(time.time() * 1000) & ((1 << 48) - 1)) << 80 | secrets.randbits(80)
    return "".join(_CROCKFORD[(value >> shift) & 31] for shift in range(125, -1, -5))


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


class IllegalTransition(RuntimeError):
    """A state change outside the allowed job lifecycle graph."""


class ApiError(Exception):
    """Carries an HTTP status plus the uniform error body."""

    def __init__(self, status: int, code: str, message: str, findings=()):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message
        self.findings = list(findings)


@dataclass
class JobRecord:
    id: str
    state: str = QUEUED
    created: str = ""
    started: str | None = None
    finished: str | None = None
    error: str | None = None
    progress: dict = field(default_factory=dict)
    result: str | None = None  # path relative to the job dir, set on DONE
    backend: str = "toy"
    seed: int = 0
    init: str = "invert"
    mode: str = "async"
    idempotency_key: str | None = None

    def to_jsonable(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_jsonable(cls, doc: dict) -> "JobRecord":
        return cls(**doc)


# ---------------------------------------------------------------- uploads


def _mask_from_bytes(data: bytes, width: int, height: int, name: str) -> np.ndarray:
    try:
        img = Image.open(io.BytesIO(data)).convert("L")
    except Exception as e:
        raise LayoutError(f"mask {name!r} is not a readable image: {e}") from e
    arr = np.asarray(img)
    if arr.shape != (height, width):
        raise LayoutError(f"mask {name!r} is {arr.shape[::-1]}, layout says {(width, height)}")
    return arr >= 128


def _layout_from_upload(doc: dict, masks: dict[str, bytes], label: str) -> LayoutSpec:
    """Uploaded layout JSON with mask file references resolved in-memory."""
    if not isinstance(doc, dict):
        raise LayoutError(f"{label}: expected a JSON object")
    for key in ("width", "height", "objects"):
        if key not in doc:
            raise LayoutError(f"{label}: missing {key!r}")
    objects = []
    for entry in doc["objects"]:
        for key in ("id", "token", "mask"):
            if key not in entry:
                raise LayoutError(f"{label}: object missing {key!r}")
        name = entry["mask"]
        if name not in masks:
            raise LayoutError(f"{label}: mask file {name!r} was not uploaded")
        mask = _mask_from_bytes(masks[name], doc["width"], doc["height"], name)
        bbox = tuple(entry["bbox"]) if entry.get("bbox") else None
        objects.append(LayoutObject(id=entry["id"], token=entry["token"],
                                    mask=mask, bbox=bbox))
    return LayoutSpec(width=doc["width"], height=doc["height"], objects=objects)


def _target_from_upload(doc: dict, masks: dict[str, bytes],
                        src_layout: LayoutSpec) -> LayoutSpec:
    """Target layouts may be bbox-only; masks are then carried over from source."""
    if not isinstance(doc, dict) or not isinstance(doc.get("objects"), list):
        raise LayoutError("target layout: expected a JSON object with 'objects'")
    entries = doc["objects"]
    with_mask = sum(1 for e in entries if isinstance(e, dict) and "mask" in e)
    if entries and with_mask == len(entries):
        return _layout_from_upload(doc, masks, "target layout")
    if with_mask:
        raise LayoutError("target layout: mix of mask and bbox-only objects; pick one style")
    if (doc.get("width"), doc.get("height")) != (src_layout.width, src_layout.height):
        raise LayoutError("target layout: bbox-only submissions must keep source dimensions")
    boxes = []
    for entry in entries:
        if not isinstance(entry, dict) or "id" not in entry or "bbox" not in entry:
            raise LayoutError("target layout: bbox-only object needs 'id' and 'bbox'")
        boxes.append((entry["id"], tuple(entry["bbox"])))
    return transport_layout(src_layout, boxes)


# ---------------------------------------------------------------- service


class JobService:
    """Disk-backed job store plus the worker pool that drains it."""

    def __init__(self, root: str | Path, *, workers: int = 1, backend: str = "toy",
                 recover: str = "requeue", max_upload_bytes: int = 32 * 2**20,
                 preview_every: int | None = 5):
        if recover not in ("requeue", "fail"):
            raise ValueError("recover must be 'requeue' or 'fail'")
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.workers = int(workers)
        self.default_backend = backend
        self.recover_mode = recover
        self.max_upload_bytes = int(max_upload_bytes)
        self.preview_every = preview_every
        self._queue: "queue.Queue[str]" = queue.Queue()
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()
        self._index_lock = threading.Lock()  # idempotency find+create atomicity
        self._idempotency: dict[str, str] = {}
        self._next_seq: dict[str, int] = {}
        self._recover()

    @property
    def stopping(self) -> bool:
        return self._stop.is_set()

    # ------------------------------------------------------------- paths

    def job_dir(self, job_id: str) -> Path:
        return self.root / job_id

    def _state_path(self, job_id: str) -> Path:
        return self.job_dir(job_id) / "state.json"

    def _events_path(self, job_id: str) -> Path:
        return self.job_dir(job_id) / "events.jsonl"

    def _lock(self, job_id: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(job_id, threading.Lock())

    # ------------------------------------------------------------- store

    def load_record(self, job_id: str) -> JobRecord:
        path = self._state_path(job_id)
        if not path.is_file():
            raise KeyError(job_id)
        return JobRecord.from_jsonable(json.loads(path.read_text()))

    def _write_record(self, record: JobRecord):
        path = self._state_path(record.id)
        tmp = path.with_name("state.json.tmp")
        tmp.write_text(json.dumps(record.to_jsonable(), indent=2))
        tmp.replace(path)  # atomic: a crash never leaves torn state

    def append_event(self, job_id: str, event: dict) -> int:
        with self._lock(job_id):
            path = self._events_path(job_id)
            seq = self._next_seq.get(job_id)
            if seq is None:
                seq = (sum(1 for _ in path.open()) if path.exists() else 0) + 1
            with path.open("a") as fh:
                fh.write(json.dumps({"seq": seq, "event": event}) + "\n")
            self._next_seq[job_id] = seq + 1
            return seq

    def read_events(self, job_id: str, after: int = 0) -> list[dict]:
        with self._lock(job_id):
            path = self._events_path(job_id)
            if not path.exists():
                return []
            rows = []
            with path.open() as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        row = json.loads(line)
                        if row["seq"] > after:
                            rows.append(row)
            return rows

    def counts(self) -> dict[str, int]:
        out = {s: 0 for s in (QUEUED, RUNNING, DONE, FAILED, CANCELLED)}
        for path in self.root.glob("*/state.json"):
            try:
                state = json.loads(path.read_text())["state"]
            except (OSError, json.JSONDecodeError, KeyError):
                continue
            out[state] = out.get(state, 0) + 1
        return out

    # -------------------------------------------------------- lifecycle

    def transition(self, job_id: str, new_state: str, **updates) -> JobRecord:
        """Atomically move a job along the lifecycle graph; illegal moves raise."""
        with self._lock(job_id):
            record = self.load_record(job_id)
            if new_state not in _LEGAL_TRANSITIONS[record.state]:
                raise IllegalTransition(f"{record.state} -> {new_state}")
            record.state = new_state
            for key, value in updates.items():
                setattr(record, key, value)
            if new_state == RUNNING:
                record.started = _now()
            if new_state in TERMINAL_STATES:
                record.finished = _now()
            self._write_record(record)
            return record

    def cancel(self, job_id: str) -> JobRecord:
        """Cancel a queued or running job; terminal jobs are left untouched."""
        with self._lock(job_id):
            record = self.load_record(job_id)
            if record.state in TERMINAL_STATES:
                return record
            record.state = CANCELLED
            record.finished = _now()
            self._write_record(record)
        self.append_event(job_id, {"type": "cancelled"})
        return record

    def _recover(self):
        """Rebuild the index from disk; decide the fate of interrupted jobs."""
        for state_path in sorted(self.root.glob("*/state.json")):
            record = JobRecord.from_jsonable(json.loads(state_path.read_text()))
            if record.idempotency_key:
                self._idempotency[record.idempotency_key] = record.id
            if record.state == RUNNING:
                if self.recover_mode == "requeue":
                    record.state = QUEUED  # restart recovery, outside the normal graph
                    record.started = None
                    record.progress = {}
                    self._write_record(record)
                    self.append_event(record.id, {"type": "requeued",
                                                  "reason": "service restart"})
                    self._queue.put(record.id)
                else:
                    record.state = FAILED
                    record.error = "interrupted by service restart"
                    record.finished = _now()
                    self._write_record(record)
                    self.append_event(record.id, {"type": "failed",
                                                  "error": record.error})
            elif record.state == QUEUED:
                self._queue.put(record.id)

    # ----------------------------------------------------------- submit

    def submit(self, *, image_bytes: bytes, source_doc: dict, target_doc: dict,
               masks: dict[str, bytes], config: dict,
               idempotency_key: str | None = None) -> tuple[JobRecord, bool]:
        """Validate, persist, and enqueue one job; returns (record, created)."""
        src_layout = _layout_from_upload(source_doc, masks, "source layout")
        tar_layout = _target_from_upload(target_doc, masks, src_layout)
        spec_doc = self._spec_doc(src_layout, tar_layout, config)
        with self._index_lock:
            if idempotency_key and idempotency_key in self._idempotency:
                return self.load_record(self._idempotency[idempotency_key]), False
            job_id = new_ulid()
            jdir = self.job_dir(job_id)
            try:
                (jdir / "inputs").mkdir(parents=True)
                (jdir / "inputs" / "source.png").write_bytes(image_bytes)
                (jdir / "inputs" / "source_layout.json").write_text(
                    json.dumps(source_doc, indent=2))
                (jdir / "inputs" / "target_layout.json").write_text(
                    json.dumps(target_doc, indent=2))
                (jdir / "job.json").write_text(json.dumps(spec_doc, indent=2))
                try:
                    spec = self.job_spec(job_id)
                except SpecValidationError:
                    raise
                except (TypeError, ValueError) as e:
                    raise SpecValidationError([
                        Finding("error", "config-invalid", str(e))]) from e
                errors = [f for f in validate_spec(spec) if f.level == "error"]
                if errors:
                    raise SpecValidationError(errors)
            except BaseException:
                shutil.rmtree(jdir, ignore_errors=True)
                raise
            record = JobRecord(id=job_id, created=_now(),
                               backend=spec.backend, seed=spec.seed,
                               init=spec.init, mode=spec.mode,
                               idempotency_key=idempotency_key)
            self._write_record(record)
            if idempotency_key:
                self._idempotency[idempotency_key] = job_id
        self.append_event(job_id, {"type": "queued"})
        self._queue.put(job_id)
        return record, True

    def _spec_doc(self, src_layout: LayoutSpec, tar_layout: LayoutSpec,
                  config: dict) -> dict:
        unknown = sorted(set(config) - _CONFIG_KEYS)
        if unknown:
            raise SpecValidationError([Finding(
                "error", "config-invalid",
                f"unknown config keys: {', '.join(unknown)}")])
        try:
            seed = int(config.get("seed", 0))
            delay = float(config.get("step_delay_ms", 0.0))
        except (TypeError, ValueError) as e:
            raise SpecValidationError([
                Finding("error", "config-invalid", str(e))]) from e
        return {
            "source_image": "inputs/source.png",
            "output": "result.png",
            "concepts": config.get("concepts"),
            "backend": config.get("backend", self.default_backend),
            "seed": seed,
            "init": config.get("init", "invert"),
            "mode": config.get("mode", "async"),
            "guidance": config.get("guidance") or {},
            "lfin": config.get("lfin"),
            "projection": config.get("projection") or {},
            "step_delay_ms": delay,
            "source_layout": layout_to_jsonable(src_layout),
            "target_layout": layout_to_jsonable(tar_layout),
        }

    def job_spec(self, job_id: str):
        """Runnable spec for a stored job; paths resolve inside the job dir."""
        doc = dict(json.loads((self.job_dir(job_id) / "job.json").read_text()))
        doc["source_image"] = str(self.job_dir(job_id) / doc["source_image"])
        doc["output"] = str(self.job_dir(job_id) / doc["output"])
        return spec_from_manifest({"spec": doc})

    # ----------------------------------------------------------- workers

    def start(self):
        if self._threads:
            return
        self._stop.clear()
        for i in range(self.workers):
            thread = threading.Thread(target=self._worker_loop,
                                      name=f"relayout-worker-{i}", daemon=True)
            thread.start()
            self._threads.append(thread)

    def stop(self):
        self._stop.set()
        for thread in self._threads:
            thread.join(timeout=10)
        self._threads.clear()

    def _worker_loop(self):
        while not self._stop.is_set():
            try:
                job_id = self._queue.get(timeout=0.1)
            except queue.Empty:
                continue
            try:
                self._run_job(job_id)
            finally:
                self._queue.task_done()

    def _run_job(self, job_id: str):
        try:
            self.transition(job_id, RUNNING)
        except (IllegalTransition, KeyError):
            return  # cancelled while queued, or the directory is gone
        self.append_event(job_id, {"type": "running"})
        doc = json.loads((self.job_dir(job_id) / "job.json").read_text())
        delay = float(doc.get("step_delay_ms", 0.0)) / 1000.0

        def on_progress(event: dict):
            if event["type"] != "step":
                return  # terminal log entries are the service's own
            event = _externalize_event(event)
            self.append_event(job_id, event)
            self._update_progress(job_id, event)
            if delay:
                time.sleep(delay)

        def cancelled() -> bool:
            return self.load_record(job_id).state == CANCELLED

        try:
            spec = self.job_spec(job_id)
            _, manifest = edit_layout(spec, progress=on_progress, cancel=cancelled,
                                      preview_every=self.preview_every)
        except EditCancelled:
            return  # cancel() already moved the state and logged the event
        except Exception as e:  # noqa: BLE001 — one bad job must not kill the pool
            try:
                self.transition(job_id, FAILED, error=str(e))
            except IllegalTransition:
                return  # a cancel raced the failure; cancel wins
            self.append_event(job_id, {"type": "failed", "error": str(e)})
            return
        result = self.job_dir(job_id) / "result.png"
        if sha256_bytes(result.read_bytes()) != manifest["output_hash"]:
            self.transition(job_id, FAILED, error="result hash mismatch")
            self.append_event(job_id, {"type": "failed", "error": "result hash mismatch"})
            return
        self._write_telemetry(job_id, manifest)
        try:
            self.transition(job_id, DONE, result="result.png")
        except IllegalTransition:
            return  # cancelled during the final step; result stays unpublished
        self.append_event(job_id, {"type": "done",
                                   "output_hash": manifest["output_hash"]})

    def _update_progress(self, job_id: str, event: dict):
        with self._lock(job_id):
            record = self.load_record(job_id)
            if record.state != RUNNING:
                return
            record.progress = {"completed": event["completed"],
                               "total": event["total"],
                               "losses": event.get("losses", {})}
            self._write_record(record)

    def _write_telemetry(self, job_id: str, manifest: dict):
        write_telemetry_csv(manifest, self.job_dir(job_id) / "telemetry.csv")


def _externalize_event(event: dict) -> dict:
    """JSON-safe copy: preview arrays become base64 PNG strings."""
    event = dict(event)
    preview = event.pop("preview", None)
    if preview is not None:
        buf = io.BytesIO()
        Image.fromarray(preview, mode="RGB").save(buf, format="PNG")
        event["preview_png"] = base64.b64encode(buf.getvalue()).decode("ascii")
    return event


def _sse_stream(service: JobService, job_id: str, after: int) -> Iterator[str]:
    """Replay recorded events, tail live ones, and end at a terminal state."""
    last = after
    while True:
        for row in service.read_events(job_id, after=last):
            last = row["seq"]
            yield (f"id: {row['seq']}\nevent: {row['event']['type']}\n"
                   f"data: {json.dumps(row['event'])}\n\n")
        record = service.load_record(job_id)
        if record.state in TERMINAL_STATES:
            if not service.read_events(job_id, after=last):
                yield "event: end\ndata: {}\n\n"
                return
            continue
        if service.stopping:
            return
        time.sleep(0.05)


# -------------------------------------------------------------------- app


def create_app(data_dir: str | Path, *, workers: int = 1, backend: str = "toy",
               recover: str = "requeue", max_upload_bytes: int = 32 * 2**20,
               preview_every: int | None = 5) -> FastAPI:
    """Build the HTTP app around a JobService rooted at ``data_dir``."""
    service = JobService(data_dir, workers=workers, backend=backend,
                         recover=recover, max_upload_bytes=max_upload_bytes,
                         preview_every=preview_every)

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        service.start()
        try:
            yield
        finally:
            service.stop()

    app = FastAPI(title="relayout jobs", lifespan=lifespan)
    app.state.service = service
    # the browser UI is served as static files from a different origin
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"])

    @app.exception_handler(ApiError)
    async def on_api_error(request, exc: ApiError):
        return JSONResponse(status_code=exc.status, content={
            "code": exc.code, "message": exc.message, "findings": exc.findings})

    @app.exception_handler(RequestValidationError)
    async def on_request_error(request, exc: RequestValidationError):
        findings = [{
            "level": "error", "code": "request-invalid",
            "message": f"{'.'.join(str(p) for p in err.get('loc', ()))}: {err.get('msg')}",
            "object_id": None,
        } for err in exc.errors()]
        return JSONResponse(status_code=422, content={
            "code": "request-invalid", "message": "malformed request",
            "findings": findings})

    def record_or_404(job_id: str) -> JobRecord:
        try:
            return service.load_record(job_id)
        except KeyError:
            raise ApiError(404, "job-not-found", f"no job {job_id!r}") from None

    def job_view(record: JobRecord) -> dict:
        doc = record.to_jsonable()
        doc.pop("idempotency_key", None)
        return doc

    @app.get("/api/health")
    def health():
        return {"status": "ok", "backend": service.default_backend,
                "workers": service.workers, "jobs": service.counts()}

    @app.post("/api/jobs", status_code=202)
    def submit_job(
        image: UploadFile = File(...),
        source_layout: UploadFile = File(...),
        target_layout: UploadFile = File(...),
        masks: list[UploadFile] = File(default=[]),
        config: str = Form(default="{}"),
        idempotency_key: str | None = Form(default=None),
    ):
        image_bytes = image.file.read()
        source_bytes = source_layout.file.read()
        target_bytes = target_layout.file.read()
        mask_blobs = {Path(part.filename or "mask.png").name: part.file.read()
                      for part in masks}
        total = (len(image_bytes) + len(source_bytes) + len(target_bytes)
                 + sum(len(b) for b in mask_blobs.values()))
        if total > service.max_upload_bytes:
            raise ApiError(413, "payload-too-large",
                           f"upload is {total} bytes; the limit is "
                           f"{service.max_upload_bytes}")

        def parse_json(data: bytes, part: str):
            try:
                return json.loads(data.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as e:
                raise ApiError(422, "json-parse", f"{part} is not valid JSON: {e}",
                               findings=[Finding("error", "json-parse",
                                                 f"{part}: {e}").to_jsonable()]) from e

        source_doc = parse_json(source_bytes, "source_layout")
        target_doc = parse_json(target_bytes, "target_layout")
        config_doc = parse_json(config.encode("utf-8"), "config")
        if not isinstance(config_doc, dict):
            raise ApiError(422, "config-invalid", "config must be a JSON object",
                           findings=[Finding("error", "config-invalid",
                                             "config must be a JSON object").to_jsonable()])
        try:
            record, created = service.submit(
                image_bytes=image_bytes, source_doc=source_doc,
                target_doc=target_doc, masks=mask_blobs, config=config_doc,
                idempotency_key=idempotency_key)
        except SpecValidationError as e:
            raise ApiError(422, "validation", "job spec failed validation",
                           findings=[f.to_jsonable() for f in e.findings]) from e
        except LayoutError as e:
            raise ApiError(422, "layout-parse", str(e),
                           findings=[Finding("error", "layout-parse",
                                             str(e)).to_jsonable()]) from e
        return {"job_id": record.id, "state": record.state,
                "duplicate": not created}

    @app.get("/api/jobs/{job_id}")
    def get_job(job_id: str):
        return job_view(record_or_404(job_id))

    @app.post("/api/jobs/{job_id}/cancel")
    def cancel_job(job_id: str):
        record_or_404(job_id)
        return job_view(service.cancel(job_id))

    @app.get("/api/jobs/{job_id}/result")
    def get_result(job_id: str):
        record = record_or_404(job_id)
        if record.state != DONE or record.result is None:
            raise ApiError(409, "not-done",
                           f"job is {record.state}; the result exists only once DONE")
        return FileResponse(service.job_dir(job_id) / record.result,
                            media_type="image/png")

    @app.get("/api/jobs/{job_id}/events")
    def job_events(job_id: str, after: int = 0, poll: bool = False):
        record = record_or_404(job_id)
        if poll:
            return {"job_id": job_id, "state": record.state,
                    "events": service.read_events(job_id, after=after)}
        return StreamingResponse(_sse_stream(service, job_id, after),
                                 media_type="text/event-stream",
                                 headers={"Cache-Control": "no-store"})

    return app


def app_factory() -> FastAPI:
    """Environment-configured app for ``uvicorn --factory``."""
    return create_app(
        os.environ.get("RELAYOUT_DATA_DIR", "relayout-data"),
        workers=int(os.environ.get("RELAYOUT_WORKERS", "1")),
        backend=os.environ.get("RELAYOUT_BACKEND", "toy"),
        recover=os.environ.get("RELAYOUT_RECOVER", "requeue"),
    )
