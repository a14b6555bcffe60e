"""End-to-end layout editing: invert the source, steer a target branch.

The run encodes the source image, walks it up the schedule once and keeps
every intermediate state, then drives a target latent back down.  At each
step the source state is replayed (never recomputed, never mutated) to
expose its self-attention values and features; the target branch matches
features cell-to-cell, warps the source values through the corrected
projection field, and advances one fused guidance step.  Everything is
recorded in a manifest sufficient to reproduce the run bit-for-bit.
"""

from __future__ import annotations

import csv
import dataclasses
import datetime as _dt
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image

from .appearance_projection import (
    ProjectionConfig,
    build_apa_interventions,
    capture_self_values,
    correct_projection_field,
    decompose_regions,
    extract_descriptors,
    projection_field,
    similarity_matrix,
    write_projection_debug,
)
from .async_editor import StepTelemetry, editing_step
from .backend import TapConfig, ddim_invert_trace, get_backend
from .concept_learning import ConceptBundle, apply_bundle, load_bundle
from .layout import LayoutSpec, layout_from_jsonable, layout_to_jsonable, load_layout
from .layout_guidance import (
    GuidanceConfig,
    GuidanceProblem,
    GuidanceRecord,
    evaluate_losses,
    object_attention,
)
from .noise_init import LfinConfig, composite_image, lfin_noise, lfin_start_step
from .util import rng_for, sha256_array, sha256_bytes

PROMPT_LEAD = ("a", "photo", "of")
INIT_MODES = ("invert", "random", "lfin")
EDIT_MODES = ("async", "sync")


class SpecValidationError(ValueError):
    """The job spec has error-level findings; carries the full list."""

    def __init__(self, findings: list["Finding"]):
        self.findings = findings
        super().__init__("; ".join(f.message for f in findings))


class BackendMismatchError(RuntimeError):
    """Concept bundle was trained against a different backend identity."""


class DecodeError(RuntimeError):
    """The final latent could not be decoded or written."""


class EditCancelled(RuntimeError):
    """Cooperative cancellation was requested between steps."""


@dataclass(frozen=True)
class Finding:
    level: str                  # "error" | "warning"
    code: str
    message: str
    object_id: str | None = None

    def to_jsonable(self) -> dict:
        return {"level": self.level, "code": self.code,
                "message": self.message, "object_id": self.object_id}


@dataclass
class EditJobSpec:
    """Everything one edit run needs, file paths included."""

    source_image: str | Path
    source_layout: LayoutSpec
    target_layout: LayoutSpec
    output: str | Path
    concepts: str | Path | None = None
    backend: str = "toy"
    seed: int = 0
    init: str = "invert"        # "invert" | "random" | "lfin"
    mode: str = "async"
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    lfin: LfinConfig | None = None
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    debug_dir: str | Path | None = None


def spec_from_files(
    source_image: str | Path,
    source_layout_path: str | Path,
    target_layout_path: str | Path,
    output: str | Path,
    **kwargs,
) -> EditJobSpec:
    return EditJobSpec(
        source_image=source_image,
        source_layout=load_layout(source_layout_path),
        target_layout=load_layout(target_layout_path),
        output=output,
        **kwargs,
    )


def validate_spec(spec: EditJobSpec) -> list[Finding]:
    """Check cross-field consistency; returns findings, never raises."""
    findings: list[Finding] = []
    src, tar = spec.source_layout, spec.target_layout

    if set(src.ids()) != set(tar.ids()):
        only_src = sorted(set(src.ids()) - set(tar.ids()))
        only_tar = sorted(set(tar.ids()) - set(src.ids()))
        findings.append(Finding(
            "error", "ids-mismatch",
            f"layouts disagree on objects (source-only {only_src}, target-only {only_tar})",
        ))
    if (src.width, src.height) != (tar.width, tar.height):
        findings.append(Finding(
            "error", "layout-dims",
            f"source layout is {src.width}x{src.height}, target {tar.width}x{tar.height}",
        ))
    if spec.init not in INIT_MODES:
        findings.append(Finding("error", "init-invalid",
                                f"init must be one of {INIT_MODES}, got {spec.init!r}"))
    if spec.mode not in EDIT_MODES:
        findings.append(Finding("error", "mode-invalid",
                                f"mode must be one of {EDIT_MODES}, got {spec.mode!r}"))

    image_path = Path(spec.source_image)
    if not image_path.is_file():
        findings.append(Finding("error", "image-missing",
                                f"source image {image_path} does not exist"))
    else:
        try:
            with Image.open(image_path) as img:
                iw, ih = img.size
            if (iw, ih) != (src.width, src.height):
                findings.append(Finding(
                    "error", "image-size",
                    f"image is {iw}x{ih}, source layout says {src.width}x{src.height}",
                ))
        except OSError as e:
            findings.append(Finding("error", "image-unreadable", str(e)))

    if spec.concepts is not None and not Path(spec.concepts).is_dir():
        findings.append(Finding("error", "concepts-missing",
                                f"concept bundle {spec.concepts} does not exist"))

    # overlaps are legal; surface who wins
    for i, ahead in enumerate(tar.objects):
        for behind in tar.objects[:i]:
            if np.any(ahead.mask & behind.mask):
                findings.append(Finding(
                    "warning", "masks-overlap",
                    f"target masks of {behind.id!r} and {ahead.id!r} overlap; "
                    f"{ahead.id!r} is listed later and wins",
                    object_id=ahead.id,
                ))
    return findings


def toy_vocab_for(src_layout: LayoutSpec) -> list[str]:
    """Deterministic base vocabulary for a toy backend serving this image.

    Placeholder tokens are not part of it; concept bundles register those.
    Both the concept-learning and edit paths derive the vocabulary the same
    way, so backend identities line up.
    """
    words = set(PROMPT_LEAD) | {"and"}
    for obj in src_layout.objects:
        words.update(obj.tokens())
    return sorted(words)


def build_prompt(
    layout: LayoutSpec,
    bundle: ConceptBundle | None,
) -> tuple[tuple[str, ...], dict[str, tuple[int, ...]]]:
    """Prompt tokens plus each object's token positions within them.

    Objects contribute their phrases in layout order, glued with "and";
    a bundle swaps each phrase for its learned placeholder + noun.
    """
    tokens = list(PROMPT_LEAD)
    positions: dict[str, tuple[int, ...]] = {}
    for i, obj in enumerate(layout.objects):
        if i:
            tokens.append("and")
        if bundle is not None:
            concept = bundle.object(obj.id)
            phrase = [concept.token, *concept.noun.split()]
        else:
            phrase = obj.tokens()
        positions[obj.id] = tuple(range(len(tokens), len(tokens) + len(phrase)))
        tokens.extend(phrase)
    return tuple(tokens), positions


def resolve_backend(name: str, seed: int, source_layout: LayoutSpec):
    """Backend instance for a job; the toy vocabulary derives from the layout."""
    if name == "toy":
        return get_backend("toy", seed=seed, vocab=toy_vocab_for(source_layout))
    return get_backend(name)


def _resolve_backend(spec: EditJobSpec):
    return resolve_backend(spec.backend, spec.seed, spec.source_layout)


def _load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def _latent_resolution(latent: np.ndarray) -> tuple[int, int]:
    return latent.shape[-2], latent.shape[-1]


def edit_layout(
    spec: EditJobSpec,
    progress: Callable[[dict], None] | None = None,
    cancel: Callable[[], bool] | None = None,
    preview_every: int | None = None,
) -> tuple[np.ndarray, dict]:
    """Run one edit; returns (image array, manifest dict) and writes both.

    ``progress`` receives ordered event dicts with a strictly increasing
    ``completed`` counter.  ``cancel`` is polled between denoising steps;
    returning True raises EditCancelled without writing outputs.  When
    ``preview_every`` is set and the backend declares ``cheap_decode``,
    every N-th step event also carries a ``preview`` image array.
    """
    findings = validate_spec(spec)
    errors = [f for f in findings if f.level == "error"]
    if errors:
        raise SpecValidationError(errors)

    backend = _resolve_backend(spec)
    schedule = backend.schedule
    bundle = load_bundle(spec.concepts) if spec.concepts is not None else None
    if bundle is not None:
        if bundle.backend_identity != backend.identity():
            raise BackendMismatchError(
                f"bundle was trained on {bundle.backend_identity!r}, "
                f"backend resolves to {backend.identity()!r}"
            )
        apply_bundle(backend, bundle)

    src_image = _load_image(spec.source_image)
    x0_src = backend.encode_image(src_image)
    prompt, positions = build_prompt(spec.target_layout, bundle)

    trace = ddim_invert_trace(backend, x0_src, prompt, schedule, stop_fraction=1.0)

    lfin_cfg = spec.lfin
    if spec.init == "lfin" and lfin_cfg is None:
        derived = int(rng_for(spec.seed, "init/lfin").integers(0, 2**63))
        lfin_cfg = LfinConfig(seed=derived)
    if spec.init == "invert":
        start_t = schedule.num_steps
        x = np.array(trace.state(start_t))
    elif spec.init == "random":
        start_t = schedule.num_steps
        x = rng_for(spec.seed, "init/random").standard_normal(x0_src.shape)
    else:
        comp = composite_image(src_image, spec.source_layout, spec.target_layout)
        x = lfin_noise(backend.encode_image(comp), prompt, schedule, lfin_cfg, backend)
        start_t = lfin_start_step(schedule, lfin_cfg)

    resolution = _latent_resolution(x0_src)
    problem = GuidanceProblem(
        prompt=prompt,
        objects=positions,
        masks=spec.target_layout.masks_at_resolution(resolution),
        resolution=resolution,
    )
    initial_losses = evaluate_losses(backend, x, start_t, problem) if positions else {}

    decomp = decompose_regions(spec.source_layout, spec.target_layout, resolution,
                               band_radius=spec.projection.band_radius)
    observers, value_store = capture_self_values(backend.self_layers)
    feature_taps = TapConfig.features_only()
    basis = None
    telemetry: list[StepTelemetry] = []
    records: list[GuidanceRecord] = []
    step_hashes: list[str] = []
    trace_hash_before = _trace_hash(trace)

    completed = 0
    total = start_t
    for t in range(start_t, 0, -1):
        if cancel is not None and cancel():
            raise EditCancelled(f"cancelled before step t={t}")

        interventions = ()
        if spec.projection.apa_active(t) and spec.target_layout.objects:
            src_out = backend.predict_noise(trace.state(t), t, prompt,
                                            taps=feature_taps, interventions=observers)
            tar_out = backend.predict_noise(x, t, prompt, taps=feature_taps)
            fit_basis = basis if spec.projection.pca_fit == "once" else None
            src_desc, tar_desc, used = extract_descriptors(
                src_out.features, tar_out.features, resolution,
                pca_dims=spec.projection.pca_dims, basis=fit_basis,
            )
            if spec.projection.pca_fit == "once" and basis is None:
                basis = used
            sim = similarity_matrix(src_desc, tar_desc)
            raw_field = projection_field(sim)
            corrected, _ = correct_projection_field(raw_field, sim, decomp)
            interventions = build_apa_interventions(dict(value_store), corrected)
            if spec.debug_dir is not None:
                write_projection_debug(spec.debug_dir, t, raw_field, corrected, decomp)

        x = editing_step(
            backend, x, t, problem, spec.target_layout, schedule, spec.guidance,
            interventions=interventions, mode=spec.mode,
            guidance_records=records, telemetry=telemetry,
        )
        step_hashes.append(sha256_array(x))
        completed += 1
        if progress is not None:
            step_losses = telemetry[-1].branch_losses if telemetry else {}
            event = {"type": "step", "t": t, "completed": completed,
                     "total": total, "losses": step_losses}
            if (preview_every is not None and preview_every > 0
                    and getattr(backend, "cheap_decode", False)
                    and (completed % preview_every == 0 or t == 1)):
                event["preview"] = backend.decode_latent(x)
            progress(event)

    if _trace_hash(trace) != trace_hash_before:
        raise RuntimeError("source trace was mutated during the edit")

    final_losses = evaluate_losses(backend, x, 0, problem) if positions else {}
    final_attention = _attention_probe(backend, x, prompt, problem) if positions else {}

    try:
        out_image = backend.decode_latent(x)
    except Exception as e:
        raise DecodeError(f"decoding the final latent failed: {e}") from e

    out_path = Path(spec.output)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    try:
        Image.fromarray(out_image, mode="RGB").save(out_path)
    except OSError as e:
        raise DecodeError(f"writing {out_path} failed: {e}") from e

    manifest = _build_manifest(
        spec, lfin_cfg, backend, start_t, initial_losses, final_losses,
        final_attention, telemetry, records, findings, out_path, x, step_hashes,
    )
    manifest_path = out_path.with_suffix(out_path.suffix + ".manifest.json")
    manifest_path.write_text(json.dumps(manifest, indent=2))
    if progress is not None:
        progress({"type": "done", "completed": completed, "total": total,
                  "output": str(out_path)})
    return out_image, manifest


def _trace_hash(trace) -> str:
    h = []
    for latent in trace.latents:
        h.append(sha256_bytes(np.ascontiguousarray(latent).tobytes()))
    return sha256_bytes("".join(h).encode())


def _attention_probe(backend, latent, prompt, problem: GuidanceProblem) -> dict:
    """Final per-object aggregated attention at the working resolution."""
    out = backend.predict_noise(latent, 0, prompt, taps=TapConfig.cross_only())
    layer_ids = list(getattr(backend, "cross_layers", ()))
    probe = {}
    for oid, toks in problem.objects.items():
        obj = object_attention(out, toks, layer_ids, problem.resolution)
        probe[oid] = np.asarray(obj.attn).tolist()
    return probe


def _config_jsonable(cfg) -> dict:
    return dataclasses.asdict(cfg)


def _build_manifest(
    spec: EditJobSpec,
    lfin_cfg: LfinConfig | None,
    backend,
    start_t: int,
    initial_losses: dict,
    final_losses: dict,
    final_attention: dict,
    telemetry: Sequence[StepTelemetry],
    records: Sequence[GuidanceRecord],
    findings: Sequence[Finding],
    out_path: Path,
    final_latent: np.ndarray,
    step_hashes: Sequence[str],
) -> dict:
    image_bytes = Path(spec.source_image).read_bytes()
    return {
        "version": 1,
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "spec": {
            "source_image": str(spec.source_image),
            "output": str(spec.output),
            "concepts": str(spec.concepts) if spec.concepts is not None else None,
            "backend": spec.backend,
            "seed": spec.seed,
            "init": spec.init,
            "mode": spec.mode,
            "guidance": _config_jsonable(spec.guidance),
            "lfin": _config_jsonable(lfin_cfg) if lfin_cfg is not None else None,
            "projection": _config_jsonable(spec.projection),
            "source_layout": layout_to_jsonable(spec.source_layout),
            "target_layout": layout_to_jsonable(spec.target_layout),
        },
        "backend_identity": backend.identity(),
        "input_hashes": {
            "source_image": sha256_bytes(image_bytes),
            "concepts": _bundle_hash(spec.concepts),
        },
        "start_step": start_t,
        "findings": [f.to_jsonable() for f in findings],
        "initial_losses": initial_losses,
        "final_losses": final_losses,
        "final_attention": final_attention,
        "alignment_mode": "attention",
        "per_step": [
            {"t": entry.step, "losses": entry.branch_losses,
             "occupancy": entry.occupancy, "latent_hash": latent_hash}
            for entry, latent_hash in zip(telemetry, step_hashes)
        ],
        "guidance_iterations": [
            {"t": r.step, "iteration": r.iteration, "losses": r.object_losses,
             "total": r.total_loss}
            for r in records
        ],
        "output_hash": sha256_bytes(out_path.read_bytes()),
        "output_latent_hash": sha256_array(final_latent),
        "final_latent": final_latent.tolist(),
    }


def _bundle_hash(concepts: str | Path | None) -> str | None:
    if concepts is None:
        return None
    manifest = Path(concepts) / "manifest.json"
    return sha256_bytes(manifest.read_bytes()) if manifest.is_file() else None


def write_telemetry_csv(manifest: dict, path: str | Path) -> Path:
    """Per-step loss telemetry from a manifest, as CSV."""
    header, rows = manifest_telemetry_rows(manifest)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if v is None else v for v in row])
    return path


def manifest_telemetry_rows(manifest: dict) -> tuple[list[str], list[list]]:
    """Flatten per-step losses into csv-ready rows: step, per-object, mean.

    Steps outside the guidance window have no recorded losses; their cells
    come back as None so writers can leave them blank.
    """
    ids = [obj["id"] for obj in manifest["spec"]["target_layout"]["objects"]]
    header = ["step", *ids, "total"]
    rows = []
    for entry in manifest["per_step"]:
        losses = entry["losses"]
        values = [losses.get(oid) for oid in ids]
        present = [v for v in values if v is not None]
        total = sum(present) / len(present) if present else None
        rows.append([entry["t"], *values, total])
    return header, rows


def spec_from_manifest(manifest: dict, output: str | Path | None = None) -> EditJobSpec:
    """Rebuild a runnable spec from a recorded manifest."""
    doc = manifest["spec"]
    lfin = LfinConfig(**doc["lfin"]) if doc.get("lfin") else None
    return EditJobSpec(
        source_image=doc["source_image"],
        source_layout=layout_from_jsonable(doc["source_layout"]),
        target_layout=layout_from_jsonable(doc["target_layout"]),
        output=output if output is not None else doc["output"],
        concepts=doc["concepts"],
        backend=doc["backend"],
        seed=doc["seed"],
        init=doc["init"],
        mode=doc["mode"],
        guidance=GuidanceConfig(**doc["guidance"]),
        lfin=lfin,
        projection=ProjectionConfig(**doc["projection"]),
    )


def rerun_from_manifest(
    manifest_path: str | Path,
    output: str | Path | None = None,
    progress: Callable[[dict], None] | None = None,
) -> dict:
    """Re-execute a recorded run after verifying its inputs still match."""
    manifest = json.loads(Path(manifest_path).read_text())
    spec = spec_from_manifest(manifest, output=output)
    image_path = Path(spec.source_image)
    if not image_path.is_file():
        raise SpecValidationError([Finding("error", "image-missing",
                                           f"source image {image_path} does not exist")])
    current = sha256_bytes(image_path.read_bytes())
    recorded = manifest["input_hashes"]["source_image"]
    if current != recorded:
        raise SpecValidationError([Finding(
            "error", "input-drift",
            f"source image hash {current[:12]} no longer matches recorded {recorded[:12]}",
        )])
    bundle_now = _bundle_hash(spec.concepts)
    bundle_recorded = manifest["input_hashes"].get("concepts")
    if bundle_now != bundle_recorded:
        raise SpecValidationError([Finding(
            "error", "input-drift", "concept bundle no longer matches the recorded hash",
        )])
    _, new_manifest = edit_layout(spec, progress=progress)
    return new_manifest
