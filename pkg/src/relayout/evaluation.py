"""Desk-runnable quality metrics for edit results, plus a batch harness.

Two complementary measurements:

* layout alignment — how much of each object's mass sits inside its target
  mask.  Works from either the run manifest's final attention maps or an
  external segmentation of the edited image; the result always says which
  mode produced the number, since the two are not comparable.
* visual similarity — per-object cosine similarity between embedder vectors
  of the source crop and the edited crop.  The embedder is a pluggable
  client; the shipped implementation is a deterministic content-hash mock.

The batch harness walks a directory of case folders and writes one JSON
report with per-case scores and summary statistics.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .layout import LayoutSpec, load_layout
from .util import sha256_bytes


class EmbedderUnavailable(RuntimeError):
    """The embedding client cannot serve requests right now."""


@dataclass
class AlignmentResult:
    mode: str  # "attention" | "segmentation"
    per_object: dict[str, float]
    score: float

    def to_jsonable(self) -> dict:
        return {"status": "ok", "mode": self.mode, "score": self.score,
                "per_object": dict(self.per_object)}


@dataclass
class SimilarityResult:
    status: str  # "ok" | "skipped"
    per_object: dict[str, float] = field(default_factory=dict)
    score: float | None = None
    reason: str | None = None

    def to_jsonable(self) -> dict:
        return {"status": self.status, "score": self.score,
                "per_object": dict(self.per_object), "reason": self.reason}


# ------------------------------------------------------------- alignment


def layout_alignment_score(
    tar_layout: LayoutSpec,
    *,
    manifest: dict | None = None,
    segmentation: dict[str, np.ndarray] | None = None,
) -> AlignmentResult:
    """Score object placement against the target layout, in [0, 1].

    Exactly one evidence source must be given.  With a ``manifest`` the
    score per object is the fraction of its final attention mass inside
    the target mask; with a ``segmentation`` (per-object boolean masks at
    image resolution) it is the IoU against the target mask.  The overall
    score is the mean over objects.
    """
    if (manifest is None) == (segmentation is None):
        raise ValueError("pass exactly one of manifest= or segmentation=")
    if not tar_layout.objects:
        raise ValueError("target layout has no objects to score")

    per_object: dict[str, float] = {}
    if manifest is not None:
        attention = manifest.get("final_attention") or {}
        missing = [oid for oid in tar_layout.ids() if oid not in attention]
        if missing:
            raise ValueError(f"manifest lacks final attention for {missing}")
        maps = {oid: np.asarray(attention[oid], dtype=float)
                for oid in tar_layout.ids()}
        shapes = {m.shape for m in maps.values()}
        if len(shapes) != 1 or any(len(s) != 2 for s in shapes):
            raise ValueError(f"attention maps disagree on shape: {shapes}")
        masks = tar_layout.masks_at_resolution(next(iter(shapes)))
        for oid in sorted(tar_layout.ids()):
            attn = maps[oid]
            total = float(attn.sum())
            inside = float(attn[masks[oid]].sum())
            per_object[oid] = inside / total if total > 0 else 0.0
        mode = "attention"
    else:
        for oid in sorted(tar_layout.ids()):
            if oid not in segmentation:
                raise ValueError(f"segmentation lacks object {oid!r}")
            seg = np.asarray(segmentation[oid]).astype(bool)
            target = tar_layout.object(oid).mask
            if seg.shape != target.shape:
                raise ValueError(
                    f"segmentation for {oid!r} is {seg.shape}, "
                    f"layout masks are {target.shape}")
            union = np.logical_or(seg, target).sum()
            inter = np.logical_and(seg, target).sum()
            per_object[oid] = float(inter) / float(union) if union else 0.0
        mode = "segmentation"

    score = float(np.mean(list(per_object.values())))
    return AlignmentResult(mode=mode, per_object=per_object, score=score)


# ------------------------------------------------------------ similarity


class HashEmbedder:
    """Deterministic stand-in embedder: a unit vector seeded by crop content.

    Identical crops map to identical vectors (cosine exactly 1); distinct
    crops map to independent pseudo-random directions.
    """

    def __init__(self, dim: int = 32):
        if dim < 2:
            raise ValueError("dim must be >= 2")
        self.dim = int(dim)

    def embed(self, crop: np.ndarray) -> np.ndarray:
        arr = np.ascontiguousarray(np.asarray(crop))
        digest = sha256_bytes(str(arr.shape).encode() + arr.tobytes())
        rng = np.random.default_rng(int(digest[:16], 16))
        vec = rng.standard_normal(self.dim)
        return vec / np.linalg.norm(vec)


def object_crops(image: np.ndarray, layout: LayoutSpec) -> dict[str, np.ndarray]:
    """Per-object bbox crops of an image that matches the layout's dims."""
    image = np.asarray(image)
    if image.shape[:2] != (layout.height, layout.width):
        raise ValueError(f"image is {image.shape[:2]}, layout says "
                         f"{(layout.height, layout.width)}")
    crops = {}
    for obj in layout.objects:
        x, y, w, h = obj.bbox
        crops[obj.id] = image[y:y + h, x:x + w]
    return crops


def visual_similarity(src_crops: dict[str, np.ndarray],
                      edited_crops: dict[str, np.ndarray],
                      embedder) -> SimilarityResult:
    """Cosine similarity of embedder vectors per object, plus the mean.

    A missing or failing embedder yields status "skipped" with no score;
    a skip is never reported as zero similarity.
    """
    if set(src_crops) != set(edited_crops):
        raise ValueError(f"crop sets disagree: {sorted(src_crops)} vs "
                         f"{sorted(edited_crops)}")
    if not src_crops:
        raise ValueError("no crops to compare")
    if embedder is None:
        return SimilarityResult(status="skipped", reason="no embedder configured")

    per_object: dict[str, float] = {}
    try:
        for oid in sorted(src_crops):
            a = np.asarray(embedder.embed(src_crops[oid]), dtype=float)
            b = np.asarray(embedder.embed(edited_crops[oid]), dtype=float)
            denom = np.linalg.norm(a) * np.linalg.norm(b)
            per_object[oid] = float(a @ b / denom) if denom > 0 else 0.0
    except EmbedderUnavailable as e:
        return SimilarityResult(status="skipped", reason=str(e))
    score = float(np.mean(list(per_object.values())))
    return SimilarityResult(status="ok", per_object=per_object, score=score)


# ----------------------------------------------------------------- batch


def evaluate_case(case_dir: str | Path, embedder=None) -> dict:
    """Score one case folder; see evaluate_cases for the expected layout."""
    case_dir = Path(case_dir)
    source = np.asarray(Image.open(case_dir / "source.png").convert("RGB"))
    edited = np.asarray(Image.open(case_dir / "edited.png").convert("RGB"))
    src_layout = load_layout(case_dir / "source_layout.json")
    tar_layout = load_layout(case_dir / "target_layout.json")

    segmentation = None
    seg_dir = case_dir / "segmentation"
    if seg_dir.is_dir():
        segmentation = {
            path.stem: np.asarray(Image.open(path).convert("L")) >= 128
            for path in sorted(seg_dir.glob("*.png"))
        }

    manifest = None
    for candidate in sorted(case_dir.glob("*manifest.json")):
        manifest = json.loads(candidate.read_text())
        break

    if segmentation is not None:
        alignment = layout_alignment_score(tar_layout,
                                           segmentation=segmentation).to_jsonable()
    elif manifest is not None and manifest.get("final_attention"):
        alignment = layout_alignment_score(tar_layout,
                                           manifest=manifest).to_jsonable()
    else:
        alignment = {"status": "skipped", "score": None,
                     "reason": "no segmentation folder and no manifest "
                               "with final attention"}

    similarity = visual_similarity(object_crops(source, src_layout),
                                   object_crops(edited, tar_layout),
                                   embedder).to_jsonable()
    return {"alignment": alignment, "similarity": similarity}


def evaluate_cases(cases_dir: str | Path, out_path: str | Path | None = None,
                   embedder=None) -> dict:
    """Walk ``cases_dir`` (one sub-folder per case) and build a report.

    Each case folder holds ``source.png``, ``edited.png``, the two layout
    JSONs with their mask PNGs, and optionally a run manifest and/or a
    ``segmentation/`` folder of per-object masks named ``<id>.png``.
    Segmentation wins over attention when both are present.  ``embedder``
    defaults to the shipped HashEmbedder; a broken case is recorded under
    its name and excluded from the summary statistics.
    """
    cases_dir = Path(cases_dir)
    case_dirs = sorted(d for d in cases_dir.iterdir() if d.is_dir())
    if not case_dirs:
        raise ValueError(f"no case directories under {cases_dir}")
    if embedder is None:
        embedder = HashEmbedder()

    cases: dict[str, dict] = {}
    for directory in case_dirs:
        try:
            cases[directory.name] = evaluate_case(directory, embedder=embedder)
        except Exception as e:  # noqa: BLE001 — one bad case must not stop the batch
            cases[directory.name] = {"error": str(e)}

    report = {
        "version": 1,
        "cases": cases,
        "summary": {
            "alignment": _metric_summary(cases, "alignment"),
            "similarity": _metric_summary(cases, "similarity"),
        },
    }
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(json.dumps(report, indent=2))
    return report


def _metric_summary(cases: dict[str, dict], metric: str) -> dict:
    scores: list[float] = []
    modes: Counter = Counter()
    skipped = errors = 0
    for doc in cases.values():
        if "error" in doc:
            errors += 1
            continue
        entry = doc[metric]
        if entry.get("status") == "ok" and entry.get("score") is not None:
            scores.append(entry["score"])
            if "mode" in entry:
                modes[entry["mode"]] += 1
        else:
            skipped += 1
    summary = {
        "count": len(scores),
        "skipped": skipped,
        "errors": errors,
        "mean": float(np.mean(scores)) if scores else None,
        "stddev": float(np.std(scores)) if scores else None,
    }
    if modes:
        summary["modes"] = dict(modes)
    return summary
