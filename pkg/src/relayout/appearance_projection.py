"""Carry object appearance from source to target via feature correspondence.

Per step: decoder features from both branches become per-location descriptors
(bilinear resample, concatenate, joint PCA).  Cosine similarity between all
source/target location pairs yields a projection field (per target cell, the
best-matching source cell), which layout priors then correct: background maps
to itself, each object's cells may only match inside that object's source
mask, and uncovered leftover cells match inside a transitional band around
the source foreground.  Warping the source self-attention values through the
corrected field and substituting them for the target values injects the
source appearance while the target keeps its own structure (Q and K).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .backend.base import AttentionIntervention, ConfigurationError
from .layout import LayoutSpec
from .util import bilinear_resize

log = logging.getLogger(__name__)

BACKGROUND = -1
UNCERTAIN = -2

_COSINE_EPS = 1e-8


@dataclass(frozen=True)
class ProjectionConfig:
    working_resolution: tuple[int, int] | None = None  # None: latent resolution
    pca_dims: int | None = None     # None: min(64, total channel dim)
    pca_fit: str = "per_step"       # "per_step" | "once"
    band_radius: int = 4
    apa_enabled: bool = True
    apa_start_t: int | None = None  # apply APA only for t <= start (None: always)
    apa_stop_t: int = 0             # ... and t > stop

    def __post_init__(self):
        if self.pca_fit not in ("per_step", "once"):
            raise ValueError(f"unknown pca_fit mode {self.pca_fit!r}")
        if self.band_radius < 0:
            raise ValueError("band_radius must be >= 0")

    def apa_active(self, t: int) -> bool:
        if not self.apa_enabled:
            return False
        if self.apa_start_t is not None and t > self.apa_start_t:
            return False
        return t > self.apa_stop_t


@dataclass
class PcaBasis:
    mean: np.ndarray        # [D]
    components: np.ndarray  # [k, D]

    def apply(self, rows: np.ndarray) -> np.ndarray:
        return (rows - self.mean) @ self.components.T


def _feature_rows(features: Mapping[str, np.ndarray], resolution: tuple[int, int],
                  layer_order: Sequence[str]) -> np.ndarray:
    parts = []
    for lid in layer_order:
        fmap = np.asarray(features[lid], dtype=np.float64)
        parts.append(bilinear_resize(fmap, resolution).reshape(fmap.shape[0], -1))
    return np.concatenate(parts, axis=0).T  # [hw, D]


def fit_pca(rows: np.ndarray, k: int) -> PcaBasis:
    """PCA basis from data rows; components have a fixed sign convention."""
    if k > rows.shape[1]:
        raise ValueError(f"pca dims {k} exceed feature dimension {rows.shape[1]}")
    if k > rows.shape[0]:
        raise ValueError(f"pca dims {k} exceed sample count {rows.shape[0]}")
    mean = rows.mean(axis=0)
    _, _, vt = np.linalg.svd(rows - mean, full_matrices=False)
    comps = vt[:k]
    # stabilize the arbitrary per-component sign
    flips = np.sign(comps[np.arange(k), np.abs(comps).argmax(axis=1)])
    flips[flips == 0] = 1.0
    return PcaBasis(mean=mean, components=comps * flips[:, None])


def extract_descriptors(
    src_features: Mapping[str, np.ndarray],
    tar_features: Mapping[str, np.ndarray],
    resolution: tuple[int, int],
    pca_dims: int | None = None,
    basis: PcaBasis | None = None,
) -> tuple[np.ndarray, np.ndarray, PcaBasis]:
    """Per-location descriptor grids for both branches plus the basis used.

    The PCA is fit on the union of both branches' location vectors unless a
    previously fit ``basis`` is supplied (single-fit mode).
    """
    if set(src_features) != set(tar_features):
        raise ValueError("source and target branches tapped different feature layers")
    if not src_features:
        raise ValueError("no feature maps supplied")
    order = sorted(src_features)
    src_rows = _feature_rows(src_features, resolution, order)
    tar_rows = _feature_rows(tar_features, resolution, order)
    if basis is None:
        k = min(64, src_rows.shape[1]) if pca_dims is None else pca_dims
        basis = fit_pca(np.concatenate([src_rows, tar_rows], axis=0), k)
    return basis.apply(src_rows), basis.apply(tar_rows), basis


def similarity_matrix(src: np.ndarray, tar: np.ndarray, tile_rows: int | None = None) -> np.ndarray:
    """Cosine similarity of every (source row i, target row j) pair.

    Sim[i, j] = <src_i, tar_j> / (|src_i|*|tar_j| + 1e-8).  Each row is
    computed with one matrix-vector product, so the optional ``tile_rows``
    chunking changes memory traffic only; results are bit-identical.
    """
    src = np.asarray(src, dtype=np.float64)
    tar = np.asarray(tar, dtype=np.float64)
    if src.shape[1] != tar.shape[1]:
        raise ValueError("descriptor dimensions differ")
    n_src = np.linalg.norm(src, axis=1)
    n_tar = np.linalg.norm(tar, axis=1)
    out = np.empty((src.shape[0], tar.shape[0]))
    if tile_rows is not None and tile_rows < 1:
        raise ValueError("tile_rows must be >= 1")
    step = tile_rows if tile_rows is not None else src.shape[0]
    for start in range(0, src.shape[0], step):
        for i in range(start, min(start + step, src.shape[0])):
            out[i] = (tar @ src[i]) / (n_src[i] * n_tar + _COSINE_EPS)
    return out


def projection_field(sim: np.ndarray) -> np.ndarray:
    """Best source index per target location; ties go to the lowest index."""
    if not np.all(np.isfinite(sim)):
        raise ValueError("similarity matrix contains non-finite entries")
    return np.argmax(sim, axis=0)


@dataclass
class RegionDecomposition:
    """Label map over the target grid plus the source-side matching priors.

    ``labels`` holds BACKGROUND, UNCERTAIN, or the index of the owning object
    in target stacking order; ``band`` marks the transitional ring around the
    source foreground; ``src_masks`` are per-object source masks, all at the
    working resolution.
    """

    labels: np.ndarray
    band: np.ndarray
    object_ids: list[str]
    src_masks: dict[str, np.ndarray]
    resolution: tuple[int, int]


def decompose_regions(
    src_layout: LayoutSpec,
    tar_layout: LayoutSpec,
    resolution: tuple[int, int],
    band_radius: int = 4,
) -> RegionDecomposition:
    if set(src_layout.ids()) != set(tar_layout.ids()):
        raise ValueError(
            f"layouts disagree on object ids: {sorted(src_layout.ids())} vs "
            f"{sorted(tar_layout.ids())}"
        )
    src_masks = src_layout.masks_at_resolution(resolution)
    tar_masks = tar_layout.masks_at_resolution(resolution)

    labels = np.full(resolution, BACKGROUND, dtype=np.int64)
    for idx, obj in enumerate(tar_layout.objects):  # later objects paint over
        labels[tar_masks[obj.id]] = idx

    src_union = np.zeros(resolution, dtype=bool)
    for m in src_masks.values():
        src_union |= m
    labels[(labels == BACKGROUND) & src_union] = UNCERTAIN

    if src_union.any() and band_radius > 0:
        structure = np.ones((2 * band_radius + 1,) * 2, dtype=bool)
        band = ndimage.binary_dilation(src_union, structure) & ~ndimage.binary_erosion(
            src_union, structure
        )
    else:
        band = np.zeros(resolution, dtype=bool)
    return RegionDecomposition(
        labels=labels,
        band=band,
        object_ids=[o.id for o in tar_layout.objects],
        src_masks=src_masks,
        resolution=resolution,
    )


def _restricted_argmax(sim: np.ndarray, columns: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    masked = np.where(allowed[:, None], sim[:, columns], -np.inf)
    return np.argmax(masked, axis=0)


def correct_projection_field(
    field: np.ndarray,
    sim: np.ndarray,
    decomp: RegionDecomposition,
) -> tuple[np.ndarray, list[int]]:
    """Apply region rules to a raw projection field.

    Returns the corrected field and the flat cell indices that fell back to
    the unrestricted match because their restriction set was empty (also
    logged as warnings).
    """
    labels = decomp.labels.ravel()
    corrected = np.asarray(field).copy()
    fallbacks: list[int] = []

    bg = np.flatnonzero(labels == BACKGROUND)
    corrected[bg] = bg

    def restrict(cols: np.ndarray, allowed: np.ndarray, what: str):
        if cols.size == 0:
            return
        if allowed.any():
            corrected[cols] = _restricted_argmax(sim, cols, allowed)
        else:
            fallbacks.extend(int(c) for c in cols)
            log.warning("empty %s restriction; %d cells fall back to the raw field",
                        what, cols.size)

    for idx, oid in enumerate(decomp.object_ids):
        restrict(np.flatnonzero(labels == idx), decomp.src_masks[oid].ravel(),
                 f"source mask of {oid!r}")
    restrict(np.flatnonzero(labels == UNCERTAIN), decomp.band.ravel(), "transitional band")
    return corrected, fallbacks


def warp(values: np.ndarray, field: np.ndarray) -> np.ndarray:
    """Gather rows: out[j] = values[field[j]]."""
    values = np.asarray(values)
    field = np.asarray(field)
    if field.min() < 0 or field.max() >= values.shape[0]:
        raise ValueError("projection field indexes outside the value rows")
    return values[field]


def apa_attention(q: np.ndarray, k: np.ndarray, v_projected: np.ndarray,
                  d: int | None = None) -> np.ndarray:
    """Standard scaled-dot-product attention read off the projected values."""
    d = q.shape[-1] if d is None else d
    logits = (q @ k.T) / np.sqrt(d)
    logits -= logits.max(axis=1, keepdims=True)
    attn = np.exp(logits)
    attn /= attn.sum(axis=1, keepdims=True)
    return attn @ v_projected


def capture_self_values(layer_ids: Sequence[str]) -> tuple[list[AttentionIntervention], dict[str, np.ndarray]]:
    """Observer hooks that record each layer's value array (last call wins)."""
    store: dict[str, np.ndarray] = {}
    interventions = []
    for lid in layer_ids:
        def observe(q, k, v, t, _lid=lid):
            store[_lid] = v.copy()
            return None
        interventions.append(AttentionIntervention(layers=lid, fn=observe))
    return interventions, store


def build_apa_interventions(
    source_values: Mapping[str, np.ndarray],
    field: np.ndarray,
) -> list[AttentionIntervention]:
    """Value-replacement hooks substituting warped source values per layer."""
    if not source_values:
        raise ConfigurationError("no captured source values to project")
    interventions = []
    for lid, values in source_values.items():
        warped = warp(values, field)
        def replace(q, k, v, t, _warped=warped):
            return _warped
        interventions.append(AttentionIntervention(layers=lid, fn=replace))
    return interventions


def write_projection_debug(
    out_dir: str | Path,
    t: int,
    raw_field: np.ndarray,
    corrected_field: np.ndarray,
    decomp: RegionDecomposition,
) -> list[Path]:
    """Dump the field pair as 16-bit index images and regions as indexed color."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    h, w = decomp.resolution
    written = []
    for name, f in (("raw", raw_field), ("corrected", corrected_field)):
        img = Image.fromarray(np.asarray(f, dtype=np.uint16).reshape(h, w))
        p = out_dir / f"field_t{t:03d}_{name}.png"
        img.save(p)
        written.append(p)

    codes = np.zeros((h, w), dtype=np.uint8)
    codes[decomp.labels == UNCERTAIN] = 1
    for idx in range(len(decomp.object_ids)):
        codes[decomp.labels == idx] = 2 + (idx % 12)
    palette = [40, 40, 40, 255, 220, 0]
    cycle = [(230, 25, 75), (60, 180, 75), (0, 130, 200), (245, 130, 48),
             (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60),
             (250, 190, 190), (0, 128, 128), (170, 110, 40), (128, 0, 0)]
    for rgb in cycle:
        palette.extend(rgb)
    img = Image.fromarray(codes, mode="P")
    img.putpalette(palette + [0] * (768 - len(palette)))
    p = out_dir / f"regions_t{t:03d}.png"
    img.save(p)
    written.append(p)
    return written
