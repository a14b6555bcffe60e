"""Layout-friendly starting noise for an edit.

Instead of pure random noise, build a crop-and-paste composite of the
source objects at their target positions, walk its latent partway up the
schedule with the deterministic inverter, and blend that state with fresh
noise.  Editing then starts at the blend's noise level with object mass
already near where the layout wants it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .backend import Denoiser, NoiseSchedule, ddim_invert_trace
from .layout import LayoutError, LayoutObject, LayoutSpec
from .util import rng_for


@dataclass(frozen=True)
class LfinConfig:
    """Controls the composite-inversion initializer."""

    stop_fraction: float = 0.7
    blend_lambda: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.stop_fraction <= 1.0:
            raise ValueError("stop_fraction must lie in (0, 1]")
        if not 0.0 <= self.blend_lambda <= 1.0:
            raise ValueError("blend_lambda must lie in [0, 1]")


def composite_image(
    src_image: np.ndarray,
    src_layout: LayoutSpec,
    tar_layout: LayoutSpec,
    background: int = 127,
) -> np.ndarray:
    """Paste each object's masked pixels into its target box on a flat canvas.

    Placement maps the source bounding box onto the target bounding box
    (translation plus per-axis scale; integer translations are exact).
    Objects are painted in target listing order, so later objects cover
    earlier ones.
    """
    src_image = np.asarray(src_image)
    if src_image.shape != (src_layout.height, src_layout.width, 3):
        raise LayoutError(
            f"source image is {src_image.shape}, layout says "
            f"{(src_layout.height, src_layout.width, 3)}"
        )
    missing = [oid for oid in tar_layout.ids() if oid not in src_layout.ids()]
    if missing:
        raise LayoutError(f"target objects missing from source layout: {missing}")

    canvas = np.full((tar_layout.height, tar_layout.width, 3), background, dtype=np.uint8)
    for oid in tar_layout.ids():
        sobj = src_layout.object(oid)
        tobj = tar_layout.object(oid)
        tw, th = tobj.bbox[2], tobj.bbox[3]
        if tw < 1 or th < 1:
            raise LayoutError(f"object {oid!r} has a degenerate target box {tobj.bbox}")
        tys, txs, sv, su = _box_pullback(sobj.bbox, tobj.bbox)
        keep = sobj.mask[sv, su]
        canvas[tys[keep], txs[keep]] = src_image[sv[keep], su[keep]]
    return canvas


def _box_pullback(sbb, tbb):
    """Integer source coordinates for every pixel of the target box."""
    sx, sy, sw, sh = sbb
    tx, ty, tw, th = tbb
    tys, txs = np.mgrid[ty:ty + th, tx:tx + tw]
    su = (txs - tx + 0.5) * (sw / tw) + sx - 0.5
    sv = (tys - ty + 0.5) * (sh / th) + sy - 0.5
    su = np.clip(np.rint(su).astype(np.int64), sx, sx + sw - 1)
    sv = np.clip(np.rint(sv).astype(np.int64), sy, sy + sh - 1)
    return tys, txs, sv, su


def transport_layout(
    src_layout: LayoutSpec,
    boxes: Sequence[tuple[str, tuple[int, int, int, int]]],
) -> LayoutSpec:
    """Target layout from target boxes alone: source masks mapped box-to-box.

    Box order becomes the target stacking order.  An id absent from the
    source layout, a degenerate box, or a box whose transported mask lands
    empty is an error.
    """
    objects = []
    for oid, bbox in boxes:
        sobj = src_layout.object(oid) if oid in src_layout.ids() else None
        if sobj is None:
            raise LayoutError(f"target box names unknown object {oid!r}")
        tx, ty, tw, th = bbox
        if tw < 1 or th < 1:
            raise LayoutError(f"object {oid!r} has a degenerate target box {bbox}")
        if tx < 0 or ty < 0 or tx + tw > src_layout.width or ty + th > src_layout.height:
            raise LayoutError(f"object {oid!r} target box {bbox} leaves the image")
        mask = np.zeros((src_layout.height, src_layout.width), dtype=bool)
        tys, txs, sv, su = _box_pullback(sobj.bbox, bbox)
        mask[tys, txs] = sobj.mask[sv, su]
        if not mask.any():
            raise LayoutError(f"object {oid!r} transported mask is empty")
        objects.append(LayoutObject(id=oid, token=sobj.token, mask=mask))
    return LayoutSpec(width=src_layout.width, height=src_layout.height, objects=objects)


def blend_noise(x_inv: np.ndarray, eps: np.ndarray, blend_lambda: float) -> np.ndarray:
    """Variance-preserving sqrt blend; exact pass-through at the endpoints."""
    if x_inv.shape != eps.shape:
        raise ValueError("blend inputs must share a shape")
    if blend_lambda == 1.0:
        return np.array(x_inv, dtype=np.float64)
    if blend_lambda == 0.0:
        return np.array(eps, dtype=np.float64)
    lam = float(blend_lambda)
    return np.sqrt(lam) * x_inv + np.sqrt(1.0 - lam) * eps


def lfin_start_step(schedule: NoiseSchedule, config: LfinConfig) -> int:
    """The rung the blended state lives at; editing starts here."""
    return int(round(config.stop_fraction * schedule.num_steps))


def lfin_noise(
    x0: np.ndarray,
    prompt: Sequence[str],
    schedule: NoiseSchedule,
    config: LfinConfig,
    denoiser: Denoiser,
) -> np.ndarray:
    """Invert a composite latent partway up, blend with seeded fresh noise."""
    trace = ddim_invert_trace(denoiser, x0, prompt, schedule,
                              stop_fraction=config.stop_fraction)
    x_inv = trace.latents[-1]
    eps = rng_for(config.seed, "lfin/noise").standard_normal(x_inv.shape)
    return blend_noise(x_inv, eps, config.blend_lambda)
