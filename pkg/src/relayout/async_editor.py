"""Branch-per-object latent guidance fused into one shared denoising step.

Each denoising step clones the shared latent once per object, steers every
clone with that object's region loss alone, predicts noise on each clone,
and stitches the predictions into a single noise map: cells inside an
object's target mask take that object's prediction (later-listed objects
win overlaps), everything else takes the unguided base prediction.  The
shared latent then advances by exactly one sampler step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .backend import (
    AttentionIntervention,
    ContractViolationError,
    Denoiser,
    NoiseSchedule,
    TapConfig,
    ddim_step,
)
from .layout import LayoutSpec
from .layout_guidance import (
    GuidanceConfig,
    GuidanceProblem,
    GuidanceRecord,
    guide_latent,
)

BASE_BRANCH = "__base__"


@dataclass
class BranchResult:
    """One branch's (possibly guided) latent and the noise predicted on it.

    ``object_id`` is None for the base branch.
    """

    object_id: str | None
    latent: np.ndarray
    noise: np.ndarray


@dataclass
class StepTelemetry:
    """Per-step observability: last branch losses and fusion cell counts."""

    step: int
    branch_losses: dict[str, float] = field(default_factory=dict)
    occupancy: dict[str, int] = field(default_factory=dict)


def base_branch(
    denoiser: Denoiser,
    shared_latent: np.ndarray,
    t: int,
    prompt: Sequence[str],
    interventions: Sequence[AttentionIntervention] = (),
) -> BranchResult:
    """Unguided prediction on the shared latent; supplies background noise."""
    out = denoiser.predict_noise(
        shared_latent, t, prompt, taps=TapConfig.none(), interventions=interventions
    )
    return BranchResult(None, np.array(shared_latent, dtype=np.float64), out.noise)


def per_object_guidance(
    denoiser: Denoiser,
    shared_latent: np.ndarray,
    object_id: str,
    t: int,
    problem: GuidanceProblem,
    schedule: NoiseSchedule,
    config: GuidanceConfig,
    interventions: Sequence[AttentionIntervention] = (),
    records: list[GuidanceRecord] | None = None,
) -> BranchResult:
    """Steer a clone of the shared latent with this object's loss alone."""
    if object_id not in problem.objects:
        raise ValueError(f"object {object_id!r} not present in the guidance problem")
    clone = np.array(shared_latent, dtype=np.float64)
    guided = guide_latent(
        denoiser, clone, t, problem, schedule, config,
        object_ids=[object_id], records=records,
    )
    out = denoiser.predict_noise(
        guided, t, problem.prompt, taps=TapConfig.none(), interventions=interventions
    )
    return BranchResult(object_id, guided, out.noise)


def fusion_owner_map(tar_layout: LayoutSpec, resolution: tuple[int, int]) -> np.ndarray:
    """Cell ownership grid: index into tar_layout.ids(), -1 for base.

    Objects are painted in listing order, so a later object overwrites any
    overlap; last listed is front-most.
    """
    owner = np.full(resolution, -1, dtype=np.int64)
    masks = tar_layout.masks_at_resolution(resolution)
    for idx, oid in enumerate(tar_layout.ids()):
        owner[masks[oid]] = idx
    return owner


def fuse_noise(
    branches: Sequence[BranchResult],
    base: BranchResult,
    tar_layout: LayoutSpec,
    resolution: tuple[int, int],
) -> np.ndarray:
    """Stitch per-branch noise into one map by target-mask ownership."""
    by_id: dict[str, BranchResult] = {}
    for branch in branches:
        if branch.object_id is None:
            raise ValueError("base branch must be passed separately, not in branches")
        by_id[branch.object_id] = branch
    ids = tar_layout.ids()
    missing = [oid for oid in ids if oid not in by_id]
    if missing:
        raise ValueError(f"no branch supplied for layout objects {missing}")

    owner = fusion_owner_map(tar_layout, resolution)
    # audit the partition: every cell assigned to exactly one source
    counts = (owner == -1).astype(np.int64)
    for idx in range(len(ids)):
        counts += owner == idx
    if not np.all(counts == 1):
        raise ContractViolationError("fusion ownership does not partition the grid")
    return _stitch(owner, ids, {oid: by_id[oid].noise for oid in ids}, base.noise)


def _stitch(
    owner: np.ndarray,
    ids: Sequence[str],
    fields: dict[str, np.ndarray],
    base_field: np.ndarray,
) -> np.ndarray:
    fused = np.array(base_field, dtype=np.float64)
    for idx, oid in enumerate(ids):
        sel = owner == idx
        fused[:, sel] = fields[oid][:, sel]
    return fused


def _occupancy(owner: np.ndarray, ids: Sequence[str]) -> dict[str, int]:
    occ = {BASE_BRANCH: int(np.sum(owner == -1))}
    for idx, oid in enumerate(ids):
        occ[oid] = int(np.sum(owner == idx))
    return occ


def _last_losses(records: Sequence[GuidanceRecord]) -> dict[str, float]:
    losses: dict[str, float] = {}
    for rec in records:
        losses.update(rec.object_losses)
    return losses


def editing_step(
    denoiser: Denoiser,
    shared_latent: np.ndarray,
    t: int,
    problem: GuidanceProblem,
    tar_layout: LayoutSpec,
    schedule: NoiseSchedule,
    config: GuidanceConfig,
    interventions: Sequence[AttentionIntervention] = (),
    mode: str = "async",
    guidance_records: list[GuidanceRecord] | None = None,
    telemetry: list[StepTelemetry] | None = None,
) -> np.ndarray:
    """Advance the shared latent by one guided, fused sampler step.

    Each object's cells advance from that object's guided branch (latent
    and noise together); background cells advance from the unguided base.
    The sampler itself acts cellwise, so this equals stepping each branch
    and stitching the results, while the scheduler advances exactly once.
    ``mode="sync"`` collapses the branches into a single jointly-guided
    evaluation (ablation), which coincides with async mode whenever one
    object owns every cell.  Interventions apply to every branch so both
    modes see the same model.
    """
    if t < 1:
        raise ValueError("editing_step requires t >= 1")
    if mode not in ("async", "sync"):
        raise ValueError(f"unknown mode {mode!r}")
    missing = [oid for oid in tar_layout.ids() if oid not in problem.objects]
    if missing:
        raise ValueError(f"guidance problem lacks layout objects {missing}")

    resolution = shared_latent.shape[-2:]
    records: list[GuidanceRecord] = guidance_records if guidance_records is not None else []
    seen = len(records)
    base = base_branch(denoiser, shared_latent, t, problem.prompt, interventions)

    if not tar_layout.objects:
        fused_noise = base.noise
        fused_latent = base.latent
    elif mode == "sync":
        clone = np.array(shared_latent, dtype=np.float64)
        guided = guide_latent(denoiser, clone, t, problem, schedule, config, records=records)
        out = denoiser.predict_noise(
            guided, t, problem.prompt, taps=TapConfig.none(), interventions=interventions
        )
        fused_noise = out.noise
        fused_latent = guided
    else:
        branches = [
            per_object_guidance(
                denoiser, shared_latent, oid, t, problem, schedule, config,
                interventions, records,
            )
            for oid in tar_layout.ids()
        ]
        fused_noise = fuse_noise(branches, base, tar_layout, resolution)
        owner = fusion_owner_map(tar_layout, resolution)
        fused_latent = _stitch(
            owner, tar_layout.ids(),
            {b.object_id: b.latent for b in branches}, base.latent,
        )

    if telemetry is not None:
        owner = fusion_owner_map(tar_layout, resolution)
        telemetry.append(StepTelemetry(
            step=t,
            branch_losses=_last_losses(records[seen:]),
            occupancy=_occupancy(fusion_owner_map(tar_layout, resolution), tar_layout.ids()),
        ))
    return ddim_step(fused_latent, fused_noise, t, schedule)
