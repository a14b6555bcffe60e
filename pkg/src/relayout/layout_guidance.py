"""Cross-attention region losses and guided latent updates.

An object's attention mass should sit inside its target mask.  The loss per
object is one minus the fraction of aggregated attention inside the mask;
losses are averaged over objects and the latent is nudged down the analytic
gradient during the early (high-noise) steps only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .backend.base import Denoiser, DenoiserOutput, TapConfig
from .backend.schedule import NoiseSchedule
from .util import area_resample, area_resample_vjp


@dataclass(frozen=True)
class GuidanceConfig:
    eta: float = 30.0
    guidance_fraction: float = 0.3
    inner_iterations: int = 3

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if not 0.0 < self.guidance_fraction <= 1.0:
            raise ValueError("guidance_fraction must lie in (0, 1]")
        if self.inner_iterations < 1:
            raise ValueError("inner_iterations must be >= 1")


@dataclass
class GuidanceRecord:
    """One telemetry row: losses seen at a (step, inner iteration) point."""

    step: int
    iteration: int
    object_losses: dict[str, float]
    total_loss: float


def aggregate_attention(layer_maps: Sequence[np.ndarray], resolution: tuple[int, int]) -> np.ndarray:
    """Mean of per-layer attention maps, each area-resampled to one grid."""
    if not layer_maps:
        raise ValueError("need at least one layer map to aggregate")
    acc = np.zeros(resolution)
    for m in layer_maps:
        acc += area_resample(np.asarray(m, dtype=np.float64), resolution)
    return acc / len(layer_maps)


def common_resolution(layer_maps: Sequence[np.ndarray]) -> tuple[int, int]:
    """Coarsest resolution among the tapped layers."""
    if not layer_maps:
        raise ValueError("no layer maps")
    coarsest = min(layer_maps, key=lambda m: m.shape[0] * m.shape[1])
    return coarsest.shape


def region_loss(attn: np.ndarray, mask: np.ndarray) -> float:
    """1 - (attention mass inside mask) / (total attention mass)."""
    attn = np.asarray(attn, dtype=np.float64)
    total = float(attn.sum())
    if total <= 0.0:
        raise ValueError("total attention mass is zero; broken attention tap")
    inside = float((attn * (np.asarray(mask) != 0)).sum())
    return 1.0 - inside / total


def region_loss_grad(attn: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """d region_loss / d attention map, same shape as the map."""
    attn = np.asarray(attn, dtype=np.float64)
    m = (np.asarray(mask) != 0).astype(np.float64)
    total = float(attn.sum())
    if total <= 0.0:
        raise ValueError("total attention mass is zero; broken attention tap")
    inside = float((attn * m).sum())
    return (inside - m * total) / (total * total)


def total_region_loss(losses: Sequence[float]) -> float:
    if len(losses) == 0:
        raise ValueError("no per-object losses to average")
    return float(np.mean(losses))


def guidance_active(t: int, schedule: NoiseSchedule, config: GuidanceConfig) -> bool:
    """Guide only the first round(fraction * T) steps walking down from T."""
    guided_steps = int(round(config.guidance_fraction * schedule.num_steps))
    return t > schedule.num_steps - guided_steps


def guided_update(
    latent: np.ndarray,
    grad: np.ndarray,
    t: int,
    schedule: NoiseSchedule,
    config: GuidanceConfig,
) -> np.ndarray:
    return latent - schedule.sigma_sq(t) * config.eta * grad


@dataclass
class ObjectAttention:
    """Aggregated per-object map plus what is needed to backpropagate it."""

    attn: np.ndarray                       # [h, w] aggregated map
    token_indices: tuple[int, ...]         # prompt positions of the phrase
    winner: np.ndarray                     # [h, w] argmax position into token_indices
    layer_ids: tuple[str, ...]
    layer_shapes: tuple[tuple[int, int], ...]


def object_attention(
    output: DenoiserOutput,
    token_indices: Sequence[int],
    layer_ids: Sequence[str],
    resolution: tuple[int, int],
) -> ObjectAttention:
    """Per-object attention: aggregate per token, then max over the phrase."""
    if not token_indices:
        raise ValueError("object has no prompt tokens")
    per_token = []
    shapes = None
    for idx in token_indices:
        maps = output.cross_attention[idx]
        if shapes is None:
            shapes = tuple(m.shape for m in maps)
        per_token.append(aggregate_attention(maps, resolution))
    stack = np.stack(per_token)
    winner = stack.argmax(axis=0)
    return ObjectAttention(
        attn=np.take_along_axis(stack, winner[None], axis=0)[0],
        token_indices=tuple(token_indices),
        winner=winner,
        layer_ids=tuple(layer_ids),
        layer_shapes=shapes,
    )


def attention_cotangents(obj: ObjectAttention, grad_attn: np.ndarray) -> dict[int, dict[str, np.ndarray]]:
    """Route a gradient at the aggregated map back to per-(token, layer) maps.

    Max over tokens routes each cell's gradient to the winning token only;
    the layer mean splits it equally; area resampling transposes exactly.
    """
    cots: dict[int, dict[str, np.ndarray]] = {}
    n_layers = len(obj.layer_ids)
    for pos, idx in enumerate(obj.token_indices):
        routed = grad_attn * (obj.winner == pos)
        if not routed.any():
            continue
        per_layer = {}
        for lid, shape in zip(obj.layer_ids, obj.layer_shapes):
            per_layer[lid] = area_resample_vjp(routed / n_layers, shape)
        cots[idx] = per_layer
    return cots


def merge_cotangents(parts: Sequence[dict[int, dict[str, np.ndarray]]]) -> dict[int, dict[str, np.ndarray]]:
    merged: dict[int, dict[str, np.ndarray]] = {}
    for part in parts:
        for idx, per_layer in part.items():
            slot = merged.setdefault(idx, {})
            for lid, g in per_layer.items():
                slot[lid] = slot[lid] + g if lid in slot else g.copy()
    return merged


@dataclass
class GuidanceProblem:
    """One latent-steering task: objects, their prompt phrases, target masks.

    ``objects`` maps object id -> prompt token positions; ``masks`` maps
    object id -> binary mask at the attention working resolution.
    """

    prompt: tuple[str, ...]
    objects: dict[str, tuple[int, ...]]
    masks: dict[str, np.ndarray]
    resolution: tuple[int, int]


def evaluate_losses(
    denoiser: Denoiser,
    latent: np.ndarray,
    t: int,
    problem: GuidanceProblem,
) -> dict[str, float]:
    """Per-object region losses at a latent, no gradient work."""
    output = denoiser.predict_noise(latent, t, problem.prompt, taps=TapConfig.cross_only())
    losses = {}
    for oid, toks in problem.objects.items():
        obj = object_attention(output, toks, getattr(denoiser, "cross_layers", ()), problem.resolution)
        losses[oid] = region_loss(obj.attn, problem.masks[oid])
    return losses


def loss_and_latent_grad(
    denoiser: Denoiser,
    latent: np.ndarray,
    t: int,
    problem: GuidanceProblem,
    object_ids: Sequence[str] | None = None,
) -> tuple[dict[str, float], np.ndarray]:
    """Region losses and d(mean loss)/d(latent) via the backend's VJP.

    ``object_ids`` restricts the loss to a subset (single-object guidance);
    default is all objects, averaged.
    """
    ids = list(object_ids) if object_ids is not None else list(problem.objects)
    if not ids:
        raise ValueError("no objects selected for guidance")
    output = denoiser.predict_noise(latent, t, problem.prompt, taps=TapConfig.cross_only())
    layer_ids = list(getattr(denoiser, "cross_layers", ()))
    losses: dict[str, float] = {}
    parts = []
    for oid in ids:
        obj = object_attention(output, problem.objects[oid], layer_ids, problem.resolution)
        mask = problem.masks[oid]
        losses[oid] = region_loss(obj.attn, mask)
        # total is the mean over selected objects
        parts.append(attention_cotangents(obj, region_loss_grad(obj.attn, mask) / len(ids)))
    grad = denoiser.cross_attention_vjp(latent, t, problem.prompt, merge_cotangents(parts))
    return losses, grad


def guide_latent(
    denoiser: Denoiser,
    latent: np.ndarray,
    t: int,
    problem: GuidanceProblem,
    schedule: NoiseSchedule,
    config: GuidanceConfig,
    object_ids: Sequence[str] | None = None,
    records: list[GuidanceRecord] | None = None,
) -> np.ndarray:
    """Run the configured inner iterations of guided latent descent at step t.

    Each iteration recomputes attention at the current latent.  Outside the
    active window the latent is returned unchanged.
    """
    if not guidance_active(t, schedule, config):
        return latent
    x = np.asarray(latent, dtype=np.float64)
    for it in range(config.inner_iterations):
        losses, grad = loss_and_latent_grad(denoiser, x, t, problem, object_ids)
        if records is not None:
            records.append(GuidanceRecord(
                step=t, iteration=it, object_losses=dict(losses),
                total_loss=total_region_loss(list(losses.values())),
            ))
        x = guided_update(x, grad, t, schedule, config)
    return x
