"""Deterministic DDIM stepping, inversion, and trace bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .base import AttentionIntervention, Denoiser, TapConfig
from .schedule import NoiseSchedule


def ddim_step(latent: np.ndarray, noise: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """One deterministic sampler step x_t -> x_{t-1}.

    x_{t-1} = sqrt(ab_{t-1}) * (x_t - sqrt(1-ab_t) * eps) / sqrt(ab_t)
              + sqrt(1-ab_{t-1}) * eps
    """
    if not 1 <= t <= schedule.num_steps:
        raise ValueError(f"step index t={t} outside [1, {schedule.num_steps}]")
    x0_hat = (latent - schedule.noise(t) * noise) / schedule.signal(t)
    return schedule.signal(t - 1) * x0_hat + schedule.noise(t - 1) * noise


def ddim_invert_step(latent: np.ndarray, noise: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """Algebraic inverse of :func:`ddim_step` for the same rung t: x_{t-1} -> x_t."""
    if not 1 <= t <= schedule.num_steps:
        raise ValueError(f"step index t={t} outside [1, {schedule.num_steps}]")
    x0_hat = (latent - schedule.noise(t - 1) * noise) / schedule.signal(t - 1)
    return schedule.signal(t) * x0_hat + schedule.noise(t) * noise


@dataclass
class DenoisingTrace:
    """Ordered latents [X_0 .. X_K] recorded while inverting a clean latent."""

    latents: list[np.ndarray]
    prompt: tuple[str, ...]
    stop_fraction: float

    @property
    def top_step(self) -> int:
        return len(self.latents) - 1

    def state(self, t: int) -> np.ndarray:
        if not 0 <= t <= self.top_step:
            raise IndexError(f"trace holds steps 0..{self.top_step}, asked for {t}")
        return self.latents[t]


def ddim_invert_trace(
    denoiser: Denoiser,
    x0: np.ndarray,
    prompt: Sequence[str],
    schedule: NoiseSchedule,
    stop_fraction: float = 1.0,
) -> DenoisingTrace:
    """Walk x0 up the schedule, saving every intermediate latent.

    Each rung reuses the prediction made at the lower state (single
    evaluation per step); K = round(stop_fraction * T) rungs are taken.
    """
    if not 0.0 < stop_fraction <= 1.0:
        raise ValueError("stop_fraction must lie in (0, 1]")
    if not np.all(np.isfinite(x0)):
        raise ValueError("x0 contains non-finite entries")
    k = int(round(stop_fraction * schedule.num_steps))
    latents = [np.array(x0, dtype=np.float64)]
    taps = TapConfig.none()
    for t in range(k):
        eps = denoiser.predict_noise(latents[-1], t, prompt, taps=taps).noise
        latents.append(ddim_invert_step(latents[-1], eps, t + 1, schedule))
    return DenoisingTrace(latents=latents, prompt=tuple(prompt), stop_fraction=stop_fraction)


def ddim_sample(
    denoiser: Denoiser,
    latent: np.ndarray,
    t_start: int,
    prompt: Sequence[str],
    schedule: NoiseSchedule,
    interventions: Sequence[AttentionIntervention] = (),
) -> np.ndarray:
    """Plain deterministic sampling from level t_start down to 0."""
    x = np.array(latent, dtype=np.float64)
    taps = TapConfig.none()
    for t in range(t_start, 0, -1):
        eps = denoiser.predict_noise(x, t, prompt, taps=taps, interventions=interventions).noise
        x = ddim_step(x, eps, t, schedule)
    return x
