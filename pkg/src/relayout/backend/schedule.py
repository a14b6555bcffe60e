"""Noise schedules for the deterministic DDIM sampler."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal coefficients for a T-step schedule.

    ``alpha_bar`` has T+1 entries with ``alpha_bar[0] == 1`` and is strictly
    decreasing; index t is the noise level after t inversion steps.
    """

    alpha_bar: np.ndarray
    sigma_mode: str = "alpha_bar"  # "alpha_bar" (cumulative) | "alpha_step" (per-step)

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        object.__setattr__(self, "alpha_bar", ab)
        if ab.ndim != 1 or ab.size < 2:
            raise ValueError("alpha_bar must be a 1-D array with at least 2 entries")
        if not np.isclose(ab[0], 1.0):
            raise ValueError("alpha_bar[0] must be 1")
        if np.any(ab <= 0) or np.any(ab > 1):
            raise ValueError("alpha_bar entries must lie in (0, 1]")
        if np.any(np.diff(ab) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if self.sigma_mode not in ("alpha_bar", "alpha_step"):
            raise ValueError(f"unknown sigma_mode {self.sigma_mode!r}")

    @property
    def num_steps(self) -> int:
        return self.alpha_bar.size - 1

    def signal(self, t: int) -> float:
        """sqrt(alpha_bar_t): scale of the clean component at level t."""
        return float(np.sqrt(self.alpha_bar[t]))

    def noise(self, t: int) -> float:
        """sqrt(1 - alpha_bar_t): scale of the noise component at level t."""
        return float(np.sqrt(1.0 - self.alpha_bar[t]))

    def sigma_sq(self, t: int) -> float:
        """Guidance scale sigma_t^2 = (1 - a_t) / a_t.

        ``sigma_mode`` selects whether a_t is the cumulative coefficient
        (default) or the per-step ratio alpha_bar_t / alpha_bar_{t-1}.
        """
        if self.sigma_mode == "alpha_bar":
            a = float(self.alpha_bar[t])
        else:
            if t == 0:
                return 0.0
            a = float(self.alpha_bar[t] / self.alpha_bar[t - 1])
        return (1.0 - a) / a


def linear_alpha_bar(num_steps: int, final: float = 0.3, sigma_mode: str = "alpha_bar") -> NoiseSchedule:
    """Linearly interpolated cumulative coefficients from 1 down to ``final``."""
    if not (0.0 < final < 1.0):
        raise ValueError("final alpha_bar must lie in (0, 1)")
    ab = np.linspace(1.0, final, num_steps + 1)
    return NoiseSchedule(alpha_bar=ab, sigma_mode=sigma_mode)


def default_toy_schedule(num_steps: int = 20) -> NoiseSchedule:
    return linear_alpha_bar(num_steps, final=0.3)


def default_real_schedule(num_steps: int = 50) -> NoiseSchedule:
    return linear_alpha_bar(num_steps, final=0.05)
