"""Denoiser abstraction: outputs, tap configuration, and intervention hooks.

A backend wraps one latent-space denoiser.  Beyond plain noise prediction it
can expose cross-attention maps (per prompt token), decoder feature maps, and
self-attention hooks that may observe or replace the value array before the
attention output is formed.  The full adapter contract lives in
``docs/backend_contract.md``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence, runtime_checkable

import numpy as np


class BackendError(Exception):
    """Base class for backend failures."""


class ConfigurationError(BackendError):
    """A tap or intervention references a layer the backend does not have."""


class ContractViolationError(BackendError):
    """A hook or input broke a shape/validity contract."""


class UnknownTokenError(BackendError):
    """A prompt token is missing from the backend vocabulary."""


@dataclass
class DenoiserOutput:
    """One noise prediction plus whatever taps were requested.

    ``cross_attention`` maps prompt token index -> list of non-negative
    spatial maps, one per tapped cross-attention layer.  ``features`` maps
    layer id -> [d_l, h_l, w_l] array.
    """

    noise: np.ndarray
    cross_attention: dict[int, list[np.ndarray]] = field(default_factory=dict)
    features: dict[str, np.ndarray] = field(default_factory=dict)


# Callback contract: fn(query [n, dk], key [n, dk], value [n, dv], t) returns a
# replacement for the value array (same shape) or None to leave it unchanged.
InterventionFn = Callable[[np.ndarray, np.ndarray, np.ndarray, int], "np.ndarray | None"]


@dataclass
class AttentionIntervention:
    """Targets self-attention layers whose id matches ``layers`` (fnmatch)."""

    layers: str | Sequence[str]
    fn: InterventionFn

    def patterns(self) -> list[str]:
        return [self.layers] if isinstance(self.layers, str) else list(self.layers)


@dataclass(frozen=True)
class TapConfig:
    """Which layers to read out of a prediction.

    ``cross`` / ``features``: "all", "default", "none", or explicit layer ids.
    """

    cross: str | Sequence[str] = "all"
    features: str | Sequence[str] = "default"

    @staticmethod
    def none() -> "TapConfig":
        return TapConfig(cross="none", features="none")

    @staticmethod
    def cross_only() -> "TapConfig":
        return TapConfig(cross="all", features="none")

    @staticmethod
    def features_only() -> "TapConfig":
        return TapConfig(cross="none", features="default")


@runtime_checkable
class Denoiser(Protocol):
    """Minimum surface the pipeline needs from a backend."""

    latent_shape: tuple[int, int, int]

    def identity(self) -> str: ...

    def predict_noise(
        self,
        latent: np.ndarray,
        t: int,
        prompt: Sequence[str],
        taps: TapConfig | None = None,
        interventions: Sequence[AttentionIntervention] = (),
    ) -> DenoiserOutput: ...

    def cross_attention_vjp(
        self,
        latent: np.ndarray,
        t: int,
        prompt: Sequence[str],
        cotangents: dict[int, dict[str, np.ndarray]],
    ) -> np.ndarray: ...


def validate_latent(latent: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    latent = np.asarray(latent, dtype=np.float64)
    if latent.shape != shape:
        raise ContractViolationError(f"latent shape {latent.shape} != backend shape {shape}")
    if not np.all(np.isfinite(latent)):
        raise ContractViolationError("latent contains non-finite entries")
    return latent
