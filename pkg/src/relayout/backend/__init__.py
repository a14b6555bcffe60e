"""Denoiser backends and the deterministic sampling loop."""

from __future__ import annotations

from typing import Callable

from .base import (
    AttentionIntervention,
    BackendError,
    ConfigurationError,
    ContractViolationError,
    Denoiser,
    DenoiserOutput,
    TapConfig,
    UnknownTokenError,
    validate_latent,
)
from .ddim import (
    DenoisingTrace,
    ddim_invert_step,
    ddim_invert_trace,
    ddim_sample,
    ddim_step,
)
from .schedule import (
    NoiseSchedule,
    default_real_schedule,
    default_toy_schedule,
    linear_alpha_bar,
)
from .toy import ToyDenoiser, make_toy_denoiser

_ADAPTERS: dict[str, Callable[..., Denoiser]] = {}


def register_adapter(name: str, factory: Callable[..., Denoiser]):
    """Register a constructor for ``adapter:<name>`` backend strings."""
    _ADAPTERS[name] = factory


def get_backend(name: str, **kwargs) -> Denoiser:
    """Build a denoiser from a backend string ("toy" or "adapter:<name>")."""
    if name == "toy":
        return make_toy_denoiser(**kwargs)
    if name.startswith("adapter:"):
        key = name.split(":", 1)[1]
        if key not in _ADAPTERS:
            raise ConfigurationError(
                f"no adapter registered under {key!r}; call register_adapter first"
            )
        return _ADAPTERS[key](**kwargs)
    raise ConfigurationError(f"unknown backend {name!r}")


__all__ = [
    "AttentionIntervention",
    "BackendError",
    "ConfigurationError",
    "ContractViolationError",
    "Denoiser",
    "DenoiserOutput",
    "DenoisingTrace",
    "NoiseSchedule",
    "TapConfig",
    "ToyDenoiser",
    "UnknownTokenError",
    "ddim_invert_step",
    "ddim_invert_trace",
    "ddim_sample",
    "ddim_step",
    "default_real_schedule",
    "default_toy_schedule",
    "get_backend",
    "linear_alpha_bar",
    "make_toy_denoiser",
    "register_adapter",
    "validate_latent",
]
