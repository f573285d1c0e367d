"""Per-step gradient privacy: L2 clipping, Gaussian noise, and a basic
composition ledger (a deliberately loose upper bound on epsilon)."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import DomainError
from .mlcore.params import ParamVector
from .protocol import PrivacyConfig

__all__ = ["PrivacyConfig", "PrivacyLedger", "clip_gradient", "noise_gradient",
           "account", "per_step_epsilon"]


@dataclass(frozen=True)
class PrivacyLedger:
    config: PrivacyConfig
    steps_taken: int = 0
    reported_epsilon: float = 0.0


def clip_gradient(grad: ParamVector, clip_norm: float) -> ParamVector:
    """Scale the whole gradient so its global L2 norm is at most clip_norm."""
    if clip_norm <= 0:
        raise DomainError("clip_norm must be positive")
    norm = grad.l2_norm()
    if norm <= clip_norm:
        return grad
    factor = clip_norm / norm
    return grad.map(lambda a: a * factor)


def noise_gradient(grad: ParamVector, noise_multiplier: float, clip_norm: float,
                   rng: np.random.Generator) -> ParamVector:
    """Add iid Gaussian noise with std = noise_multiplier * clip_norm."""
    if noise_multiplier < 0:
        raise DomainError("noise_multiplier must be >= 0")
    if noise_multiplier == 0:
        return grad
    std = noise_multiplier * clip_norm
    return grad.map(lambda a: a + rng.normal(0.0, std, size=a.shape))


def per_step_epsilon(config: PrivacyConfig) -> float:
    """Gaussian-mechanism epsilon for one step; infinity when sigma is 0."""
    if config.noise_multiplier == 0:
        return math.inf
    return math.sqrt(2.0 * math.log(1.25 / config.delta)) / config.noise_multiplier


def account(ledger: PrivacyLedger) -> PrivacyLedger:
    """One more step under basic composition: total = steps * per-step."""
    steps = ledger.steps_taken + 1
    step_eps = per_step_epsilon(ledger.config)
    total = math.inf if math.isinf(step_eps) else steps * step_eps
    return replace(ledger, steps_taken=steps, reported_epsilon=total)
