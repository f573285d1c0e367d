"""SGD with classical momentum: v' = m*v + g, theta' = theta - lr*v'."""

from __future__ import annotations

from ..errors import DomainError
from .params import ParamVector


def sgd_step(params: ParamVector, grad: ParamVector, velocity: ParamVector,
             lr: float, momentum: float = 0.0) -> tuple:
    """One update; returns (new_params, new_velocity)."""
    if lr <= 0:
        raise DomainError("learning rate must be positive")
    if not 0.0 <= momentum < 1.0:
        raise DomainError("momentum must be in [0, 1)")
    params.require_same_layout(grad)
    params.require_same_layout(velocity)
    new_velocity = velocity.combine(grad, lambda v, g: momentum * v + g)
    new_params = params.combine(new_velocity, lambda t, v: t - lr * v)
    return new_params, new_velocity
