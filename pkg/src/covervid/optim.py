from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from covervid.tensor import Tensor


class MissingGradientError(RuntimeError):
    pass


@dataclass
class OptimizerState:
    """Velocity buffers for classical (heavy-ball) momentum."""

    momentum: float = 0.9
    lr: float = 5e-3
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")

    @classmethod
    def for_params(cls, params: dict[str, Tensor], momentum: float = 0.9, lr: float = 5e-3):
        state = cls(momentum=momentum, lr=lr)
        state.velocity = {k: np.zeros_like(p.values) for k, p in params.items()}
        return state


def sgd_momentum_step(params: dict[str, Tensor], state: OptimizerState, names=None) -> None:
    """In-place update ``v <- mu*v + g; p <- p - lr*v`` then clear gradients.

    ``names`` restricts the update to a subset (the trainable partition);
    every named parameter must carry a gradient. Parameters outside the
    subset are left untouched, velocity included.
    """
    names = list(params) if names is None else list(names)
    if set(state.velocity) != set(params):
        raise ValueError("optimizer velocity buffers do not match the parameter set")
    missing = [k for k in names if params[k].grad is None]
    if missing:
        raise MissingGradientError(f"no gradient for parameter(s): {', '.join(missing[:5])}")
    mu, lr = state.momentum, state.lr
    for k in names:
        p = params[k]
        v = state.velocity[k]
        if v.shape != p.shape:
            raise ValueError(f"velocity for {k} has shape {v.shape}, parameter has {p.shape}")
        v *= mu
        v += p.grad
        p.values -= (lr * v).astype(p.dtype, copy=False)
    for p in params.values():
        p.grad = None
