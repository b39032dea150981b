"""Adam with decoupled weight decay and a linear-warmup learning rate."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from relation_engine.config import TrainConfig
from relation_engine.errors import GradientError
from relation_engine.nn import Module

logger = logging.getLogger("relation_engine.optim")


def lr_schedule(step: int, base_lr: float, warmup: int) -> float:
    """base * step / warmup during warmup, then constant."""
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    if warmup <= 0 or step >= warmup:
        return base_lr
    return base_lr * step / warmup


@dataclass
class OptimizerState:
    """First/second moments per parameter name and the shared step count."""
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros(cls, model: Module) -> OptimizerState:
        return cls(
            m={name: np.zeros_like(p.data) for name, p in model.named_parameters()},
            v={name: np.zeros_like(p.data) for name, p in model.named_parameters()},
        )


def adam_step(model: Module, state: OptimizerState, lr: float, config: TrainConfig) -> int:
    """One bias-corrected Adam update of every trainable parameter with a gradient.

    Weight decay is decoupled, computed on the pre-update value, and skipped
    for parameters marked `decay=False` (biases, layer-norm affines).
    Returns the number of parameters updated.

    Raises:
        GradientError: A gradient is NaN or infinite; nothing is updated.
    """
    params = [(name, p) for name, p in model.named_parameters()
              if p.trainable and p.grad is not None]
    for name, p in params:
        if not np.all(np.isfinite(p.grad)):
            raise GradientError(f"non-finite gradient in parameter {name}")

    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params:
        g = p.grad
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name] = m.astype(p.dtype)
        state.v[name] = v.astype(p.dtype)
        update = (m / c1) / (np.sqrt(v / c2) + config.eps)
        theta = p.data
        new = theta - lr * update
        if p.decay and config.weight_decay:
            new = new - lr * config.weight_decay * theta
        p.data = new.astype(p.dtype)
    return len(params)
