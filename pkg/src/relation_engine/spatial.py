"""Spatial module, feature fusion and the classification head.

    C~ = ReLU(W_4 C_s + b_4) + ReLU(W_5 C_o + b_5)
    C  = W_7 ReLU(W_6 C~ + b_6) + b_7

C_s and C_o are the normalized box coordinates (x0/w, y0/h, x1/w, y1/h).
The fused feature is [C ; h_so] (concat) or alpha*C + (1 - alpha)*h_so.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from relation_engine import ops
from relation_engine.errors import BoxError, ConfigError, ShapeError
from relation_engine.nn import Linear, Module
from relation_engine.tensor import Tensor


class FusionMode(Enum):
    CONCAT = "concat"
    ALPHA = "alpha"


@dataclass(frozen=True)
class FusionConfig:
    mode: FusionMode = FusionMode.CONCAT
    alpha: float | None = None

    def __post_init__(self):
        if self.mode is FusionMode.ALPHA:
            if self.alpha is None or not 0.0 <= self.alpha <= 1.0:
                raise ConfigError(f"alpha fusion needs alpha in [0, 1], got {self.alpha}")
        elif self.alpha is not None:
            raise ConfigError("alpha is only valid with alpha fusion")

    @property
    def is_alpha(self) -> bool:
        return self.mode is FusionMode.ALPHA

    @classmethod
    def parse(cls, text: str) -> FusionConfig:
        """'concat' or 'alpha:<value>'."""
        text = text.strip()
        if text == "concat":
            return cls()
        name, _, value = text.partition(":")
        if name != "alpha" or not value:
            raise ConfigError(f"fusion must be 'concat' or 'alpha:<value>', got {text!r}")
        try:
            alpha = float(value)
        except ValueError:
            raise ConfigError(f"bad alpha value {value!r}") from None
        return cls(FusionMode.ALPHA, alpha)

    def __str__(self) -> str:
        return "concat" if not self.is_alpha else f"alpha:{self.alpha:g}"


class SpatialModule(Module):
    def __init__(self, d_s: int, rng: np.random.Generator):
        super().__init__()
        self.d_s = d_s
        self.subject = Linear(4, d_s, rng)
        self.object = Linear(4, d_s, rng)
        self.hidden = Linear(d_s, d_s, rng)
        self.output = Linear(d_s, d_s, rng)

    def encode(self, c_s, c_o) -> Tensor:
        """C_so from two normalized 4-vectors."""
        c_s, c_o = ops.as_tensor(c_s), ops.as_tensor(c_o)
        for name, c in (("subject", c_s), ("object", c_o)):
            if c.shape != (4,):
                raise ShapeError("spatial_encode", c.shape, (4,), axis=0)
            if np.any(c.data < 0.0) or np.any(c.data > 1.0):
                raise BoxError(f"{name} coordinates {c.data.tolist()} are not normalized to [0, 1]")
        fused = ops.add(ops.relu(self.subject(c_s)), ops.relu(self.object(c_o)))
        return self.output(ops.relu(self.hidden(fused)))

    __call__ = encode


def fuse(c_so: Tensor, h_so: Tensor, config: FusionConfig) -> Tensor:
    if config.is_alpha:
        if c_so.shape != h_so.shape:
            raise ShapeError("fuse", c_so.shape, h_so.shape, axis=0,
                             detail="alpha fusion needs d_s == d")
        return ops.add(ops.scale(c_so, config.alpha), ops.scale(h_so, 1.0 - config.alpha))
    return ops.concat([c_so, h_so])


def fused_dim(d: int, d_s: int, config: FusionConfig) -> int:
    return d if config.is_alpha else d + d_s


class ClassifierHead(Module):
    """Two linear layers with ReLU between; returns raw logits."""

    def __init__(self, in_features: int, num_classes: int, rng: np.random.Generator,
                 hidden: int | None = None):
        super().__init__()
        self.in_features = in_features
        self.num_classes = num_classes
        hidden = hidden or 2 * in_features
        self.fc1 = Linear(in_features, hidden, rng)
        self.fc2 = Linear(hidden, num_classes, rng)

    def __call__(self, f_so: Tensor) -> Tensor:
        if f_so.shape[-1] != self.in_features:
            raise ShapeError("classify", f_so.shape, (self.in_features,), axis=-1)
        return self.fc2(ops.relu(self.fc1(f_so)))
