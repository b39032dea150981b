"""Parameter containers shared by every model component."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np
from scipy.stats import truncnorm

from relation_engine import ops
from relation_engine.errors import CheckpointShapeError, MissingParameterError
from relation_engine.tensor import Parameter, Tensor

INIT_STD = 0.02


def truncated_normal(rng: np.random.Generator, shape: tuple[int, ...],
                     std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) samples clipped at two standard deviations."""
    return truncnorm.rvs(-2.0, 2.0, size=shape, random_state=rng) * std


class Module:
    """Registers parameters and child modules by attribute name.

    `named_parameters()` yields dotted paths in registration order, e.g.
    `encoder.layer0.attention.query`.
    """

    def __init__(self):
        object.__setattr__(self, "_parameters", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name: str, value) -> None:
        if isinstance(value, Parameter):
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._parameters.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self) -> None:
        for name, p in self.named_parameters():
            p.name = name

    def freeze(self) -> None:
        for p in self.parameters():
            p.trainable = False

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.trainable = True

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def cast(self, dtype) -> None:
        """Switch every parameter to `dtype` in place (float64 for grad checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None

    def num_parameters(self, trainable_only: bool = False) -> int:
        return sum(p.size for p in self.parameters() if p.trainable or not trainable_only)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = [n for n in own if n not in state]
        unexpected = [n for n in state if n not in own]
        if missing or unexpected:
            raise MissingParameterError(
                f"parameter names differ: missing {missing}, unexpected {unexpected}"
            )
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise CheckpointShapeError(
                    f"{name}: stored shape {value.shape} != model shape {p.shape}"
                )
            p.data = value.astype(p.dtype, copy=True)


class Linear(Module):
    """y = x W + b over the last axis; W is stored (in, out)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(truncated_normal(rng, (in_features, out_features)))
        self.bias: Optional[Parameter] = None
        if bias:
            self.bias = Parameter(np.zeros(out_features), decay=False)

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.weight)
        return ops.add(y, self.bias) if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator):
        super().__init__()
        if kernel_size not in (1, 3):
            raise ValueError(f"kernel_size must be 1 or 3, got {kernel_size}")
        self.kernel_size = kernel_size
        self.weight = Parameter(
            truncated_normal(rng, (out_channels, in_channels, kernel_size, kernel_size))
        )
        self.bias = Parameter(np.zeros(out_channels), decay=False)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, size: int):
        super().__init__()
        self.gamma = Parameter(np.ones(size), decay=False)
        self.beta = Parameter(np.zeros(size), decay=False)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta)


class Embedding(Module):
    def __init__(self, num_embeddings: int, dim: int, rng: np.random.Generator):
        super().__init__()
        self.weight = Parameter(truncated_normal(rng, (num_embeddings, dim)))

    def __call__(self, ids) -> Tensor:
        return ops.embedding(self.weight, ids)
