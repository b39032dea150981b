"""Bidirectional post-norm Transformer encoder.

Each layer is multi-head self-attention followed by a position-wise
feed-forward network, both wrapped in residual + LayerNorm:

    h = LayerNorm(x + sum_m (softmax(Q_m x (K_m x)^T / sqrt(d/M)) V_m x) W_m)
    x' = LayerNorm(h + W_2 GELU(W_1 h + b_1) + b_2)

No causal mask and no dropout: every element attends to every element.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from relation_engine import ops
from relation_engine.errors import ShapeError
from relation_engine.nn import LayerNorm, Linear, Module, truncated_normal
from relation_engine.sequence import InputSequence
from relation_engine.tensor import Parameter, Tensor

logger = logging.getLogger("relation_engine.encoder")


@dataclass
class AttentionRecord:
    """Attention weights per layer, each (M, T, T)."""
    layers: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.layers)

    def head(self, layer: int, head: int) -> np.ndarray:
        return self.layers[layer][head]

    def max_row_error(self) -> float:
        """Largest |row sum - 1| over every layer and head."""
        if not self.layers:
            return 0.0
        return max(float(np.abs(a.sum(axis=-1) - 1.0).max()) for a in self.layers)


class MultiHeadSelfAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if d % heads:
            raise ShapeError("MultiHeadSelfAttention", (d,), (heads,), axis=0,
                             detail="model dim must be divisible by the head count")
        self.d = d
        self.heads = heads
        self.head_dim = d // heads
        self.query = Parameter(truncated_normal(rng, (heads, d, self.head_dim)))
        self.key = Parameter(truncated_normal(rng, (heads, d, self.head_dim)))
        self.value = Parameter(truncated_normal(rng, (heads, d, self.head_dim)))
        self.output = Parameter(truncated_normal(rng, (heads, self.head_dim, d)))
        self.norm = LayerNorm(d)

    def __call__(self, x: Tensor) -> tuple[Tensor, np.ndarray]:
        if x.ndim != 2 or x.shape[1] != self.d:
            raise ShapeError("self_attention", x.shape, (None, self.d), axis=1)
        q = ops.matmul(x, self.query)  # (M, T, d/M)
        k = ops.matmul(x, self.key)
        v = ops.matmul(x, self.value)
        scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 2, 1))),
                           1.0 / np.sqrt(self.head_dim))
        weights = ops.softmax(scores, axis=-1)
        mixed = ops.matmul(ops.matmul(weights, v), self.output)  # (M, T, d)
        h = self.norm(ops.add(x, ops.sum(mixed, axis=0)))
        return h, weights.data.copy()


class FeedForward(Module):
    def __init__(self, d: int, d_ff: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = Linear(d, d_ff, rng)
        self.fc2 = Linear(d_ff, d, rng)
        self.norm = LayerNorm(d)

    def __call__(self, h: Tensor) -> Tensor:
        return self.norm(ops.add(h, self.fc2(ops.gelu(self.fc1(h)))))


class EncoderLayer(Module):
    def __init__(self, d: int, heads: int, d_ff: int, rng: np.random.Generator):
        super().__init__()
        self.attention = MultiHeadSelfAttention(d, heads, rng)
        self.ffn = FeedForward(d, d_ff, rng)

    def __call__(self, x: Tensor) -> tuple[Tensor, np.ndarray]:
        h, weights = self.attention(x)
        return self.ffn(h), weights


class TransformerEncoder(Module):
    """Stack of `layers` encoder layers; zero layers is the identity."""

    def __init__(self, d: int, layers: int, heads: int, d_ff: int, rng: np.random.Generator):
        super().__init__()
        if d_ff < d:
            raise ShapeError("TransformerEncoder", (d,), (d_ff,), axis=None,
                             detail="d_ff must be >= d")
        self.layers: list[EncoderLayer] = []
        for i in range(layers):
            layer = EncoderLayer(d, heads, d_ff, rng)
            setattr(self, f"layer{i}", layer)
            self.layers.append(layer)

    def encode(self, x: Tensor) -> tuple[Tensor, AttentionRecord]:
        record = AttentionRecord()
        for layer in self.layers:
            x, weights = layer(x)
            record.layers.append(weights)
        return x, record

    __call__ = encode


def extract_answer_state(x: Tensor, seq: InputSequence) -> Tensor:
    """h_so: the encoder output row at the single [MASK] element."""
    if x.shape[0] != len(seq):
        raise ShapeError("extract_answer_state", x.shape, (len(seq),), axis=0)
    return ops.getitem(x, seq.mask_index)
