"""Mask attention: where in the image does a term's word point?

For a term with word embedding w (the sum of its token rows) and the
whole-image patch v (d_c x d_h x d_w):

    v~ = ReLU(conv1x1(v))
    m~ = ReLU(conv3x3(v~ + w replicated over every cell))
    m  = MinMaxNorm(conv3x3(m~))           # one channel, values in [0, 1]

The mask gates v cell by cell; the gated patch is mean-pooled and sent
through the backbone's shared projection, giving the term's
attention-guided feature. During training m is supervised against the
box of the term (the union box for predicates) rasterized to the grid.

Usage:
    mam = MaskAttention(d_c=64, d=64, rng=rng)
    projected = mam.project_patch(v)           # reusable across terms
    m = mam.compute_attention_mask(v, w, projected)
    feature = apply_mask(v, m, backbone)
    loss = mask_loss(m, ground_truth_mask(box, 128, 128), "mse")
"""

from __future__ import annotations

import logging
from typing import Optional

import numpy as np

from relation_engine import ops
from relation_engine.backbone import BoundingBox, VisualBackbone
from relation_engine.errors import ShapeError
from relation_engine.nn import Conv2d, Module
from relation_engine.sequence import EmbeddingTables, TermSpan
from relation_engine.tensor import Tensor

logger = logging.getLogger("relation_engine.mask_attention")


class MaskAttention(Module):
    def __init__(self, d_c: int, d: int, rng: np.random.Generator):
        super().__init__()
        self.d_c = d_c
        self.d = d
        self.project = Conv2d(d_c, d, 1, rng)
        self.fuse = Conv2d(d, d, 3, rng)
        self.mask = Conv2d(d, 1, 3, rng)

    def project_patch(self, v_s: Tensor) -> Tensor:
        """ReLU(conv1x1(v_s)); depends only on the patch, not the term."""
        if v_s.ndim != 3 or v_s.shape[0] != self.d_c:
            raise ShapeError("project_patch", v_s.shape, (self.d_c, None, None), axis=0)
        return ops.relu(self.project(v_s))

    def compute_attention_mask(self, v_s: Tensor, w_s: Tensor,
                               projected: Optional[Tensor] = None) -> Tensor:
        """Soft (d_h, d_w) mask for one term; all zeros if the logits are constant."""
        if projected is None:
            projected = self.project_patch(v_s)
        if w_s.shape != (self.d,):
            raise ShapeError("compute_attention_mask", w_s.shape, (self.d,), axis=0)
        fused = ops.add(projected, ops.reshape(w_s, (self.d, 1, 1)))
        hidden = ops.relu(self.fuse(fused))
        logits = self.mask(hidden)  # (1, d_h, d_w)
        _, d_h, d_w = logits.shape
        return ops.min_max_norm(ops.reshape(logits, (d_h, d_w)))


def term_word_embedding(span: TermSpan, tables: EmbeddingTables) -> Tensor:
    """Sum of the token-table rows of the term's words."""
    return ops.sum(tables.token(span.word_ids), axis=0)


def apply_mask(v_s: Tensor, m_s: Tensor, backbone: VisualBackbone) -> Tensor:
    """Gate every channel of v_s by m_s, mean-pool, project to d."""
    if v_s.shape[1:] != m_s.shape:
        raise ShapeError("apply_mask", v_s.shape, m_s.shape, axis=(1, 2))
    gated = ops.mul(v_s, ops.reshape(m_s, (1, *m_s.shape)))
    return backbone.project(ops.mean_pool(gated))


def ground_truth_mask(box: BoundingBox, width: float, height: float,
                      grid: tuple[int, int] = (14, 14)) -> np.ndarray:
    """Binary (d_h, d_w) mask: 1 where the cell center lies in the box (closed).

    A box too small to contain any cell center marks the cell nearest to
    the box center instead.
    """
    box.validate(width, height)
    d_h, d_w = grid
    cy = (np.arange(d_h) + 0.5) * (height / d_h)
    cx = (np.arange(d_w) + 0.5) * (width / d_w)
    rows = (cy >= box.y0) & (cy <= box.y1)
    cols = (cx >= box.x0) & (cx <= box.x1)
    mask = (rows[:, None] & cols[None, :]).astype(np.float64)
    if not mask.any():
        i = int(np.clip(np.floor((box.y0 + box.y1) / 2 / (height / d_h)), 0, d_h - 1))
        j = int(np.clip(np.floor((box.x0 + box.x1) / 2 / (width / d_w)), 0, d_w - 1))
        mask[i, j] = 1.0
        logger.warning("Box %s covers no mask cell center; marking cell (%d, %d)",
                       box.to_list(), i, j)
    return mask


def mask_loss(m_s: Tensor, target, kind: str = "mse") -> Tensor:
    """Mean squared error (default) or binary cross-entropy against a 0/1 mask."""
    if kind not in ("mse", "bce"):
        raise ValueError(f"Unknown mask loss: {kind}")
    target = Tensor(np.asarray(target), dtype=m_s.dtype)
    return ops.loss(m_s, target, kind)
