"""Full relationship model: image -> sequence -> encoder -> fused classifier.

One forward pass handles one (subject, object[, predicate]) instance.
The feature map, the whole-image patch, its mask-attention projection and
z0 depend only on the image, so they are computed once per image and
shared through an `ImageCache` by every instance of that image.

Usage:
    model = RelationshipModel(config.model, vocab, manifest.predicates, manifest.mode, seed=0)
    with Tape():
        result = model.forward(instance, record)
    probs = model.predict_pair(record, 0, 1)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from relation_engine import ops
from relation_engine.backbone import BoundingBox, FeatureMap, VisualBackbone, normalize_box
from relation_engine.config import ModelConfig, derive_seed
from relation_engine.dataset import DatasetMode, ImageRecord, RelationInstance
from relation_engine.encoder import AttentionRecord, TransformerEncoder, extract_answer_state
from relation_engine.mask_attention import (
    MaskAttention,
    apply_mask,
    ground_truth_mask,
    mask_loss,
    term_word_embedding,
)
from relation_engine.nn import Module
from relation_engine.sequence import (
    EmbeddingTables,
    InputSequence,
    SlotTag,
    TermRole,
    Vocabulary,
    assign_visual_features,
    build_sequence,
    embed_sequence,
)
from relation_engine.spatial import ClassifierHead, FusionConfig, SpatialModule, fuse, fused_dim
from relation_engine.tensor import Tensor, no_grad

logger = logging.getLogger("relation_engine.model")

BACKBONE_GROUPS = ("backbone", "embeddings", "encoder")


@dataclass
class ImageCache:
    fmap: FeatureMap
    patch: Tensor                # whole-image v_s (d_c, d_h, d_w)
    projected: Optional[Tensor]  # mask-attention projection of the patch
    z0: Tensor


@dataclass
class TermOutput:
    role: TermRole
    mask: Tensor
    target: np.ndarray
    loss: Tensor


@dataclass
class ForwardResult:
    logits: Tensor
    h_so: Tensor
    c_so: Tensor
    sequence: InputSequence
    attention: AttentionRecord
    terms: list[TermOutput] = field(default_factory=list)

    def term(self, role: TermRole) -> TermOutput:
        for t in self.terms:
            if t.role is role:
                return t
        raise KeyError(role)


class RelationshipModel(Module):
    def __init__(self, config: ModelConfig, vocab: Vocabulary, predicates: Sequence[str],
                 mode: DatasetMode | str, seed: int = 0):
        super().__init__()
        self.config = config
        self.vocab = vocab
        self.predicates = list(predicates)
        self.mode = DatasetMode.parse(mode)
        self.seed = seed
        self.fusion = FusionConfig.parse(config.fusion)
        self.grid = (config.d_h, config.d_w)

        rng = np.random.default_rng(derive_seed(seed, "init"))
        self.backbone = VisualBackbone(config.d_c, config.d, rng,
                                       hidden=config.backbone_hidden, grid=self.grid)
        self.embeddings = EmbeddingTables(len(vocab), config.d, config.p_max, rng)
        self.encoder = TransformerEncoder(config.d, config.L, config.M, config.d_ff, rng)
        self.mask_attention: Optional[MaskAttention] = None
        if config.mask_attention:
            self.mask_attention = MaskAttention(config.d_c, config.d, rng)
        self.spatial: Optional[SpatialModule] = None
        if config.spatial:
            self.spatial = SpatialModule(config.d_s, rng)
        self.classifier = ClassifierHead(
            fused_dim(config.d, config.d_s, self.fusion), self.num_classes, rng,
            hidden=2 * (config.d + config.d_s),
        )
        self.assign_names()
        logger.info("Model ready: %d parameters, %s mode, spatial=%s, mask_attention=%s, fusion=%s",
                    self.num_parameters(), self.mode.short_name, config.spatial,
                    config.mask_attention, self.fusion)

    @property
    def num_classes(self) -> int:
        return 2 if self.mode.is_triplet else len(self.predicates)

    # ------------------------------------------------------------------
    # Forward
    # ------------------------------------------------------------------

    def image_cache(self, record: ImageRecord) -> ImageCache:
        if record.canvas is None:
            raise ValueError(f"image {record.image_id} has no rendered canvas")
        fmap = self.backbone.extract_feature_map(record.canvas)
        full = self.backbone.roi_feature(fmap, BoundingBox.full(record.width, record.height))
        projected = None
        if self.mask_attention is not None:
            projected = self.mask_attention.project_patch(full.patch)
        return ImageCache(fmap, full.patch, projected, full.pooled)

    def forward(self, instance: RelationInstance, record: ImageRecord,
                cache: Optional[ImageCache] = None) -> ForwardResult:
        cache = cache or self.image_cache(record)
        seq = build_sequence(instance, self.vocab, self.mode)
        subject_box, object_box = instance.subject.box, instance.object.box

        rois = {
            SlotTag.SUBJECT_ROI: self.backbone.roi_feature(cache.fmap, subject_box).pooled,
            SlotTag.OBJECT_ROI: self.backbone.roi_feature(cache.fmap, object_box).pooled,
        }
        if seq.is_triplet:
            union = seq.span(TermRole.PREDICATE).box
            rois[SlotTag.UNION_ROI] = self.backbone.roi_feature(cache.fmap, union).pooled

        terms: list[TermOutput] = []
        term_features = None
        if self.mask_attention is not None:
            term_features = {}
            for span in seq.spans:
                w_s = term_word_embedding(span, self.embeddings)
                m_s = self.mask_attention.compute_attention_mask(cache.patch, w_s, cache.projected)
                term_features[span.role] = apply_mask(cache.patch, m_s, self.backbone)
                target = ground_truth_mask(span.box, record.width, record.height, self.grid)
                terms.append(TermOutput(span.role, m_s, target,
                                        mask_loss(m_s, target, self.config.mask_loss)))

        visuals = assign_visual_features(seq, cache.z0, rois, term_features)
        x = embed_sequence(seq, self.embeddings, visuals)
        encoded, attention = self.encoder.encode(x)
        h_so = extract_answer_state(encoded, seq)

        if self.spatial is not None:
            c_so = self.spatial.encode(
                Tensor(normalize_box(subject_box, record.width, record.height)),
                Tensor(normalize_box(object_box, record.width, record.height)),
            )
        else:
            c_so = Tensor(np.zeros(self.config.d_s))
        logits = self.classifier(fuse(c_so, h_so, self.fusion))
        return ForwardResult(logits, h_so, c_so, seq, attention, terms)

    __call__ = forward

    def predict_pair(self, record: ImageRecord, subject: int, obj: int,
                     predicate: Optional[str] = None,
                     cache: Optional[ImageCache] = None) -> np.ndarray:
        """Class probabilities for one ordered pair (no tape is recorded)."""
        instance = RelationInstance(record.image_id, record.objects[subject],
                                    record.objects[obj], predicate, target=0,
                                    label=predicate or "")
        with no_grad():
            logits = self.forward(instance, record, cache).logits
            return ops.softmax(logits).numpy().astype(np.float64)

    # ------------------------------------------------------------------
    # Freezing and parameter accounting
    # ------------------------------------------------------------------

    def backbone_parameter_names(self) -> list[str]:
        return [name for name, _ in self.named_parameters()
                if name.split(".", 1)[0] in BACKBONE_GROUPS]

    def freeze_backbone(self) -> None:
        """Freeze visual backbone, embedding tables and encoder."""
        for group in BACKBONE_GROUPS:
            getattr(self, group).freeze()
        logger.info("Froze %d backbone parameters", len(self.backbone_parameter_names()))

    def trainable_report(self) -> dict:
        groups: dict[str, dict[str, int]] = {}
        for name, p in self.named_parameters():
            group = groups.setdefault(name.split(".", 1)[0], {"total": 0, "trainable": 0})
            group["total"] += p.size
            if p.trainable:
                group["trainable"] += p.size
        total = self.num_parameters()
        trainable = self.num_parameters(trainable_only=True)
        return {
            "total": total,
            "trainable": trainable,
            "fraction": trainable / total if total else 0.0,
            "groups": groups,
        }


def estimate_parameters(config: ModelConfig, vocab_size: int, num_classes: int) -> dict[str, int]:
    """Closed-form parameter counts per group, without building the model."""
    d, d_c, d_s, d_ff, h = config.d, config.d_c, config.d_s, config.d_ff, config.backbone_hidden
    fusion = FusionConfig.parse(config.fusion)
    counts = {
        "backbone": (3 * h * 9 + h) + (h * d_c * 9 + d_c) + (d_c * d + d),
        "embeddings": (vocab_size + 3 + config.p_max) * d,
        "encoder": config.L * (4 * d * d + 2 * d + d * d_ff + d_ff + d_ff * d + d + 2 * d),
    }
    if config.mask_attention:
        counts["mask_attention"] = (d_c * d + d) + (d * d * 9 + d) + (d * 9 + 1)
    if config.spatial:
        counts["spatial"] = 2 * (4 * d_s + d_s) + 2 * (d_s * d_s + d_s)
    hidden = 2 * (d + d_s)
    counts["classifier"] = (fused_dim(d, d_s, fusion) + 1) * hidden + (hidden + 1) * num_classes
    return counts


# Reference-scale dimensions: a 12-layer d=768 encoder over a 2048-channel
# backbone with a 30522-word vocabulary. Used only for parameter accounting.
REFERENCE_VOCAB = 30522


def reference_config(**overrides) -> ModelConfig:
    values = dict(d=768, L=12, M=12, d_ff=3072, d_s=64, d_c=2048, p_max=512,
                  backbone_hidden=256)
    values.update(overrides)
    return ModelConfig(**values)


def frozen_fraction(config: ModelConfig, vocab_size: int, num_classes: int) -> float:
    """Trainable share of the estimate once backbone, embeddings and encoder are frozen."""
    counts = estimate_parameters(config, vocab_size, num_classes)
    frozen = sum(counts[g] for g in BACKBONE_GROUPS)
    total = sum(counts.values())
    return (total - frozen) / total
