"""Training loop: joint classification + mask loss, Adam, per-epoch checkpoints.

Instances are built image by image (sampled pairs in doublet mode, every
annotated fact in triplet mode) and cut into batches of
`train.batch_size`. All randomness derives from `train.seed`: image order
from the "order" seed and the epoch, pair sampling from the "sample" seed,
the epoch and the image id.

Usage:
    trainer = Trainer(model, manifest, config, out_dir="runs/vrd")
    result = trainer.fit()
    print(result.log.losses()[-1])
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from relation_engine import ops
from relation_engine.checkpoint import save_checkpoint
from relation_engine.config import RunConfig, derive_seed
from relation_engine.dataset import DatasetManifest, ImageRecord, RelationInstance, training_instances
from relation_engine.errors import ConfigError
from relation_engine.model import ForwardResult, ImageCache, RelationshipModel
from relation_engine.optim import OptimizerState, adam_step, lr_schedule
from relation_engine.profiler import Stage, StageProfiler
from relation_engine.tensor import Tape, Tensor, backward
from relation_engine.training_log import StepRecord, TrainingLog

logger = logging.getLogger("relation_engine.trainer")

Batch = list[tuple[ImageRecord, RelationInstance]]


@dataclass
class LossBreakdown:
    total: Tensor
    classification: Tensor
    mask: Optional[Tensor] = None

    @property
    def mask_value(self) -> float:
        return self.mask.item() if self.mask is not None else 0.0


def total_loss(results: Sequence[ForwardResult], targets: Sequence[int]) -> LossBreakdown:
    """Mean cross-entropy over the batch + mean mask loss over every supervised term."""
    if not results:
        raise ValueError("total_loss needs a non-empty batch")
    if len(results) != len(targets):
        raise ValueError(f"{len(results)} results but {len(targets)} targets")
    logits = ops.stack([r.logits for r in results])
    classification = ops.cross_entropy(logits, np.asarray(targets))
    term_losses = [t.loss for r in results for t in r.terms]
    if not term_losses:
        return LossBreakdown(classification, classification)
    mask = ops.mean(ops.stack(term_losses))
    return LossBreakdown(ops.add(classification, mask), classification, mask)


@dataclass
class FitResult:
    log: TrainingLog
    steps: int
    checkpoints: list[Path] = field(default_factory=list)
    profile: dict = field(default_factory=dict)


class Trainer:
    def __init__(self, model: RelationshipModel, manifest: DatasetManifest, config: RunConfig,
                 out_dir: Optional[str | Path] = None,
                 profiler: Optional[StageProfiler] = None,
                 optimizer: Optional[OptimizerState] = None):
        if model.mode is not manifest.mode:
            raise ConfigError(
                f"model head is {model.mode.value} but the dataset is {manifest.mode.value}"
            )
        self.model = model
        self.manifest = manifest
        self.config = config
        self.out_dir = Path(out_dir) if out_dir else None
        self.profiler = profiler or StageProfiler()
        self.state = optimizer or OptimizerState.zeros(model)
        self.records = manifest.split("train")
        if config.train.freeze_backbone:
            model.freeze_backbone()

    def batches(self, epoch: int) -> list[Batch]:
        train = self.config.train
        order = np.random.default_rng([derive_seed(train.seed, "order"), epoch])
        instances: Batch = []
        for idx in order.permutation(len(self.records)):
            record = self.records[int(idx)]
            seed = derive_seed(train.seed, f"sample:{epoch}:{record.image_id}")
            for instance in training_instances(self.manifest, record, seed,
                                               train.pairs_per_image, train.positives_per_image):
                instances.append((record, instance))
        size = train.batch_size
        return [instances[i:i + size] for i in range(0, len(instances), size)]

    def train_step(self, batch: Batch, step: int) -> tuple[float, LossBreakdown]:
        model = self.model
        model.zero_grad()
        caches: dict[str, ImageCache] = {}
        with Tape():
            with self.profiler.stage(Stage.FORWARD):
                results = []
                for record, instance in batch:
                    if record.image_id not in caches:
                        caches[record.image_id] = model.image_cache(record)
                    results.append(model.forward(instance, record, caches[record.image_id]))
                losses = total_loss(results, [instance.target for _, instance in batch])
        with self.profiler.stage(Stage.BACKWARD):
            backward(losses.total)
        lr = lr_schedule(step, self.config.train.lr, self.config.train.warmup)
        with self.profiler.stage(Stage.OPTIMIZER):
            adam_step(model, self.state, lr, self.config.train)
        return lr, losses

    def fit(self) -> FitResult:
        train = self.config.train
        log = TrainingLog(stream=self.out_dir / "train_log.jsonl" if self.out_dir else None)
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self.config.to_yaml(self.out_dir / "config.yml")
        report = self.model.trainable_report()
        logger.info("Training %d of %d parameters (%.1f%%) on %d images for %d epochs",
                    report["trainable"], report["total"], 100 * report["fraction"],
                    len(self.records), train.epochs)

        result = FitResult(log=log, steps=self.state.t)
        for epoch in range(train.epochs):
            with self.profiler.stage(Stage.DATA):
                batches = self.batches(epoch)
            for batch in batches:
                step = self.state.t + 1
                lr, losses = self.train_step(batch, step)
                record = StepRecord(step=step, epoch=epoch, lr=lr,
                                    loss_cls=losses.classification.item(),
                                    loss_mask=losses.mask_value,
                                    loss_total=losses.total.item())
                log.add_step(record)
                logger.debug("step %d lr=%.3g loss=%.4f (cls %.4f, mask %.4f)", step, lr,
                             record.loss_total, record.loss_cls, record.loss_mask)
            result.steps = self.state.t

            summary = log.epoch_summary().get(epoch)
            if summary:
                logger.info("Epoch %d/%d: %d steps, loss %.4f (cls %.4f, mask %.4f)",
                            epoch + 1, train.epochs, summary["steps"], summary["loss_total"],
                            summary["loss_cls"], summary["loss_mask"])
            if self.out_dir:
                with self.profiler.stage(Stage.CHECKPOINT):
                    path = save_checkpoint(self.out_dir / "checkpoint", self.model, self.state,
                                           self.config, epoch=epoch)
                result.checkpoints.append(path)
            logger.info("Epoch %d stage timings: %s", epoch + 1, self.profiler.lap())

        result.profile = self.profiler.summary()
        return result


def fit(manifest: DatasetManifest, model: RelationshipModel, config: RunConfig,
        out_dir: Optional[str | Path] = None) -> FitResult:
    return Trainer(model, manifest, config, out_dir).fit()
