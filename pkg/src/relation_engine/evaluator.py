"""Evaluation: Recall@K for doublet models, accuracy for triplet models.

Doublet (predicate detection): every ordered object pair of an image gets
its best non-"no relationship" predicate, scored by that predicate's
softmax probability. A ground-truth (s, p, o) is recalled when it is among
the image's top-K predictions.

Triplet (binary): every annotated fact is classified true/false; accuracy
is reported overall and per predicate.

Usage:
    report = evaluate(model, manifest, split="test", ks=(50, 100), threads=4)
    write_metrics_report("runs/metrics.jsonl", report)
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from contextlib import AbstractContextManager, nullcontext
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from relation_engine.dataset import DatasetManifest, ImageRecord, relation_instances
from relation_engine.errors import EvaluationError
from relation_engine.predicates import NO_RELATIONSHIP
from relation_engine.profiler import Stage, StageProfiler
from relation_engine.tensor import no_grad

logger = logging.getLogger("relation_engine.evaluator")

Triplet = tuple[int, str, int]


@dataclass(frozen=True)
class PredictionRecord:
    image_id: str
    subject: int
    predicate: str
    object: int
    score: float

    @property
    def key(self) -> tuple[str, int, str, int]:
        return (self.image_id, self.subject, self.predicate, self.object)

    @property
    def triplet(self) -> Triplet:
        return (self.subject, self.predicate, self.object)

    def to_dict(self) -> dict:
        return {"image_id": self.image_id, "s": self.subject, "p": self.predicate,
                "o": self.object, "score": self.score}


@dataclass
class RecallResult:
    k: int
    recalled: int
    total: int

    @property
    def recall(self) -> float:
        return self.recalled / self.total if self.total else 0.0


@dataclass
class AccuracyBreakdown:
    correct: int
    total: int
    per_predicate: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)

    @property
    def overall(self) -> float:
        return self.correct / self.total if self.total else 0.0


# ----------------------------------------------------------------------
# Ranking
# ----------------------------------------------------------------------

def _eval_stage(profiler: Optional[StageProfiler]) -> AbstractContextManager:
    return profiler.stage(Stage.EVAL) if profiler is not None else nullcontext()


def rank_pairs(image_id: str, pair_probs: Mapping[tuple[int, int], np.ndarray],
               predicates: Sequence[str]) -> list[PredictionRecord]:
    """One prediction per ordered pair, best score first.

    Class 0 ("no relationship") is never predicted. Ties resolve by
    ascending (subject, object, predicate index).
    """
    if not predicates or predicates[0] != NO_RELATIONSHIP:
        raise EvaluationError(f"ranking needs {NO_RELATIONSHIP!r} as class 0")
    ranked = []
    for (s, o), probs in pair_probs.items():
        best = 1 + int(np.argmax(probs[1:]))
        ranked.append((-float(probs[best]), s, o, best))
    ranked.sort()
    return [PredictionRecord(image_id, s, predicates[p], o, -neg) for neg, s, o, p in ranked]


def rank_image(model, record: ImageRecord,
               profiler: Optional[StageProfiler] = None) -> list[PredictionRecord]:
    """Score every ordered object pair of one image with a doublet model."""
    if model.mode.is_triplet:
        raise EvaluationError("ranking needs a doublet model")
    if len(record.objects) < 2:
        return []
    with no_grad(), _eval_stage(profiler):
        cache = model.image_cache(record)
        pair_probs = {
            (a.index, b.index): model.predict_pair(record, a.index, b.index, cache=cache)
            for a in record.objects for b in record.objects if a.index != b.index
        }
    return rank_pairs(record.image_id, pair_probs, model.predicates)


def _check_predictions(predictions: Sequence[PredictionRecord]) -> None:
    seen = set()
    for p in predictions:
        if not math.isfinite(p.score):
            raise EvaluationError(f"non-finite score for {p.key}")
        if p.key in seen:
            raise EvaluationError(f"duplicate prediction {p.key}")
        seen.add(p.key)


def _order_key(p: PredictionRecord) -> tuple[float, int, int]:
    return (-p.score, p.subject, p.object)


def recall_at_k(predictions: Sequence[PredictionRecord],
                ground_truth: Mapping[str, Iterable[Triplet]], k: int) -> RecallResult:
    """Fraction of ground-truth triplets found in their image's top-k predictions."""
    if k <= 0:
        raise EvaluationError(f"K must be positive, got {k}")
    _check_predictions(predictions)
    by_image: dict[str, list[PredictionRecord]] = {}
    for p in predictions:
        by_image.setdefault(p.image_id, []).append(p)

    recalled = total = 0
    for image_id, facts in ground_truth.items():
        ranked = sorted(by_image.get(image_id, []), key=_order_key)
        top = {p.triplet for p in ranked[:k]}
        for fact in facts:
            total += 1
            recalled += fact in top
    return RecallResult(k, recalled, total)


def oracle_recall(predictions: Sequence[PredictionRecord],
                  ground_truth: Mapping[str, Iterable[Triplet]], k: int) -> RecallResult:
    """Brute-force recall: count, for each matched fact, the predictions ranked ahead of it."""
    if k <= 0:
        raise EvaluationError(f"K must be positive, got {k}")
    for i, p in enumerate(predictions):
        if not math.isfinite(p.score):
            raise EvaluationError(f"non-finite score for {p.key}")
        for q in predictions[i + 1:]:
            if p.key == q.key:
                raise EvaluationError(f"duplicate prediction {p.key}")

    recalled = total = 0
    for image_id, facts in ground_truth.items():
        for fact in facts:
            total += 1
            for i, p in enumerate(predictions):
                if p.image_id != image_id or p.triplet != fact:
                    continue
                ahead = 0
                for j, q in enumerate(predictions):
                    if q.image_id != image_id or j == i:
                        continue
                    if _order_key(q) < _order_key(p) or (_order_key(q) == _order_key(p) and j < i):
                        ahead += 1
                if ahead < k:
                    recalled += 1
                break
    return RecallResult(k, recalled, total)


def recall_curve(predictions: Sequence[PredictionRecord],
                 ground_truth: Mapping[str, Iterable[Triplet]],
                 ks: Iterable[int]) -> dict[int, RecallResult]:
    return {k: recall_at_k(predictions, ground_truth, k) for k in ks}


def per_predicate_recall(predictions: Sequence[PredictionRecord],
                         ground_truth: Mapping[str, Iterable[Triplet]], k: int,
                         predicates: Optional[Sequence[str]] = None) -> dict[str, float]:
    """Recall@k restricted to the ground-truth facts of each predicate."""
    labels = predicates or sorted({f[1] for facts in ground_truth.values() for f in facts})
    result = {}
    for label in labels:
        subset = {image_id: [f for f in facts if f[1] == label]
                  for image_id, facts in ground_truth.items()}
        r = recall_at_k(predictions, subset, k)
        if r.total:
            result[label] = r.recall
    return result


# ----------------------------------------------------------------------
# Binary accuracy
# ----------------------------------------------------------------------

def accuracy_breakdown(outcomes: Iterable[tuple[str, bool, bool]],
                       predicates: Sequence[str]) -> AccuracyBreakdown:
    """Aggregate (predicate, predicted, truth) outcomes; columns follow `predicates`."""
    correct: dict[str, int] = {}
    counts: dict[str, int] = {}
    for predicate, predicted, truth in outcomes:
        counts[predicate] = counts.get(predicate, 0) + 1
        correct[predicate] = correct.get(predicate, 0) + (predicted == truth)
    order = [p for p in predicates if p in counts] + sorted(set(counts) - set(predicates))
    return AccuracyBreakdown(
        correct=sum(correct.values()),
        total=sum(counts.values()),
        per_predicate={p: correct[p] / counts[p] for p in order},
        counts={p: counts[p] for p in order},
    )


def _binary_outcomes(model, record: ImageRecord,
                     profiler: Optional[StageProfiler] = None) -> list[tuple[str, bool, bool]]:
    outcomes = []
    if not record.relations:
        return outcomes
    with no_grad(), _eval_stage(profiler):
        cache = model.image_cache(record)
        for rel in record.relations:
            if rel.truth is None:
                raise EvaluationError(f"image {record.image_id}: relation without a truth label")
            probs = model.predict_pair(record, rel.subject, rel.object, rel.predicate, cache=cache)
            outcomes.append((rel.predicate, bool(probs[1] > probs[0]), rel.truth))
    return outcomes


def binary_accuracy(model, records: Sequence[ImageRecord],
                    predicates: Optional[Sequence[str]] = None,
                    threads: int = 1,
                    profiler: Optional[StageProfiler] = None) -> AccuracyBreakdown:
    """Accuracy of a triplet model; equal logits count as "false"."""
    if not model.mode.is_triplet:
        raise EvaluationError("binary accuracy needs a triplet model")
    with ThreadPoolExecutor(max_workers=max(threads, 1)) as pool:
        per_image = list(pool.map(lambda r: _binary_outcomes(model, r, profiler), records))
    outcomes = [o for image in per_image for o in image]
    return accuracy_breakdown(outcomes, predicates or model.predicates)


# ----------------------------------------------------------------------
# Mask quality
# ----------------------------------------------------------------------

def mask_iou(mask, target, threshold: float = 0.5) -> float:
    """IoU of the thresholded soft mask against a binary target; two empty masks give 1."""
    pred = np.asarray(mask) >= threshold
    gt = np.asarray(target) > 0.5
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def mean_mask_iou(model, manifest: DatasetManifest, records: Sequence[ImageRecord],
                  threshold: float = 0.5,
                  profiler: Optional[StageProfiler] = None) -> float:
    """Mean IoU over every supervised term of every annotated relation."""
    if model.mask_attention is None:
        raise EvaluationError("model was built without mask attention")
    scores = []
    with no_grad():
        for record in records:
            instances = relation_instances(manifest, record)
            if not instances:
                continue
            with _eval_stage(profiler):
                cache = model.image_cache(record)
                for instance in instances:
                    for term in model.forward(instance, record, cache).terms:
                        scores.append(mask_iou(term.mask.numpy(), term.target, threshold))
    return float(np.mean(scores)) if scores else 0.0


# ----------------------------------------------------------------------
# Reports
# ----------------------------------------------------------------------

@dataclass
class EvaluationReport:
    mode: str
    n_images: int
    n_gt: int
    recall: dict[int, RecallResult] = field(default_factory=dict)
    accuracy: Optional[AccuracyBreakdown] = None
    per_predicate: dict[str, float] = field(default_factory=dict)
    mask_iou: Optional[float] = None
    timings: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        data: dict = {"mode": self.mode, "n_images": self.n_images, "n_gt": self.n_gt}
        for k, r in sorted(self.recall.items()):
            data[f"recall@{k}"] = r.recall
        if self.accuracy is not None:
            data["overall_acc"] = self.accuracy.overall
        data["per_predicate"] = dict(self.per_predicate)
        if self.mask_iou is not None:
            data["mask_iou"] = self.mask_iou
        return data


def evaluate(model, manifest: DatasetManifest, split: str = "test",
             ks: Sequence[int] = (50, 100), threads: int = 1,
             with_mask_iou: bool = False,
             profiler: Optional[StageProfiler] = None) -> EvaluationReport:
    """Run the protocol matching the model's mode over one split, timing scoring as eval."""
    profiler = profiler or StageProfiler()
    if model.mode is not manifest.mode:
        raise EvaluationError(
            f"checkpoint mode {model.mode.value} does not match dataset mode {manifest.mode.value}"
        )
    records = manifest.split(split)
    report = EvaluationReport(mode=manifest.mode.value, n_images=len(records), n_gt=0)

    if manifest.mode.is_triplet:
        report.accuracy = binary_accuracy(model, records, manifest.predicates, threads, profiler)
        report.n_gt = report.accuracy.total
        report.per_predicate = dict(report.accuracy.per_predicate)
    else:
        for k in ks:
            if k <= 0:
                raise EvaluationError(f"K must be positive, got {k}")
        with ThreadPoolExecutor(max_workers=max(threads, 1)) as pool:
            ranked = list(pool.map(lambda r: rank_image(model, r, profiler), records))
        predictions = [p for image in ranked for p in image]
        ground_truth = {r.image_id: r.ground_truth() for r in records}
        report.recall = recall_curve(predictions, ground_truth, ks)
        report.n_gt = sum(len(f) for f in ground_truth.values())
        report.per_predicate = per_predicate_recall(predictions, ground_truth, max(ks),
                                                    manifest.predicates[1:])

    if with_mask_iou and model.mask_attention is not None:
        report.mask_iou = mean_mask_iou(model, manifest, records, profiler=profiler)
    report.timings = profiler.summary()
    logger.info("Evaluated %d images (%s): %s", report.n_images, report.mode,
                {k: v for k, v in report.to_dict().items() if k != "per_predicate"})
    logger.debug("Evaluation timings: %s", report.timings)
    return report


def write_metrics_report(path: str | Path, report: EvaluationReport | dict) -> None:
    """Append one JSON line per evaluation run."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = report.to_dict() if isinstance(report, EvaluationReport) else report
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(data, sort_keys=True) + "\n")
