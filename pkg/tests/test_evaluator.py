"""Tests for ranking, Recall@K, binary accuracy and metric reports."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relation_engine.config import ModelConfig
from relation_engine.dataset import SyntheticConfig, generate_synthetic
from relation_engine.errors import EvaluationError
from relation_engine.evaluator import (
    EvaluationReport,
    PredictionRecord,
    RecallResult,
    accuracy_breakdown,
    binary_accuracy,
    evaluate,
    mask_iou,
    mean_mask_iou,
    oracle_recall,
    per_predicate_recall,
    rank_image,
    rank_pairs,
    recall_at_k,
    recall_curve,
    write_metrics_report,
)
from relation_engine.model import RelationshipModel
from relation_engine.predicates import NO_RELATIONSHIP
from relation_engine.sequence import build_vocabulary

PREDICATES = [NO_RELATIONSHIP, "above", "under", "on"]
SMALL = dict(d=16, L=1, M=2, d_ff=32, d_s=8, d_c=8, d_w=4, d_h=4, p_max=32, backbone_hidden=4)
SCENES = SyntheticConfig(images=5, width=48, height=48, min_side=8, max_side=16, seed=4)
TRIPLETS = st.tuples(st.integers(0, 3), st.sampled_from(PREDICATES[1:]), st.integers(0, 3)).filter(
    lambda t: t[0] != t[2]
)


@pytest.fixture(scope="module")
def vrd():
    return generate_synthetic(SCENES, "vrd")


@pytest.fixture(scope="module")
def binary():
    return generate_synthetic(SCENES, "binary")


def make_model(manifest, **overrides):
    return RelationshipModel(ModelConfig(**{**SMALL, **overrides}), build_vocabulary(manifest),
                             manifest.predicates, manifest.mode, seed=0)


def pred(image_id, s, p, o, score):
    return PredictionRecord(image_id, s, p, o, score)


def random_instance(rng):
    """Predictions with many score ties plus ground truth over a few images."""
    predictions, ground_truth = [], {}
    for i in range(int(rng.integers(1, 4))):
        image_id = f"img{i}"
        keys = set()
        for _ in range(int(rng.integers(0, 12))):
            s, o = (int(v) for v in rng.choice(4, size=2, replace=False))
            p = PREDICATES[int(rng.integers(1, 4))]
            if (s, p, o) in keys:
                continue
            keys.add((s, p, o))
            predictions.append(pred(image_id, s, p, o, float(rng.choice([0.1, 0.2, 0.5, 0.9]))))
        facts = []
        for _ in range(int(rng.integers(0, 5))):
            s, o = (int(v) for v in rng.choice(4, size=2, replace=False))
            facts.append((s, PREDICATES[int(rng.integers(1, 4))], o))
        ground_truth[image_id] = facts
    order = rng.permutation(len(predictions))
    return [predictions[i] for i in order], ground_truth


class TestRankPairs:
    def test_best_non_background_class(self):
        probs = {(0, 1): np.array([0.7, 0.1, 0.15, 0.05]),
                 (1, 0): np.array([0.1, 0.2, 0.3, 0.4])}
        ranked = rank_pairs("a", probs, PREDICATES)
        assert [(p.subject, p.predicate, p.object) for p in ranked] == [(1, "on", 0), (0, "under", 1)]
        assert ranked[0].score == pytest.approx(0.4)

    def test_ties_follow_pair_order(self):
        probs = {(2, 0): np.array([0.1, 0.3, 0.3, 0.3]),
                 (0, 2): np.array([0.1, 0.3, 0.3, 0.3]),
                 (0, 1): np.array([0.1, 0.3, 0.3, 0.3])}
        ranked = rank_pairs("a", probs, PREDICATES)
        assert [(p.subject, p.object) for p in ranked] == [(0, 1), (0, 2), (2, 0)]
        assert all(p.predicate == "above" for p in ranked)

    def test_needs_background_first(self):
        with pytest.raises(EvaluationError, match="class 0"):
            rank_pairs("a", {}, ["above", NO_RELATIONSHIP])


class TestRecall:
    def test_hand_computed(self):
        predictions = [pred("a", 0, "on", 1, 0.9), pred("a", 1, "under", 0, 0.8),
                       pred("a", 2, "above", 1, 0.1)]
        ground_truth = {"a": [(0, "on", 1), (2, "above", 1)], "b": [(0, "on", 1)]}
        assert recall_at_k(predictions, ground_truth, 1) == RecallResult(1, 1, 3)
        assert recall_at_k(predictions, ground_truth, 3).recall == pytest.approx(2 / 3)

    def test_matches_oracle(self):
        rng = np.random.default_rng(2024)
        for _ in range(1000):
            predictions, ground_truth = random_instance(rng)
            k = int(rng.integers(1, 8))
            assert recall_at_k(predictions, ground_truth, k) == \
                oracle_recall(predictions, ground_truth, k)

    @given(
        st.dictionaries(TRIPLETS, st.sampled_from([0.1, 0.5, 0.9]), max_size=12),
        st.lists(TRIPLETS, max_size=5),
        st.integers(1, 8),
    )
    @settings(max_examples=200, deadline=None)
    def test_matches_oracle_property(self, scored, facts, k):
        predictions = [pred("a", s, p, o, score) for (s, p, o), score in scored.items()]
        ground_truth = {"a": facts, "b": facts[:1]}
        assert recall_at_k(predictions, ground_truth, k) == oracle_recall(predictions, ground_truth, k)

    @given(
        st.dictionaries(TRIPLETS, st.sampled_from([0.1, 0.5, 0.9]), max_size=12),
        st.lists(TRIPLETS, max_size=5),
        st.integers(1, 12),
    )
    @settings(max_examples=100, deadline=None)
    def test_monotone_in_k(self, scored, facts, k):
        predictions = [pred("a", s, p, o, score) for (s, p, o), score in scored.items()]
        ground_truth = {"a": facts}
        assert recall_at_k(predictions, ground_truth, k).recalled <= \
            recall_at_k(predictions, ground_truth, k + 1).recalled

    @given(
        st.dictionaries(TRIPLETS, st.sampled_from([0.1, 0.5, 0.9]), min_size=1, max_size=12),
        st.lists(TRIPLETS, max_size=5),
        st.data(),
    )
    @settings(max_examples=100, deadline=None)
    def test_prediction_below_top_k_changes_nothing(self, scored, facts, data):
        predictions = [pred("a", s, p, o, score) for (s, p, o), score in scored.items()]
        k = data.draw(st.integers(1, len(predictions)))
        extra = data.draw(TRIPLETS.filter(lambda t: t not in scored))
        ground_truth = {"a": facts + [extra]}
        before = recall_at_k(predictions, ground_truth, k)
        after = recall_at_k(predictions + [pred("a", *extra, 0.01)], ground_truth, k)
        assert after == before

    def test_fewer_pairs_than_k(self):
        rng = np.random.default_rng(5)
        predictions, ground_truth = random_instance(rng)
        curve = recall_curve(predictions, ground_truth, (50, 100))
        assert curve[50].recalled == curve[100].recalled

    def test_empty_ground_truth(self):
        assert recall_at_k([], {"a": []}, 50).recall == 0.0

    @pytest.mark.parametrize("recall", [recall_at_k, oracle_recall])
    def test_rejects_bad_input(self, recall):
        with pytest.raises(EvaluationError, match="positive"):
            recall([], {}, 0)
        with pytest.raises(EvaluationError, match="non-finite"):
            recall([pred("a", 0, "on", 1, float("nan"))], {}, 5)
        with pytest.raises(EvaluationError, match="duplicate"):
            recall([pred("a", 0, "on", 1, 0.5), pred("a", 0, "on", 1, 0.4)], {}, 5)

    def test_per_predicate(self):
        predictions = [pred("a", 0, "on", 1, 0.9), pred("a", 1, "under", 0, 0.8)]
        ground_truth = {"a": [(0, "on", 1), (1, "above", 0)]}
        assert per_predicate_recall(predictions, ground_truth, 5) == {"above": 0.0, "on": 1.0}
        assert per_predicate_recall(predictions, ground_truth, 5, ["on", "under"]) == {"on": 1.0}


class TestAccuracy:
    def test_breakdown(self):
        outcomes = [("on", True, True), ("on", False, True), ("above", False, False),
                    ("zzz", True, False)]
        result = accuracy_breakdown(outcomes, ["above", "on"])
        assert result.overall == pytest.approx(0.5)
        assert list(result.per_predicate) == ["above", "on", "zzz"]
        assert result.per_predicate["on"] == 0.5
        assert result.counts == {"above": 1, "on": 2, "zzz": 1}

    def test_empty(self):
        assert accuracy_breakdown([], ["on"]).overall == 0.0


class TestMaskIoU:
    def test_values(self):
        target = np.zeros((4, 4))
        target[:2] = 1
        assert mask_iou(target, target) == 1.0
        assert mask_iou(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0
        soft = np.zeros((4, 4))
        soft[:1] = 0.7
        assert mask_iou(soft, target) == pytest.approx(0.5)
        assert mask_iou(np.full((4, 4), 0.4), target) == 0.0


class TestEvaluate:
    def test_doublet_report(self, vrd):
        model = make_model(vrd)
        report = evaluate(model, vrd, split="test", ks=(50, 100))
        test = vrd.split("test")
        assert report.n_images == len(test)
        assert report.n_gt == sum(len(r.ground_truth()) for r in test)
        # at most 5 objects, so never more than 20 ranked pairs per image
        assert report.recall[50].recalled == report.recall[100].recalled
        data = report.to_dict()
        assert {"mode", "n_images", "n_gt", "recall@50", "recall@100", "per_predicate"} <= set(data)
        assert "overall_acc" not in data

    def test_threads_do_not_change_results(self, vrd):
        model = make_model(vrd)
        one = evaluate(model, vrd, split="train", ks=(1, 5), threads=1)
        four = evaluate(model, vrd, split="train", ks=(1, 5), threads=4)
        assert one.to_dict() == four.to_dict()

    def test_rank_image(self, vrd):
        model = make_model(vrd)
        record = vrd.records[0]
        ranked = rank_image(model, record)
        n = len(record.objects)
        assert len(ranked) == n * (n - 1)
        assert all(p.predicate != NO_RELATIONSHIP for p in ranked)
        assert [p.score for p in ranked] == sorted((p.score for p in ranked), reverse=True)
        assert rank_image(model, record) == ranked

    def test_binary_report(self, binary):
        model = make_model(binary)
        report = evaluate(model, binary, split="test")
        assert report.n_gt == sum(len(r.relations) for r in binary.split("test"))
        assert 0.0 <= report.accuracy.overall <= 1.0
        assert report.recall == {}
        assert "overall_acc" in report.to_dict()

    def test_mode_checks(self, vrd, binary):
        with pytest.raises(EvaluationError, match="does not match"):
            evaluate(make_model(vrd), binary)
        with pytest.raises(EvaluationError, match="doublet"):
            rank_image(make_model(binary), binary.records[0])
        with pytest.raises(EvaluationError, match="triplet"):
            binary_accuracy(make_model(vrd), vrd.records)

    def test_bad_k(self, vrd):
        with pytest.raises(EvaluationError, match="positive"):
            evaluate(make_model(vrd), vrd, ks=(0,))

    def test_mask_iou(self, vrd):
        report = evaluate(make_model(vrd), vrd, split="test", with_mask_iou=True)
        assert 0.0 <= report.mask_iou <= 1.0
        with pytest.raises(EvaluationError, match="mask attention"):
            mean_mask_iou(make_model(vrd, mask_attention=False), vrd, vrd.records)


class TestMetricsReport:
    def test_appends_one_line_per_run(self, tmp_path):
        path = tmp_path / "out" / "metrics.jsonl"
        report = EvaluationReport(mode="doublet-vrd", n_images=2, n_gt=3,
                                  recall={50: RecallResult(50, 2, 3)})
        write_metrics_report(path, report)
        write_metrics_report(path, {"mode": "triplet-binary", "overall_acc": 0.5})
        lines = path.read_text().splitlines()
        assert len(lines) == 2
        first = json.loads(lines[0])
        assert first["recall@50"] == pytest.approx(2 / 3)
        assert first["n_gt"] == 3
        assert json.loads(lines[1])["overall_acc"] == 0.5
