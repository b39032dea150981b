"""Tests for the vocabulary and the three-segment input layout."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relation_engine.backbone import BoundingBox, union_box
from relation_engine.dataset import (
    DEFAULT_CLASSES,
    DatasetManifest,
    DatasetMode,
    ObjectInstance,
    RelationInstance,
)
from relation_engine.errors import SequenceLayoutError, VocabularyError
from relation_engine.predicates import SPATIAL_PREDICATES
from relation_engine.sequence import (
    CLS_ID,
    IMG_ID,
    MASK_ID,
    SEP_ID,
    SPECIAL_TOKENS,
    EmbeddingTables,
    Segment,
    SlotTag,
    TermRole,
    Vocabulary,
    assign_visual_features,
    build_sequence,
    build_vocabulary,
    embed_sequence,
    tokenize_term,
)
from relation_engine.tensor import Tensor, precision


def full_vocab():
    vocab = Vocabulary()
    for label in [*DEFAULT_CLASSES, *SPATIAL_PREDICATES]:
        tokenize_term(label, vocab, grow=True)
    return vocab


def make_instance(subject="person", obj="table", predicate=None):
    s = ObjectInstance(0, subject, BoundingBox(10, 10, 30, 40), 0.3)
    o = ObjectInstance(1, obj, BoundingBox(20, 35, 60, 60), 0.6)
    return RelationInstance("img00000", s, o, predicate, 0)


class TestVocabulary:
    def test_special_tokens_first(self):
        vocab = Vocabulary(["cup"])
        assert vocab.words[:5] == list(SPECIAL_TOKENS)
        assert (vocab.id("[MASK]"), vocab.id("cup")) == (MASK_ID, 5)

    def test_add_is_idempotent(self):
        vocab = Vocabulary()
        assert vocab.add("cup") == vocab.add("cup")
        assert len(vocab) == 6

    def test_unknown_word(self):
        with pytest.raises(VocabularyError, match="unknown word 'zebra'"):
            Vocabulary().id("zebra")

    def test_save_load(self, tmp_path):
        vocab = full_vocab()
        vocab.save(tmp_path / "vocab.txt")
        assert Vocabulary.load(tmp_path / "vocab.txt") == vocab
        assert (tmp_path / "vocab.txt").read_text().splitlines()[0] == "[PAD]\t0"

    def test_load_rejects_gaps(self, tmp_path):
        path = tmp_path / "vocab.txt"
        path.write_text("[PAD]\t0\n[CLS]\t2\n")
        with pytest.raises(VocabularyError, match="expected"):
            Vocabulary.load(path)

    def test_tokenize(self):
        vocab = full_vocab()
        ids = tokenize_term("Traffic Light", vocab)
        assert [vocab.word(i) for i in ids] == ["traffic", "light"]

    def test_tokenize_empty(self):
        with pytest.raises(VocabularyError, match="empty"):
            tokenize_term("   ", Vocabulary(), grow=True)

    def test_build_vocabulary_skips_no_relationship(self):
        mode = DatasetMode.DOUBLET_VRD
        manifest = DatasetManifest(mode, mode.default_predicates(), list(DEFAULT_CLASSES), [])
        vocab = build_vocabulary(manifest)
        assert "no" not in vocab
        assert "relationship" not in vocab
        assert "mug" in vocab and "left" in vocab


class TestBuildSequence:
    def test_doublet_layout(self):
        vocab = full_vocab()
        seq = build_sequence(make_instance(), vocab, DatasetMode.DOUBLET_VRD)
        seq.validate()
        p, t = vocab.id("person"), vocab.id("table")
        assert seq.token_ids == [CLS_ID, p, t, SEP_ID, MASK_ID, SEP_ID, IMG_ID, IMG_ID, SEP_ID]
        assert (seq.n_linguistic, seq.n_answer, seq.n_visual) == (4, 2, 3)
        assert seq.mask_index == 4
        assert not seq.is_triplet
        assert seq.slots[6:8] == [SlotTag.SUBJECT_ROI, SlotTag.OBJECT_ROI]

    def test_triplet_layout(self):
        vocab = full_vocab()
        instance = make_instance("coffee mug", "table", "to the left of")
        seq = build_sequence(instance, vocab, DatasetMode.TRIPLET_BINARY)
        seq.validate()
        # [CLS] coffee mug to the left of table [SEP]
        assert seq.n_linguistic == 1 + 2 + 4 + 1 + 1
        assert seq.n_visual == 4
        assert seq.is_triplet
        span = seq.span(TermRole.PREDICATE)
        assert span.box == union_box(instance.subject.box, instance.object.box)
        assert seq.token_ids[span.start:span.stop] == span.word_ids
        assert seq.slots[span.start:span.stop] == [SlotTag.PREDICATE_TERM] * 4

    def test_triplet_needs_predicate(self):
        with pytest.raises(SequenceLayoutError, match="needs a predicate"):
            build_sequence(make_instance(), full_vocab(), True)

    def test_unknown_class(self):
        with pytest.raises(VocabularyError, match="giraffe"):
            build_sequence(make_instance(subject="giraffe"), full_vocab(), False)

    def test_layout_over_random_instances(self):
        vocab = full_vocab()
        rng = np.random.default_rng(0)
        classes = list(DEFAULT_CLASSES)
        for _ in range(1000):
            triplet = bool(rng.integers(2))
            predicate = str(rng.choice(SPATIAL_PREDICATES)) if triplet else None
            instance = make_instance(str(rng.choice(classes)), str(rng.choice(classes)),
                                     predicate)
            seq = build_sequence(instance, vocab, triplet)
            seq.validate()
            assert seq.token_ids.count(MASK_ID) == 1
            assert seq.mask_index == seq.n_linguistic
            assert seq.segment_ids == sorted(seq.segment_ids)
            assert seq.segment_ids[seq.mask_index] == Segment.ANSWER
            assert seq.positions == list(range(len(seq)))
            assert seq.n_visual == (4 if triplet else 3)

    def test_validate_catches_broken_layout(self):
        seq = build_sequence(make_instance(), full_vocab(), False)
        seq.token_ids[-1] = IMG_ID
        with pytest.raises(SequenceLayoutError, match="visual segment"):
            seq.validate()

    def test_missing_span(self):
        seq = build_sequence(make_instance(), full_vocab(), False)
        with pytest.raises(SequenceLayoutError, match="no predicate term"):
            seq.span(TermRole.PREDICATE)


class TestEmbedding:
    def setup_method(self):
        self.vocab = full_vocab()
        self.d = 8
        self.tables = EmbeddingTables(len(self.vocab), self.d, 16, np.random.default_rng(0))
        self.seq = build_sequence(make_instance(predicate="on"), self.vocab, True)
        self.z0 = Tensor(np.zeros(self.d))
        self.rois = {tag: Tensor(np.full(self.d, float(i + 1)))
                     for i, tag in enumerate((SlotTag.SUBJECT_ROI, SlotTag.UNION_ROI,
                                              SlotTag.OBJECT_ROI))}

    def test_visual_assignment_without_mask_attention(self):
        visuals = assign_visual_features(self.seq, self.z0, self.rois).numpy()
        assert visuals.shape == (len(self.seq), self.d)
        img = [i for i, t in enumerate(self.seq.token_ids) if t == IMG_ID]
        np.testing.assert_array_equal(visuals[img, 0], [1.0, 2.0, 3.0])
        np.testing.assert_array_equal(visuals[0], np.zeros(self.d))

    def test_visual_assignment_with_term_features(self):
        terms = {role: Tensor(np.full(self.d, 10.0 + k)) for k, role in enumerate(TermRole)}
        visuals = assign_visual_features(self.seq, self.z0, self.rois, terms).numpy()
        span = self.seq.span(TermRole.OBJECT)
        np.testing.assert_array_equal(visuals[span.start], np.full(self.d, 12.0))

    def test_missing_term_feature(self):
        terms = {TermRole.SUBJECT: Tensor(np.ones(self.d))}
        with pytest.raises(SequenceLayoutError, match="predicate term"):
            assign_visual_features(self.seq, self.z0, self.rois, terms)

    def test_embedding_is_a_sum(self):
        visuals = assign_visual_features(self.seq, self.z0, self.rois)
        x = embed_sequence(self.seq, self.tables, visuals).numpy()
        t = self.tables
        i = 2
        expected = (t.token.weight.numpy()[self.seq.token_ids[i]] + visuals.numpy()[i]
                    + t.segment.weight.numpy()[self.seq.segment_ids[i]]
                    + t.position.weight.numpy()[i])
        np.testing.assert_allclose(x[i], expected, rtol=1e-6)

    @settings(max_examples=30, deadline=None)
    @given(st.sampled_from(["token", "segment", "position"]), st.integers(0, 2**32 - 1),
           st.floats(-3, 3), st.floats(-3, 3))
    def test_linear_in_each_table(self, table, seed, a, b):
        rng = np.random.default_rng(seed)
        with precision(np.float64):
            tables = EmbeddingTables(len(self.vocab), self.d, 16, rng)
            for name in ("token", "segment", "position"):
                getattr(tables, name).weight.data = np.zeros_like(
                    getattr(tables, name).weight.data, dtype=np.float64)
            weight = getattr(tables, table).weight
            w1 = rng.standard_normal(weight.shape)
            w2 = rng.standard_normal(weight.shape)
            visuals = Tensor(np.zeros((len(self.seq), self.d)))

            def embed(w):
                weight.data = w
                return embed_sequence(self.seq, tables, visuals).numpy()

            combined = embed(a * w1 + b * w2)
            np.testing.assert_allclose(combined, a * embed(w1) + b * embed(w2), atol=1e-6)

    def test_superposition_with_visuals(self):
        rng = np.random.default_rng(3)
        with precision(np.float64):
            first = EmbeddingTables(len(self.vocab), self.d, 16, rng)
            second = EmbeddingTables(len(self.vocab), self.d, 16, rng)
            both = EmbeddingTables(len(self.vocab), self.d, 16, rng)
            for name in ("token", "segment", "position"):
                getattr(both, name).weight.data = (getattr(first, name).weight.data
                                                   + getattr(second, name).weight.data)
            v1 = rng.standard_normal((len(self.seq), self.d))
            v2 = rng.standard_normal((len(self.seq), self.d))
            x1 = embed_sequence(self.seq, first, Tensor(v1)).numpy()
            x2 = embed_sequence(self.seq, second, Tensor(v2)).numpy()
            x12 = embed_sequence(self.seq, both, Tensor(v1 + v2)).numpy()
        np.testing.assert_allclose(x12, x1 + x2, atol=1e-6)

    def test_sequence_longer_than_position_table(self):
        tables = EmbeddingTables(len(self.vocab), self.d, 4, np.random.default_rng(0))
        visuals = assign_visual_features(self.seq, self.z0, self.rois)
        with pytest.raises(SequenceLayoutError, match="exceeds"):
            embed_sequence(self.seq, tables, visuals)
