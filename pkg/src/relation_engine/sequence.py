"""Input sequences: vocabulary, segment layout and embedding assembly.

Every instance becomes one sequence of three segments:

    A  [CLS] subject words (predicate words) object words [SEP]
    B  [MASK] [SEP]
    C  [IMG] subject ([IMG] union) [IMG] object [SEP]

Element i is embedded as token + visual + segment + position. Position
indices run globally over the whole sequence.

Usage:
    vocab = build_vocabulary(manifest)
    seq = build_sequence(instance, vocab, DatasetMode.TRIPLET_BINARY)
    visuals = assign_visual_features(seq, z0, rois, term_features)
    x = embed_sequence(seq, tables, visuals)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum, IntEnum
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Optional

import numpy as np

from relation_engine import ops
from relation_engine.backbone import BoundingBox, union_box
from relation_engine.errors import SequenceLayoutError, VocabularyError
from relation_engine.nn import Embedding, Module
from relation_engine.predicates import NO_RELATIONSHIP
from relation_engine.tensor import Tensor

if TYPE_CHECKING:
    from relation_engine.dataset import DatasetManifest, DatasetMode, RelationInstance

logger = logging.getLogger("relation_engine.sequence")

SPECIAL_TOKENS = ("[PAD]", "[CLS]", "[SEP]", "[MASK]", "[IMG]")
PAD_ID, CLS_ID, SEP_ID, MASK_ID, IMG_ID = range(len(SPECIAL_TOKENS))
NUM_SEGMENTS = 3


class Vocabulary:
    """Dense word -> id table; ids 0-4 are the special tokens."""

    def __init__(self, words: Iterable[str] = ()):
        self._words: list[str] = list(SPECIAL_TOKENS)
        self._ids: dict[str, int] = {w: i for i, w in enumerate(self._words)}
        for word in words:
            self.add(word)

    def add(self, word: str) -> int:
        if word in self._ids:
            return self._ids[word]
        self._ids[word] = len(self._words)
        self._words.append(word)
        return self._ids[word]

    def id(self, word: str) -> int:
        try:
            return self._ids[word]
        except KeyError:
            raise VocabularyError(f"unknown word {word!r}") from None

    def word(self, index: int) -> str:
        return self._words[index]

    @property
    def words(self) -> list[str]:
        return list(self._words)

    def __len__(self) -> int:
        return len(self._words)

    def __contains__(self, word: str) -> bool:
        return word in self._ids

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._words == other._words

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for i, word in enumerate(self._words):
                f.write(f"{word}\t{i}\n")

    @classmethod
    def load(cls, path: str | Path) -> Vocabulary:
        words = []
        with open(path, encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                word, _, raw_id = line.rpartition("\t")
                if not word or not raw_id.isdigit() or int(raw_id) != len(words):
                    raise VocabularyError(f"{path}:{line_no}: expected 'word<TAB>{len(words)}'")
                words.append(word)
        if tuple(words[:len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise VocabularyError(f"{path}: special tokens must come first")
        return cls(words[len(SPECIAL_TOKENS):])


def tokenize_term(label: str, vocab: Vocabulary, grow: bool = False) -> list[int]:
    """Lowercased whitespace split; `grow` adds unseen words instead of failing."""
    words = label.lower().split()
    if not words:
        raise VocabularyError(f"cannot tokenize empty label {label!r}")
    if grow:
        return [vocab.add(w) for w in words]
    return [vocab.id(w) for w in words]


def build_vocabulary(manifest: DatasetManifest) -> Vocabulary:
    vocab = Vocabulary()
    for label in [*manifest.classes, *manifest.predicates]:
        if label != NO_RELATIONSHIP:
            tokenize_term(label, vocab, grow=True)
    logger.debug("Vocabulary: %d entries", len(vocab))
    return vocab


class Segment(IntEnum):
    LINGUISTIC = 0
    ANSWER = 1
    VISUAL = 2


class TermRole(Enum):
    SUBJECT = "subject"
    PREDICATE = "predicate"
    OBJECT = "object"


class SlotTag(Enum):
    """Which visual feature an element receives."""
    WHOLE_IMAGE = "z0"
    SUBJECT_TERM = "subject"
    PREDICATE_TERM = "predicate"
    OBJECT_TERM = "object"
    SUBJECT_ROI = "subject_roi"
    UNION_ROI = "union_roi"
    OBJECT_ROI = "object_roi"

    @classmethod
    def for_term(cls, role: TermRole) -> SlotTag:
        return cls(role.value)


@dataclass
class TermSpan:
    role: TermRole
    word_ids: list[int]
    box: BoundingBox
    start: int  # index of the first word element

    @property
    def stop(self) -> int:
        return self.start + len(self.word_ids)


@dataclass
class InputSequence:
    token_ids: list[int]
    segment_ids: list[int]
    positions: list[int]
    slots: list[SlotTag]
    n_linguistic: int
    n_answer: int
    n_visual: int
    spans: list[TermSpan]

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def mask_index(self) -> int:
        indices = [i for i, t in enumerate(self.token_ids) if t == MASK_ID]
        if len(indices) != 1:
            raise SequenceLayoutError(f"expected exactly one [MASK], found {len(indices)}")
        return indices[0]

    @property
    def is_triplet(self) -> bool:
        return any(s.role is TermRole.PREDICATE for s in self.spans)

    def span(self, role: TermRole) -> TermSpan:
        for s in self.spans:
            if s.role is role:
                return s
        raise SequenceLayoutError(f"sequence has no {role.value} term")

    def validate(self) -> None:
        """Check the three-segment layout; raise SequenceLayoutError if broken."""
        n = len(self.token_ids)
        if not (len(self.segment_ids) == len(self.positions) == len(self.slots) == n):
            raise SequenceLayoutError("per-element lists differ in length")
        if self.n_linguistic + self.n_answer + self.n_visual != n:
            raise SequenceLayoutError("segment counts do not add up to the sequence length")
        a, b = self.n_linguistic, self.n_linguistic + self.n_answer
        expected_segments = [Segment.LINGUISTIC] * a + [Segment.ANSWER] * (b - a) + \
            [Segment.VISUAL] * (n - b)
        if self.segment_ids != [int(s) for s in expected_segments]:
            raise SequenceLayoutError("segment ids out of order")
        if self.token_ids[0] != CLS_ID or self.token_ids[a - 1] != SEP_ID:
            raise SequenceLayoutError("linguistic segment must be [CLS] ... [SEP]")
        if self.token_ids[a:b] != [MASK_ID, SEP_ID]:
            raise SequenceLayoutError("answer segment must be [MASK] [SEP]")
        if self.token_ids[-1] != SEP_ID or any(t != IMG_ID for t in self.token_ids[b:-1]):
            raise SequenceLayoutError("visual segment must be [IMG]... [SEP]")
        if self.mask_index != a:
            raise SequenceLayoutError("[MASK] must open the answer segment")
        if self.positions != list(range(n)):
            raise SequenceLayoutError("positions must be 0..T-1")
        for s in self.spans:
            if any(w < len(SPECIAL_TOKENS) for w in s.word_ids):
                raise SequenceLayoutError(f"{s.role.value} term contains a special token")


def build_sequence(instance: RelationInstance, vocab: Vocabulary,
                   mode: DatasetMode | bool) -> InputSequence:
    """Lay out one instance; `mode` is a DatasetMode or a triplet flag."""
    triplet = mode if isinstance(mode, bool) else mode.is_triplet
    if triplet and not instance.predicate:
        raise SequenceLayoutError(
            f"triplet sequence for image {instance.image_id} needs a predicate"
        )
    subject_box, object_box = instance.subject.box, instance.object.box
    terms = [(TermRole.SUBJECT, instance.subject.cls, subject_box)]
    if triplet:
        terms.append((TermRole.PREDICATE, instance.predicate, union_box(subject_box, object_box)))
    terms.append((TermRole.OBJECT, instance.object.cls, object_box))

    tokens = [CLS_ID]
    slots = [SlotTag.WHOLE_IMAGE]
    spans = []
    for role, label, box in terms:
        ids = tokenize_term(label, vocab)
        spans.append(TermSpan(role, ids, box, start=len(tokens)))
        tokens.extend(ids)
        slots.extend([SlotTag.for_term(role)] * len(ids))
    tokens.append(SEP_ID)
    slots.append(SlotTag.WHOLE_IMAGE)
    n_linguistic = len(tokens)

    tokens += [MASK_ID, SEP_ID]
    slots += [SlotTag.WHOLE_IMAGE, SlotTag.WHOLE_IMAGE]

    rois = [SlotTag.SUBJECT_ROI, SlotTag.UNION_ROI, SlotTag.OBJECT_ROI] if triplet \
        else [SlotTag.SUBJECT_ROI, SlotTag.OBJECT_ROI]
    tokens += [IMG_ID] * len(rois) + [SEP_ID]
    slots += rois + [SlotTag.WHOLE_IMAGE]
    n_visual = len(rois) + 1

    n = len(tokens)
    segments = [Segment.LINGUISTIC] * n_linguistic + [Segment.ANSWER] * 2 + \
        [Segment.VISUAL] * n_visual
    return InputSequence(
        token_ids=tokens,
        segment_ids=[int(s) for s in segments],
        positions=list(range(n)),
        slots=slots,
        n_linguistic=n_linguistic,
        n_answer=2,
        n_visual=n_visual,
        spans=spans,
    )


class EmbeddingTables(Module):
    """Token (|V| x d), segment (3 x d) and position (P_max x d) tables."""

    def __init__(self, vocab_size: int, d: int, p_max: int, rng: np.random.Generator):
        super().__init__()
        self.d = d
        self.p_max = p_max
        self.token = Embedding(vocab_size, d, rng)
        self.segment = Embedding(NUM_SEGMENTS, d, rng)
        self.position = Embedding(p_max, d, rng)


def assign_visual_features(seq: InputSequence, z0: Tensor, rois: dict[SlotTag, Tensor],
                           term_features: Optional[dict[TermRole, Tensor]] = None) -> Tensor:
    """Per-element visual vectors (T, d).

    Special elements get z0 and [IMG] elements their RoI feature. Word
    elements share their term's attention-guided feature; without
    `term_features` (mask attention off) they get z0 as well.
    """
    rows = []
    for tag in seq.slots:
        if tag is SlotTag.WHOLE_IMAGE:
            rows.append(z0)
        elif tag in (SlotTag.SUBJECT_ROI, SlotTag.UNION_ROI, SlotTag.OBJECT_ROI):
            if tag not in rois:
                raise SequenceLayoutError(f"no RoI feature for {tag.value}")
            rows.append(rois[tag])
        elif term_features is None:
            rows.append(z0)
        else:
            role = TermRole(tag.value)
            if role not in term_features:
                raise SequenceLayoutError(f"no attention-guided feature for the {role.value} term")
            rows.append(term_features[role])
    return ops.stack(rows)


def embed_sequence(seq: InputSequence, tables: EmbeddingTables, visuals: Tensor) -> Tensor:
    """x_i = token_i + visual_i + segment_i + position_i."""
    if max(seq.positions) >= tables.p_max:
        raise SequenceLayoutError(
            f"sequence of length {len(seq)} exceeds the position table ({tables.p_max})"
        )
    if visuals.shape != (len(seq), tables.d):
        raise SequenceLayoutError(
            f"visual features {visuals.shape} do not match ({len(seq)}, {tables.d})"
        )
    x = ops.add(tables.token(seq.token_ids), visuals)
    x = ops.add(x, tables.segment(seq.segment_ids))
    return ops.add(x, tables.position(seq.positions))
