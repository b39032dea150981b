"""Exception hierarchy shared across relation_engine modules."""

from __future__ import annotations

from typing import Optional


class RelationEngineError(Exception):
    """Base class for every error raised on purpose by relation_engine."""


class ShapeError(RelationEngineError, ValueError):
    """Operand shapes do not conform for an operation."""

    def __init__(self, op: str, a_shape, b_shape=None, axis=None, detail: str = ""):
        self.op = op
        self.a_shape = tuple(a_shape) if a_shape is not None else None
        self.b_shape = tuple(b_shape) if b_shape is not None else None
        self.axis = axis
        msg = f"{op}: incompatible shapes {self.a_shape} and {self.b_shape} (axis={axis})"
        if detail:
            msg = f"{msg}: {detail}"
        super().__init__(msg)


class GradientError(RelationEngineError, ArithmeticError):
    """Backward pass or gradient check cannot proceed."""


class VocabularyError(RelationEngineError, KeyError):
    """Unknown word at inference time, or an unusable label."""

    def __str__(self) -> str:
        # KeyError quotes its argument; keep the plain message
        return str(self.args[0]) if self.args else ""


class SequenceLayoutError(RelationEngineError, ValueError):
    """Input sequence cannot be built or does not follow the segment layout."""


class BoxError(RelationEngineError, ValueError):
    """Bounding box is degenerate, out of bounds or not normalized."""


class ConfigError(RelationEngineError, ValueError):
    """Configuration file or flag values are invalid."""


class EvaluationError(RelationEngineError, ValueError):
    """Evaluation inputs violate the protocol (K, uniqueness, labels, mode)."""


class DatasetError(RelationEngineError, ValueError):
    """Dataset file or generated record failed validation."""

    def __init__(self, message: str, record_id: Optional[str] = None):
        self.record_id = record_id
        if record_id is not None:
            message = f"record {record_id}: {message}"
        super().__init__(message)


class UnknownLabelError(DatasetError):
    """Object class or predicate not declared in the manifest."""


class MalformedBoxError(DatasetError):
    """Box does not have four coordinates or violates 0 <= x0 < x1 <= w."""


class DanglingIndexError(DatasetError):
    """Relation refers to an object index that does not exist."""


class SelfRelationError(DatasetError):
    """Relation uses the same object as subject and object."""


class UnsatisfiableConfigError(DatasetError):
    """Generator cannot place the requested objects on the canvas."""


class CheckpointError(RelationEngineError):
    """Checkpoint cannot be written, read or applied."""


class CheckpointVersionError(CheckpointError):
    """Manifest format version is not supported."""


class CheckpointShapeError(CheckpointError):
    """Stored parameter shape differs from the model's."""


class TruncatedPayloadError(CheckpointError):
    """Binary payload is shorter than the manifest promises."""


class MissingParameterError(CheckpointError):
    """Model and checkpoint disagree on parameter names."""
