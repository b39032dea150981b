"""Geometric predicate rules: which spatial relation holds between two objects.

Each rule looks at the subject box `a`, the object box `b` and their
synthetic depths (larger = farther from the viewer). Pixel coordinates,
y pointing down. The rules are mutually exclusive, so at most one
predicate holds for an ordered pair.

    hov(a, b) = horizontal overlap / min(width a, width b)
    vov(a, b) = vertical overlap / min(height a, height b)

Usage:
    book = PredicateRuleBook.with_defaults()
    book.assign(cup, table)                      # -> "on" or None
    book.holds("above", cup, table)
    book.assign(cup, table, VRD_PREDICATES)      # restrict to a subset
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, Iterable, Optional

from relation_engine.backbone import BoundingBox

if TYPE_CHECKING:
    from relation_engine.dataset import ImageRecord, ObjectInstance, RelationshipAnnotation

RULE_VERSION = 1

NO_RELATIONSHIP = "no relationship"

# Fixed column order for per-predicate reports.
SPATIAL_PREDICATES = (
    "above", "behind", "in", "in front of", "next to",
    "on", "to the left of", "to the right of", "under",
)
VRD_PREDICATES = ("above", "under", "on", "to the left of", "to the right of", "in")

MIN_OVERLAP = 0.3
TOUCH_GAP = 2.0
NEAR_GAP = 16.0
DEPTH_MARGIN = 0.2


def _hov(a: BoundingBox, b: BoundingBox) -> float:
    overlap = max(min(a.x1, b.x1) - max(a.x0, b.x0), 0.0)
    return overlap / min(a.width, b.width)


def _vov(a: BoundingBox, b: BoundingBox) -> float:
    overlap = max(min(a.y1, b.y1) - max(a.y0, b.y0), 0.0)
    return overlap / min(a.height, b.height)


def _gaps(a: BoundingBox, b: BoundingBox) -> tuple[float, float]:
    horizontal = max(b.x0 - a.x1, a.x0 - b.x1, 0.0)
    vertical = max(b.y0 - a.y1, a.y0 - b.y1, 0.0)
    return horizontal, vertical


def _partial_overlap(a: BoundingBox, b: BoundingBox) -> bool:
    return a.intersection_area(b) > 0 and not a.contains(b) and not b.contains(a)


def _in(a: ObjectInstance, b: ObjectInstance) -> bool:
    return b.box.contains(a.box) and a.box.area < b.box.area


def _behind(a: ObjectInstance, b: ObjectInstance) -> bool:
    return _partial_overlap(a.box, b.box) and a.depth - b.depth > DEPTH_MARGIN


def _in_front_of(a: ObjectInstance, b: ObjectInstance) -> bool:
    return _partial_overlap(a.box, b.box) and b.depth - a.depth > DEPTH_MARGIN


def _on(a: ObjectInstance, b: ObjectInstance) -> bool:
    gap = b.box.y0 - a.box.y1
    return 0 <= gap <= TOUCH_GAP and _hov(a.box, b.box) >= MIN_OVERLAP


def _above(a: ObjectInstance, b: ObjectInstance) -> bool:
    return b.box.y0 - a.box.y1 > TOUCH_GAP and _hov(a.box, b.box) >= MIN_OVERLAP


def _under(a: ObjectInstance, b: ObjectInstance) -> bool:
    return a.box.y0 - b.box.y1 >= 0 and _hov(a.box, b.box) >= MIN_OVERLAP


def _left_of(a: ObjectInstance, b: ObjectInstance) -> bool:
    return b.box.x0 - a.box.x1 > 0 and _vov(a.box, b.box) >= MIN_OVERLAP


def _right_of(a: ObjectInstance, b: ObjectInstance) -> bool:
    return a.box.x0 - b.box.x1 > 0 and _vov(a.box, b.box) >= MIN_OVERLAP


_DIRECTIONAL = (_on, _above, _under, _left_of, _right_of)


def _next_to(a: ObjectInstance, b: ObjectInstance) -> bool:
    if a.box.intersection_area(b.box) > 0:
        return False
    if any(rule(a, b) for rule in _DIRECTIONAL):
        return False
    return max(_gaps(a.box, b.box)) <= NEAR_GAP


@dataclass(frozen=True)
class PredicateRule:
    """A named geometric test on an ordered (subject, object) pair."""
    name: str
    test: Callable[[ObjectInstance, ObjectInstance], bool]
    description: str = ""

    def holds(self, a: ObjectInstance, b: ObjectInstance) -> bool:
        return bool(self.test(a, b))


class PredicateRuleBook:
    """Ordered registry of predicate rules."""

    def __init__(self):
        self._rules: dict[str, PredicateRule] = {}

    def register(self, rule: PredicateRule) -> None:
        self._rules[rule.name] = rule

    def rule(self, name: str) -> PredicateRule:
        try:
            return self._rules[name]
        except KeyError:
            raise KeyError(f"no rule for predicate {name!r}") from None

    def holds(self, predicate: str, a: ObjectInstance, b: ObjectInstance) -> bool:
        return self.rule(predicate).holds(a, b)

    def assign(self, a: ObjectInstance, b: ObjectInstance,
               predicates: Optional[Iterable[str]] = None) -> Optional[str]:
        """The single predicate holding for (a, b), restricted to `predicates`."""
        names = self.names if predicates is None else list(predicates)
        for name in names:
            if self.holds(name, a, b):
                return name
        return None

    @property
    def names(self) -> list[str]:
        return list(self._rules)

    def __len__(self) -> int:
        return len(self._rules)

    def __iter__(self):
        return iter(self._rules.values())

    def __contains__(self, name: str) -> bool:
        return name in self._rules

    @classmethod
    def with_defaults(cls) -> PredicateRuleBook:
        book = cls()
        book.register(PredicateRule("above", _above, "vertical gap > 2 px, hov >= 0.3"))
        book.register(PredicateRule("behind", _behind, "partial overlap, farther by > 0.2"))
        book.register(PredicateRule("in", _in, "inside and strictly smaller"))
        book.register(PredicateRule("in front of", _in_front_of,
                                    "partial overlap, nearer by > 0.2"))
        book.register(PredicateRule("next to", _next_to,
                                    "disjoint, no directional relation, gap <= 16 px"))
        book.register(PredicateRule("on", _on, "touching from above (gap 0..2 px), hov >= 0.3"))
        book.register(PredicateRule("to the left of", _left_of, "horizontal gap > 0, vov >= 0.3"))
        book.register(PredicateRule("to the right of", _right_of,
                                    "horizontal gap > 0, vov >= 0.3"))
        book.register(PredicateRule("under", _under, "below with gap >= 0, hov >= 0.3"))
        return book


def recheck_relation(record: ImageRecord, relation: RelationshipAnnotation,
                     predicates: Iterable[str] = SPATIAL_PREDICATES,
                     book: Optional[PredicateRuleBook] = None) -> bool:
    """Re-derive an annotated fact from the record's raw coordinates.

    A true fact must be the one predicate that holds among `predicates`; a
    false fact (truth=False) must not hold.
    """
    book = book or PredicateRuleBook.with_defaults()
    a = record.objects[relation.subject]
    b = record.objects[relation.object]
    assigned = book.assign(a, b, predicates)
    if relation.truth is False:
        return assigned != relation.predicate
    return assigned == relation.predicate
