"""Relationship datasets: schema, loader, synthetic generator, pair sampling.

On disk a dataset is a directory with two files:

    manifest.json   {version, mode, predicates, classes, seed, rule_version, splits}
    records.jsonl   one image per line:
                    {image_id, width, height,
                     objects: [{cls, box: [x0, y0, x1, y1], depth}],
                     relations: [{s, p, o, truth?}]}

Synthetic scenes are filled rectangles with a per-class color plus seeded
noise; predicates are assigned by `PredicateRuleBook`. Canvases are not
stored, they are re-rendered from the record and the manifest seed.

Usage:
    manifest = generate_synthetic(SyntheticConfig(images=100, seed=7), DatasetMode.DOUBLET_VRD)
    save_dataset(manifest, "data/vrd")
    manifest = load_dataset("data/vrd", DatasetMode.DOUBLET_VRD)
    pairs = sample_training_pairs(manifest.records[0], seed=3)
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from relation_engine.backbone import BoundingBox, ImageCanvas
from relation_engine.config import DataConfig, derive_seed
from relation_engine.errors import (
    DanglingIndexError,
    DatasetError,
    MalformedBoxError,
    SelfRelationError,
    UnknownLabelError,
    UnsatisfiableConfigError,
)
from relation_engine.predicates import (
    NO_RELATIONSHIP,
    RULE_VERSION,
    SPATIAL_PREDICATES,
    VRD_PREDICATES,
    PredicateRuleBook,
)

logger = logging.getLogger("relation_engine.dataset")

FORMAT_VERSION = 1
MANIFEST_FILE = "manifest.json"
RECORDS_FILE = "records.jsonl"

PAIRS_PER_IMAGE = 32
POSITIVES_PER_IMAGE = 8

BACKGROUND = 0.5
NOISE_SIGMA = 0.05

CLASS_PALETTE: dict[str, tuple[float, float, float]] = {
    "person": (0.90, 0.30, 0.30),
    "dog": (0.55, 0.35, 0.15),
    "cat": (0.95, 0.65, 0.20),
    "car": (0.20, 0.40, 0.90),
    "table": (0.40, 0.80, 0.40),
    "chair": (0.80, 0.30, 0.80),
    "window": (0.30, 0.85, 0.90),
    "traffic light": (0.95, 0.95, 0.25),
    "coffee mug": (0.10, 0.10, 0.10),
    "shoe": (0.95, 0.95, 0.95),
}
DEFAULT_CLASSES = tuple(CLASS_PALETTE)

_PLANT_ATTEMPTS = 30
_RANDOM_ATTEMPTS = 200
_IMAGE_ATTEMPTS = 20


class DatasetMode(Enum):
    DOUBLET_VRD = "doublet-vrd"
    TRIPLET_BINARY = "triplet-binary"

    @property
    def is_triplet(self) -> bool:
        return self is DatasetMode.TRIPLET_BINARY

    @property
    def short_name(self) -> str:
        return "binary" if self.is_triplet else "vrd"

    @classmethod
    def parse(cls, value: str | DatasetMode) -> DatasetMode:
        """Accept 'vrd' / 'binary' as well as the full mode names."""
        if isinstance(value, DatasetMode):
            return value
        aliases = {"vrd": cls.DOUBLET_VRD, "binary": cls.TRIPLET_BINARY}
        if value in aliases:
            return aliases[value]
        try:
            return cls(value)
        except ValueError:
            raise DatasetError(f"unknown dataset mode {value!r}") from None

    def default_predicates(self) -> list[str]:
        if self.is_triplet:
            return list(SPATIAL_PREDICATES)
        return [NO_RELATIONSHIP, *VRD_PREDICATES]


@dataclass
class ObjectInstance:
    index: int
    cls: str
    box: BoundingBox
    depth: float = 0.0

    def to_dict(self) -> dict:
        return {"cls": self.cls, "box": self.box.to_list(), "depth": self.depth}


@dataclass
class RelationshipAnnotation:
    subject: int
    predicate: str
    object: int
    truth: Optional[bool] = None

    def to_dict(self) -> dict:
        data = {"s": self.subject, "p": self.predicate, "o": self.object}
        if self.truth is not None:
            data["truth"] = self.truth
        return data


@dataclass
class ImageRecord:
    image_id: str
    width: int
    height: int
    objects: list[ObjectInstance]
    relations: list[RelationshipAnnotation] = field(default_factory=list)
    canvas: Optional[ImageCanvas] = field(default=None, compare=False, repr=False)

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "width": self.width,
            "height": self.height,
            "objects": [o.to_dict() for o in self.objects],
            "relations": [r.to_dict() for r in self.relations],
        }

    def ground_truth(self) -> list[tuple[int, str, int]]:
        """(s, p, o) facts; false facts of binary datasets are excluded."""
        return [(r.subject, r.predicate, r.object) for r in self.relations if r.truth is not False]


@dataclass
class RelationInstance:
    """One model input: an ordered object pair, optionally with a predicate."""
    image_id: str
    subject: ObjectInstance
    object: ObjectInstance
    predicate: Optional[str]  # shown to the model in triplet mode only
    target: int               # class index for the loss
    label: str = ""           # predicate the instance is about, for reports


@dataclass
class DatasetManifest:
    mode: DatasetMode
    predicates: list[str]
    classes: list[str]
    records: list[ImageRecord]
    splits: dict[str, list[str]] = field(default_factory=dict)
    seed: Optional[int] = None
    rule_version: int = RULE_VERSION

    def __post_init__(self):
        self._by_id = {r.image_id: r for r in self.records}

    def __eq__(self, other) -> bool:
        if not isinstance(other, DatasetManifest):
            return NotImplemented
        return self.header() == other.header() and self.records == other.records

    @property
    def num_classes(self) -> int:
        return 2 if self.mode.is_triplet else len(self.predicates)

    def record(self, image_id: str) -> ImageRecord:
        try:
            return self._by_id[image_id]
        except KeyError:
            raise DatasetError(f"unknown image id {image_id!r}") from None

    def split(self, name: str) -> list[ImageRecord]:
        """Records of a split, in dataset order; an absent split means all records."""
        if name not in self.splits:
            return list(self.records)
        wanted = set(self.splits[name])
        return [r for r in self.records if r.image_id in wanted]

    def predicate_index(self, predicate: str) -> int:
        try:
            return self.predicates.index(predicate)
        except ValueError:
            raise UnknownLabelError(f"unknown predicate {predicate!r}") from None

    def header(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "mode": self.mode.value,
            "predicates": list(self.predicates),
            "classes": list(self.classes),
            "seed": self.seed,
            "rule_version": self.rule_version,
            "splits": {k: list(v) for k, v in self.splits.items()},
        }


# ----------------------------------------------------------------------
# Loading and saving
# ----------------------------------------------------------------------

def save_dataset(manifest: DatasetManifest, path: str | Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / MANIFEST_FILE, "w", encoding="utf-8") as f:
        json.dump(manifest.header(), f, indent=2, sort_keys=True)
        f.write("\n")
    with open(path / RECORDS_FILE, "w", encoding="utf-8") as f:
        for record in manifest.records:
            f.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
    logger.info("Wrote %d records to %s", len(manifest.records), path)
    return path


def _parse_box(raw, width: int, height: int, rid: str, where: str) -> BoundingBox:
    if not isinstance(raw, (list, tuple)) or len(raw) != 4:
        raise MalformedBoxError(f"{where}: box must have four coordinates, got {raw!r}", rid)
    try:
        box = BoundingBox.from_list(raw)
    except (TypeError, ValueError):
        raise MalformedBoxError(f"{where}: box coordinates must be numbers, got {raw!r}", rid) from None
    if not (0 <= box.x0 < box.x1 <= width and 0 <= box.y0 < box.y1 <= height):
        raise MalformedBoxError(
            f"{where}: box {box.to_list()} violates 0 <= x0 < x1 <= w, 0 <= y0 < y1 <= h "
            f"for a {width}x{height} image", rid,
        )
    return box


def parse_record(data: dict, mode: DatasetMode, classes: Sequence[str],
                 predicates: Sequence[str], line: int = 0) -> ImageRecord:
    """Build and validate one record; every failure names the record id."""
    rid = str(data.get("image_id", f"line {line}"))
    for key in ("image_id", "width", "height", "objects", "relations"):
        if key not in data:
            raise DatasetError(f"missing key {key!r}", rid)
    width, height = int(data["width"]), int(data["height"])
    if width <= 0 or height <= 0:
        raise DatasetError(f"canvas size must be positive, got {width}x{height}", rid)

    known_classes = set(classes)
    objects = []
    for i, raw in enumerate(data["objects"]):
        cls = raw.get("cls")
        if cls not in known_classes:
            raise UnknownLabelError(f"object {i}: unknown class {cls!r}", rid)
        box = _parse_box(raw.get("box"), width, height, rid, f"object {i}")
        objects.append(ObjectInstance(i, cls, box, float(raw.get("depth", 0.0))))

    known_predicates = set(predicates) - {NO_RELATIONSHIP}
    relations = []
    for j, raw in enumerate(data["relations"]):
        try:
            s, p, o = int(raw["s"]), raw["p"], int(raw["o"])
        except (KeyError, TypeError, ValueError):
            raise DatasetError(f"relation {j}: needs integer 's', 'o' and a 'p' label", rid) from None
        for role, idx in (("subject", s), ("object", o)):
            if not 0 <= idx < len(objects):
                raise DanglingIndexError(
                    f"relation {j}: {role} index {idx} out of range for {len(objects)} objects", rid
                )
        if s == o:
            raise SelfRelationError(f"relation {j}: subject and object are both {s}", rid)
        if p not in known_predicates:
            raise UnknownLabelError(f"relation {j}: unknown predicate {p!r}", rid)
        truth = raw.get("truth")
        if mode.is_triplet and not isinstance(truth, bool):
            raise DatasetError(f"relation {j}: binary datasets need a boolean 'truth'", rid)
        if not mode.is_triplet and truth is not None:
            raise DatasetError(f"relation {j}: 'truth' is only valid in binary datasets", rid)
        relations.append(RelationshipAnnotation(s, p, o, truth))

    return ImageRecord(str(data["image_id"]), width, height, objects, relations)


def load_dataset(path: str | Path, mode: Optional[DatasetMode | str] = None,
                 render: bool = True) -> DatasetManifest:
    """Load and validate a dataset directory.

    Args:
        mode: Expected mode; a manifest of another mode is rejected.
        render: Attach a rendered canvas to every record.
    """
    path = Path(path)
    manifest_path = path / MANIFEST_FILE
    if not manifest_path.exists():
        raise DatasetError(f"no {MANIFEST_FILE} in {path}")
    with open(manifest_path, encoding="utf-8") as f:
        header = json.load(f)
    if header.get("version") != FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset version {header.get('version')!r}")

    file_mode = DatasetMode.parse(header["mode"])
    if mode is not None and DatasetMode.parse(mode) is not file_mode:
        raise DatasetError(
            f"dataset mode {file_mode.value} does not match requested {DatasetMode.parse(mode).value}"
        )
    predicates = list(header["predicates"])
    classes = list(header["classes"])
    if not file_mode.is_triplet and (not predicates or predicates[0] != NO_RELATIONSHIP):
        raise DatasetError(f"doublet datasets need {NO_RELATIONSHIP!r} as predicate 0")

    records = []
    seen: set[str] = set()
    with open(path / RECORDS_FILE, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"line {line_no}: invalid JSON ({e.msg})") from None
            record = parse_record(data, file_mode, classes, predicates, line_no)
            if record.image_id in seen:
                raise DatasetError("duplicate image id", record.image_id)
            seen.add(record.image_id)
            records.append(record)

    splits = {k: list(v) for k, v in header.get("splits", {}).items()}
    for name, ids in splits.items():
        missing = [i for i in ids if i not in seen]
        if missing:
            raise DatasetError(f"split {name!r} names unknown image ids {missing[:5]}")

    manifest = DatasetManifest(
        mode=file_mode,
        predicates=predicates,
        classes=classes,
        records=records,
        splits=splits,
        seed=header.get("seed"),
        rule_version=int(header.get("rule_version", RULE_VERSION)),
    )
    if render:
        attach_canvases(manifest)
    logger.info("Loaded %d records (%s) from %s", len(records), file_mode.value, path)
    return manifest


# ----------------------------------------------------------------------
# Rendering
# ----------------------------------------------------------------------

def class_color(name: str) -> np.ndarray:
    if name in CLASS_PALETTE:
        return np.array(CLASS_PALETTE[name])
    rng = np.random.default_rng(derive_seed(0, f"color:{name}"))
    return rng.uniform(0.1, 0.9, size=3)


def render_canvas(record: ImageRecord, seed: int = 0) -> ImageCanvas:
    """Paint objects farthest-first over a gray background, then add noise."""
    pixels = np.full((record.height, record.width, 3), BACKGROUND, dtype=np.float64)
    for obj in sorted(record.objects, key=lambda o: (-o.depth, o.index)):
        x0, y0 = int(np.floor(obj.box.x0)), int(np.floor(obj.box.y0))
        x1, y1 = int(np.ceil(obj.box.x1)), int(np.ceil(obj.box.y1))
        pixels[y0:y1, x0:x1] = class_color(obj.cls)
    rng = np.random.default_rng(derive_seed(seed, f"data:{record.image_id}"))
    pixels += rng.normal(0.0, NOISE_SIGMA, size=pixels.shape)
    return ImageCanvas(np.clip(pixels, 0.0, 1.0).astype(np.float32))


def attach_canvases(manifest: DatasetManifest) -> None:
    seed = manifest.seed or 0
    for record in manifest.records:
        if record.canvas is None:
            record.canvas = render_canvas(record, seed)


# ----------------------------------------------------------------------
# Synthetic generation
# ----------------------------------------------------------------------

@dataclass
class SyntheticConfig:
    images: int = 600
    min_objects: int = 2
    max_objects: int = 5
    width: int = 128
    height: int = 128
    min_side: int = 12
    max_side: int = 48
    train_fraction: float = 0.8
    seed: int = 0
    classes: tuple[str, ...] = DEFAULT_CLASSES

    @classmethod
    def from_data_config(cls, data: DataConfig, seed: int) -> SyntheticConfig:
        return cls(
            images=data.images,
            min_objects=data.min_objects,
            max_objects=data.max_objects,
            width=data.width,
            height=data.height,
            min_side=data.min_side,
            max_side=data.max_side,
            train_fraction=data.train_fraction,
            seed=seed,
        )


def _random_box(rng: np.random.Generator, cfg: SyntheticConfig) -> BoundingBox:
    w = int(rng.integers(cfg.min_side, cfg.max_side + 1))
    h = int(rng.integers(cfg.min_side, cfg.max_side + 1))
    x0 = int(rng.integers(0, cfg.width - w + 1))
    y0 = int(rng.integers(0, cfg.height - h + 1))
    return BoundingBox(x0, y0, x0 + w, y0 + h)


def _planted_box(rng: np.random.Generator, anchor: ObjectInstance, predicate: str,
                 cfg: SyntheticConfig) -> Optional[tuple[BoundingBox, float]]:
    """A subject box (and depth) meant to stand in `predicate` to `anchor`."""
    a = anchor.box
    aw, ah = int(a.width), int(a.height)
    w = int(rng.integers(cfg.min_side, cfg.max_side + 1))
    h = int(rng.integers(cfg.min_side, cfg.max_side + 1))
    depth = round(float(rng.uniform(0.0, 1.0)), 3)
    ax0, ay0, ax1, ay1 = int(a.x0), int(a.y0), int(a.x1), int(a.y1)

    def along_x() -> int:
        return int(rng.integers(ax0 - w // 2, ax1 - w // 2 + 1))

    def along_y() -> int:
        return int(rng.integers(ay0 - h // 2, ay1 - h // 2 + 1))

    if predicate == "above":
        y1 = ay0 - int(rng.integers(4, 21))
        x0, y0 = along_x(), y1 - h
    elif predicate == "on":
        y1 = ay0 - int(rng.integers(0, 3))
        x0, y0 = along_x(), y1 - h
    elif predicate == "under":
        x0, y0 = along_x(), ay1 + int(rng.integers(1, 21))
    elif predicate == "to the left of":
        x0, y0 = ax0 - int(rng.integers(1, 21)) - w, along_y()
    elif predicate == "to the right of":
        x0, y0 = ax1 + int(rng.integers(1, 21)), along_y()
    elif predicate == "in":
        if aw < cfg.min_side + 4 or ah < cfg.min_side + 4:
            return None
        w = int(rng.integers(cfg.min_side, aw - 3))
        h = int(rng.integers(cfg.min_side, ah - 3))
        x0 = int(rng.integers(ax0 + 1, ax1 - w))
        y0 = int(rng.integers(ay0 + 1, ay1 - h))
        depth = round(anchor.depth - 0.1, 3)
    elif predicate in ("behind", "in front of"):
        x0 = int(rng.integers(ax0 - w + 4, ax1 - 4 + 1))
        y0 = int(rng.integers(ay0 - h + 4, ay1 - 4 + 1))
        shift = round(float(rng.uniform(0.3, 0.6)), 3)
        depth = round(anchor.depth + shift if predicate == "behind" else anchor.depth - shift, 3)
    elif predicate == "next to":
        gx, gy = int(rng.integers(1, 13)), int(rng.integers(1, 13))
        quadrant = int(rng.integers(4))
        x0 = ax1 + gx if quadrant % 2 == 0 else ax0 - gx - w
        y0 = ay1 + gy if quadrant < 2 else ay0 - gy - h
    else:
        raise UnknownLabelError(f"cannot plant predicate {predicate!r}")
    return BoundingBox(x0, y0, x0 + w, y0 + h), depth


def _fits(box: BoundingBox, placed: list[ObjectInstance], partner: Optional[int],
          cfg: SyntheticConfig) -> bool:
    if not (0 <= box.x0 and 0 <= box.y0 and box.x1 <= cfg.width and box.y1 <= cfg.height):
        return False
    if box.width < 1 or box.height < 1:
        return False
    for obj in placed:
        if obj.index != partner and obj.box.intersection_area(box) > 0:
            return False
    return True


_OVERLAPPING = ("in", "behind", "in front of")


def _place_objects(rng: np.random.Generator, cfg: SyntheticConfig, count: int,
                   plant: Sequence[str]) -> list[ObjectInstance]:
    placed: list[ObjectInstance] = []
    for index in range(count):
        cls = cfg.classes[int(rng.integers(len(cfg.classes)))]
        chosen = None
        for attempt in range(_PLANT_ATTEMPTS + _RANDOM_ATTEMPTS):
            partner = None
            if placed and attempt < _PLANT_ATTEMPTS:
                anchor = placed[int(rng.integers(len(placed)))]
                predicate = plant[int(rng.integers(len(plant)))]
                planted = _planted_box(rng, anchor, predicate, cfg)
                if planted is None:
                    continue
                box, depth = planted
                if predicate in _OVERLAPPING:
                    partner = anchor.index
            else:
                box = _random_box(rng, cfg)
                depth = round(float(rng.uniform(0.0, 1.0)), 3)
            if _fits(box, placed, partner, cfg):
                chosen = ObjectInstance(index, cls, box, depth)
                break
        if chosen is None:
            break
        placed.append(chosen)
    return placed


def _annotate(objects: list[ObjectInstance], mode: DatasetMode, book: PredicateRuleBook,
              rng: np.random.Generator) -> list[RelationshipAnnotation]:
    predicates = SPATIAL_PREDICATES if mode.is_triplet else VRD_PREDICATES
    relations = []
    for a in objects:
        for b in objects:
            if a.index == b.index:
                continue
            p = book.assign(a, b, predicates)
            if p is None:
                continue
            if not mode.is_triplet:
                relations.append(RelationshipAnnotation(a.index, p, b.index))
                continue
            others = [q for q in predicates if q != p]
            corrupted = others[int(rng.integers(len(others)))]
            relations.append(RelationshipAnnotation(a.index, p, b.index, True))
            relations.append(RelationshipAnnotation(a.index, corrupted, b.index, False))
    return relations


def generate_synthetic(config: SyntheticConfig, mode: DatasetMode | str) -> DatasetManifest:
    """Deterministic synthetic scenes with rule-assigned predicates.

    Binary datasets pair every true fact with a predicate-swapped false
    fact, so true and false labels are exactly balanced.

    Raises:
        UnsatisfiableConfigError: The canvas cannot hold the requested objects.
    """
    mode = DatasetMode.parse(mode)
    cfg = config
    if cfg.max_side > min(cfg.width, cfg.height):
        raise UnsatisfiableConfigError(
            f"max_side {cfg.max_side} exceeds the {cfg.width}x{cfg.height} canvas"
        )
    if cfg.min_objects * cfg.min_side * cfg.min_side > cfg.width * cfg.height:
        raise UnsatisfiableConfigError(
            f"{cfg.min_objects} objects of side >= {cfg.min_side} cannot fit a "
            f"{cfg.width}x{cfg.height} canvas"
        )

    rng = np.random.default_rng(derive_seed(cfg.seed, "gen"))
    book = PredicateRuleBook.with_defaults()
    plant = SPATIAL_PREDICATES if mode.is_triplet else VRD_PREDICATES

    records = []
    for i in range(cfg.images):
        image_id = f"img{i:05d}"
        count = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
        for _ in range(_IMAGE_ATTEMPTS):
            objects = _place_objects(rng, cfg, count, plant)
            if len(objects) >= cfg.min_objects:
                break
        else:
            raise UnsatisfiableConfigError(
                f"could not place {cfg.min_objects} objects without overlap", image_id
            )
        relations = _annotate(objects, mode, book, rng)
        records.append(ImageRecord(image_id, cfg.width, cfg.height, objects, relations))

    train, test = split_dataset(records, (cfg.train_fraction, 1.0 - cfg.train_fraction),
                                derive_seed(cfg.seed, "split"))
    manifest = DatasetManifest(
        mode=mode,
        predicates=mode.default_predicates(),
        classes=list(cfg.classes),
        records=records,
        splits={"train": [r.image_id for r in train], "test": [r.image_id for r in test]},
        seed=cfg.seed,
    )
    attach_canvases(manifest)
    n_rel = sum(len(r.relations) for r in records)
    logger.info("Generated %d %s images with %d relations (seed %d)",
                len(records), mode.short_name, n_rel, cfg.seed)
    return manifest


# ----------------------------------------------------------------------
# Sampling and splitting
# ----------------------------------------------------------------------

def sample_training_pairs(record: ImageRecord, seed: int,
                          pairs: int = PAIRS_PER_IMAGE,
                          positives: int = POSITIVES_PER_IMAGE) -> list[tuple[int, int, str]]:
    """Sample (subject, object, predicate) training pairs at a 1:3 ratio.

    Positives are annotated relations; negatives are unannotated ordered
    pairs whose reverse is not annotated either, labeled "no relationship".
    Short pools are topped up from the other pool; fewer than `pairs`
    candidates in total returns them all.
    """
    annotated = {(r.subject, r.object): r.predicate for r in record.relations
                 if r.truth is not False}
    positive_pool = [(s, o, p) for (s, o), p in annotated.items()]
    negative_pool = [
        (a.index, b.index, NO_RELATIONSHIP)
        for a in record.objects for b in record.objects
        if a.index != b.index
        and (a.index, b.index) not in annotated
        and (b.index, a.index) not in annotated
    ]
    if not record.objects:
        return []

    n_pos = min(len(positive_pool), positives)
    n_neg = min(len(negative_pool), pairs - n_pos)
    n_pos = min(len(positive_pool), pairs - n_neg)

    rng = np.random.default_rng(seed)
    pos_idx = np.sort(rng.choice(len(positive_pool), size=n_pos, replace=False)) if n_pos else []
    neg_idx = np.sort(rng.choice(len(negative_pool), size=n_neg, replace=False)) if n_neg else []
    if not positive_pool:
        logger.warning("Image %s has no annotated relations; sampling negatives only",
                       record.image_id)
    return [positive_pool[i] for i in pos_idx] + [negative_pool[i] for i in neg_idx]


def split_dataset(records: Sequence[ImageRecord] | DatasetManifest,
                  fractions: tuple[float, float] = (0.8, 0.2),
                  seed: int = 0) -> tuple[list[ImageRecord], list[ImageRecord]]:
    """Seeded image-level (train, test) split; each side keeps dataset order."""
    if isinstance(records, DatasetManifest):
        records = records.records
    train_f, test_f = fractions
    if not (0.0 <= train_f <= 1.0 and 0.0 <= test_f <= 1.0) or abs(train_f + test_f - 1.0) > 1e-9:
        raise ValueError(f"split fractions must lie in [0, 1] and sum to 1, got {fractions}")
    n = len(records)
    n_train = int(np.floor(train_f * n + 0.5))
    order = np.random.default_rng(seed).permutation(n)
    train_idx = set(order[:n_train].tolist())
    train = [r for i, r in enumerate(records) if i in train_idx]
    test = [r for i, r in enumerate(records) if i not in train_idx]
    return train, test


# ----------------------------------------------------------------------
# Model instances
# ----------------------------------------------------------------------

def pair_instance(manifest: DatasetManifest, record: ImageRecord, s: int, o: int,
                  label: str = NO_RELATIONSHIP) -> RelationInstance:
    """Doublet instance for an ordered pair, targeting `label`."""
    return RelationInstance(
        record.image_id, record.objects[s], record.objects[o],
        predicate=None, target=manifest.predicate_index(label), label=label,
    )


def training_instances(manifest: DatasetManifest, record: ImageRecord, seed: int,
                       pairs: int = PAIRS_PER_IMAGE,
                       positives: int = POSITIVES_PER_IMAGE) -> list[RelationInstance]:
    """Instances for one image: sampled pairs (doublet) or every fact (triplet)."""
    if manifest.mode.is_triplet:
        return relation_instances(manifest, record)
    sampled = sample_training_pairs(record, seed, pairs, positives)
    return [pair_instance(manifest, record, s, o, p) for s, o, p in sampled]


def relation_instances(manifest: DatasetManifest, record: ImageRecord) -> list[RelationInstance]:
    """One instance per annotated relation, in record order."""
    instances = []
    for rel in record.relations:
        subject, obj = record.objects[rel.subject], record.objects[rel.object]
        if manifest.mode.is_triplet:
            target = 1 if rel.truth else 0
            instances.append(RelationInstance(record.image_id, subject, obj, rel.predicate,
                                              target, rel.predicate))
        else:
            instances.append(RelationInstance(record.image_id, subject, obj, None,
                                              manifest.predicate_index(rel.predicate),
                                              rel.predicate))
    return instances
