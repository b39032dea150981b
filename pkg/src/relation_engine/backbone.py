"""Visual features: a small convolutional extractor plus RoI sampling.

The extractor is two 3x3 conv + ReLU + 2x2 average-pool stages, so the
feature map has stride 4 relative to the image. Region features are
bilinear samples at the centers of a d_h x d_w grid laid over the box,
mapped to feature-map coordinates; the pooled vector is a shared linear
projection (d_c -> d) of the patch's spatial mean. The same projection
serves object, union and whole-image features and the mask-gated
features of the mask attention module.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from relation_engine import ops
from relation_engine.errors import BoxError, ShapeError
from relation_engine.nn import Conv2d, Linear, Module
from relation_engine.tensor import Tensor

logger = logging.getLogger("relation_engine.backbone")

MIN_IMAGE_SIDE = 32
FEATURE_STRIDE = 4


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in pixel coordinates, y pointing down."""
    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)

    def validate(self, width: float, height: float) -> None:
        """Raise BoxError unless 0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height."""
        if not (0 <= self.x0 < self.x1 <= width and 0 <= self.y0 < self.y1 <= height):
            raise BoxError(f"box {self.to_list()} is degenerate or outside a {width}x{height} image")

    def contains(self, other: BoundingBox) -> bool:
        return (self.x0 <= other.x0 and self.y0 <= other.y0
                and other.x1 <= self.x1 and other.y1 <= self.y1)

    def intersection_area(self, other: BoundingBox) -> float:
        w = min(self.x1, other.x1) - max(self.x0, other.x0)
        h = min(self.y1, other.y1) - max(self.y0, other.y0)
        return max(w, 0.0) * max(h, 0.0)

    def to_list(self) -> list[float]:
        return [self.x0, self.y0, self.x1, self.y1]

    @classmethod
    def from_list(cls, values) -> BoundingBox:
        x0, y0, x1, y1 = (float(v) for v in values)
        return cls(x0, y0, x1, y1)

    @classmethod
    def full(cls, width: float, height: float) -> BoundingBox:
        return cls(0.0, 0.0, float(width), float(height))


@dataclass
class ImageCanvas:
    """RGB image, pixels (H, W, 3) in [0, 1]."""
    pixels: np.ndarray

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ShapeError("ImageCanvas", self.pixels.shape, None, axis=2,
                             detail="expected (H, W, 3) pixels")
        if self.height < MIN_IMAGE_SIDE or self.width < MIN_IMAGE_SIDE:
            raise ShapeError("ImageCanvas", self.pixels.shape, (MIN_IMAGE_SIDE, MIN_IMAGE_SIDE),
                             axis=(0, 1), detail="image smaller than 32x32")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def to_tensor(self) -> Tensor:
        return Tensor(self.pixels.transpose(2, 0, 1))


@dataclass
class FeatureMap:
    """Backbone output (d_c, H/4, W/4) with the source image size."""
    tensor: Tensor
    image_width: int
    image_height: int
    stride: int = FEATURE_STRIDE

    @property
    def channels(self) -> int:
        return self.tensor.shape[0]


@dataclass
class RoIFeature:
    patch: Tensor   # (d_c, d_h, d_w)
    pooled: Tensor  # (d,)


def union_box(a: BoundingBox, b: BoundingBox) -> BoundingBox:
    return BoundingBox(min(a.x0, b.x0), min(a.y0, b.y0), max(a.x1, b.x1), max(a.y1, b.y1))


def normalize_box(box: BoundingBox, width: float, height: float) -> np.ndarray:
    """(x0/w, y0/h, x1/w, y1/h)."""
    if width <= 0 or height <= 0:
        raise BoxError(f"image size must be positive, got {width}x{height}")
    box.validate(width, height)
    return np.array([box.x0 / width, box.y0 / height, box.x1 / width, box.y1 / height])


def denormalize_box(coords, width: float, height: float) -> BoundingBox:
    x0, y0, x1, y1 = (float(c) for c in coords)
    return BoundingBox(x0 * width, y0 * height, x1 * width, y1 * height)


def sample_points(start: float, length: float, cells: int, stride: int) -> np.ndarray:
    """Feature-map coordinates of `cells` cell centers spanning [start, start+length) pixels."""
    step = (length / stride) / cells
    return start / stride + (np.arange(cells) + 0.5) * step - 0.5


class VisualBackbone(Module):
    """Trainable conv feature extractor with RoI sampling and a shared projection."""

    def __init__(self, d_c: int, d: int, rng: np.random.Generator,
                 hidden: int = 16, grid: tuple[int, int] = (14, 14)):
        super().__init__()
        self.d_c = d_c
        self.d = d
        self.grid = grid
        self.conv1 = Conv2d(3, hidden, 3, rng)
        self.conv2 = Conv2d(hidden, d_c, 3, rng)
        self.projection = Linear(d_c, d, rng)

    def extract_feature_map(self, image: ImageCanvas) -> FeatureMap:
        x = image.to_tensor()
        h = ops.avg_pool2(ops.relu(self.conv1(x)))
        h = ops.avg_pool2(ops.relu(self.conv2(h)))
        return FeatureMap(h, image.width, image.height)

    def project(self, channels: Tensor) -> Tensor:
        """Shared d_c -> d projection."""
        return self.projection(channels)

    def roi_patch(self, fmap: FeatureMap, box: BoundingBox) -> Tensor:
        box.validate(fmap.image_width, fmap.image_height)
        if box.width / fmap.stride <= 0 or box.height / fmap.stride <= 0:
            raise BoxError(f"box {box.to_list()} has zero area on the feature map")
        d_h, d_w = self.grid
        ys = sample_points(box.y0, box.height, d_h, fmap.stride)
        xs = sample_points(box.x0, box.width, d_w, fmap.stride)
        return ops.bilinear_sample(fmap.tensor, ys, xs)

    def roi_feature(self, fmap: FeatureMap, box: BoundingBox) -> RoIFeature:
        patch = self.roi_patch(fmap, box)
        return RoIFeature(patch, self.project(ops.mean_pool(patch)))

    def whole_image_feature(self, fmap: FeatureMap) -> Tensor:
        """z_0: pooled feature of the full-image box."""
        return self.roi_feature(fmap, BoundingBox.full(fmap.image_width, fmap.image_height)).pooled
