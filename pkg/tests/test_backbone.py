"""Tests for boxes, canvases and the visual feature extractor."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from relation_engine.backbone import (
    BoundingBox,
    ImageCanvas,
    VisualBackbone,
    denormalize_box,
    normalize_box,
    sample_points,
    union_box,
)
from relation_engine.errors import BoxError, ShapeError
from relation_engine.tensor import precision


@st.composite
def boxes(draw, size=100):
    x0 = draw(st.integers(0, size - 1))
    y0 = draw(st.integers(0, size - 1))
    x1 = draw(st.integers(x0 + 1, size))
    y1 = draw(st.integers(y0 + 1, size))
    return BoundingBox(x0, y0, x1, y1)


def make_backbone(d_c=6, d=8, grid=(4, 4)):
    return VisualBackbone(d_c, d, np.random.default_rng(0), hidden=4, grid=grid)


class TestBoundingBox:
    def test_geometry(self):
        box = BoundingBox(2, 3, 12, 8)
        assert (box.width, box.height, box.area) == (10, 5, 50)
        assert BoundingBox.from_list(box.to_list()) == box

    @pytest.mark.parametrize("coords", [(5, 5, 5, 10), (0, 0, 65, 10), (-1, 0, 10, 10),
                                        (10, 10, 5, 20)])
    def test_invalid_boxes(self, coords):
        with pytest.raises(BoxError, match="degenerate or outside"):
            BoundingBox(*coords).validate(64, 64)

    def test_intersection(self):
        a = BoundingBox(0, 0, 10, 10)
        assert a.intersection_area(BoundingBox(5, 5, 20, 20)) == 25
        assert a.intersection_area(BoundingBox(10, 0, 20, 10)) == 0

    @given(boxes(), boxes())
    def test_union_is_smallest_enclosing_box(self, a, b):
        u = union_box(a, b)
        assert u.contains(a) and u.contains(b)
        assert u == union_box(b, a)
        assert u.x0 in (a.x0, b.x0) and u.x1 in (a.x1, b.x1)
        assert u.y0 in (a.y0, b.y0) and u.y1 in (a.y1, b.y1)

    @given(boxes())
    def test_union_is_idempotent(self, a):
        assert union_box(a, a) == a

    @given(boxes())
    def test_normalize_round_trip(self, box):
        coords = normalize_box(box, 100, 100)
        assert np.all((coords >= 0) & (coords <= 1))
        back = denormalize_box(coords, 100, 100)
        np.testing.assert_allclose(back.to_list(), box.to_list())

    def test_normalize_rejects_bad_box(self):
        with pytest.raises(BoxError):
            normalize_box(BoundingBox(0, 0, 200, 10), 100, 100)


class TestCanvas:
    def test_minimum_size(self):
        with pytest.raises(ShapeError, match="32x32"):
            ImageCanvas(np.zeros((16, 64, 3)))

    def test_needs_rgb(self):
        with pytest.raises(ShapeError, match="H, W, 3"):
            ImageCanvas(np.zeros((64, 64)))

    def test_tensor_is_channel_first(self):
        canvas = ImageCanvas(np.zeros((40, 48, 3)))
        assert canvas.to_tensor().shape == (3, 40, 48)


class TestVisualBackbone:
    def test_feature_map_has_stride_four(self):
        fmap = make_backbone().extract_feature_map(ImageCanvas(np.random.rand(64, 48, 3)))
        assert fmap.tensor.shape == (6, 16, 12)
        assert (fmap.image_width, fmap.image_height) == (48, 64)

    def test_roi_shapes(self):
        backbone = make_backbone()
        fmap = backbone.extract_feature_map(ImageCanvas(np.random.rand(64, 64, 3)))
        roi = backbone.roi_feature(fmap, BoundingBox(4, 8, 40, 30))
        assert roi.patch.shape == (6, 4, 4)
        assert roi.pooled.shape == (8,)
        assert backbone.whole_image_feature(fmap).shape == (8,)

    def test_full_box_samples_grid_points(self):
        # 16 cells over a 64 px side at stride 4 land exactly on feature-map cells
        np.testing.assert_allclose(sample_points(0, 64, 16, 4), np.arange(16))
        with precision(np.float64):
            backbone = make_backbone(grid=(16, 16))
            backbone.cast(np.float64)
            fmap = backbone.extract_feature_map(ImageCanvas(np.random.rand(64, 64, 3)))
            patch = backbone.roi_patch(fmap, BoundingBox.full(64, 64))
        np.testing.assert_allclose(patch.numpy(), fmap.tensor.numpy(), atol=1e-12)

    def test_roi_rejects_out_of_bounds(self):
        backbone = make_backbone()
        fmap = backbone.extract_feature_map(ImageCanvas(np.random.rand(64, 64, 3)))
        with pytest.raises(BoxError):
            backbone.roi_patch(fmap, BoundingBox(10, 10, 80, 20))

    def test_projection_is_shared(self):
        backbone = make_backbone()
        names = [n for n, _ in backbone.named_parameters()]
        assert names.count("projection.weight") == 1
