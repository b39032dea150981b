"""Tests for the spatial module, fusion and classifier head."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relation_engine import ops
from relation_engine.errors import BoxError, ConfigError, ShapeError
from relation_engine.spatial import (
    ClassifierHead,
    FusionConfig,
    FusionMode,
    SpatialModule,
    fuse,
    fused_dim,
)
from relation_engine.tensor import Tensor, precision


class TestFusionConfig:
    def test_parse(self):
        assert FusionConfig.parse("concat").mode is FusionMode.CONCAT
        alpha = FusionConfig.parse("alpha:0.3")
        assert alpha.is_alpha
        assert alpha.alpha == pytest.approx(0.3)
        assert str(alpha) == "alpha:0.3"
        assert str(FusionConfig()) == "concat"

    @pytest.mark.parametrize("text", ["sum", "alpha", "alpha:x", "alpha:1.5"])
    def test_rejects(self, text):
        with pytest.raises(ConfigError):
            FusionConfig.parse(text)


class TestSpatialModule:
    def test_output_width(self):
        module = SpatialModule(16, np.random.default_rng(0))
        c = module([0.1, 0.2, 0.5, 0.6], [0.0, 0.0, 1.0, 1.0])
        assert c.shape == (16,)

    def test_order_matters(self):
        module = SpatialModule(32, np.random.default_rng(0))
        a = np.array([0.1, 0.2, 0.5, 0.6])
        b = np.array([0.4, 0.1, 0.9, 0.7])
        assert not np.allclose(module(a, b).numpy(), module(b, a).numpy())

    def test_rejects_pixel_coordinates(self):
        module = SpatialModule(8, np.random.default_rng(0))
        with pytest.raises(BoxError, match="not normalized"):
            module([10.0, 20.0, 50.0, 60.0], [0.0, 0.0, 1.0, 1.0])

    def test_rejects_wrong_length(self):
        module = SpatialModule(8, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            module([0.1, 0.2, 0.3], [0.0, 0.0, 1.0, 1.0])


class TestFuse:
    def test_concat_puts_spatial_first(self):
        c = Tensor(np.arange(3.0))
        h = Tensor(np.arange(5.0) + 10)
        f = fuse(c, h, FusionConfig())
        np.testing.assert_array_equal(f.numpy(), [0, 1, 2, 10, 11, 12, 13, 14])
        assert fused_dim(5, 3, FusionConfig()) == 8

    def test_alpha_weights(self):
        c = Tensor(np.ones(4))
        h = Tensor(np.zeros(4))
        f = fuse(c, h, FusionConfig.parse("alpha:0.25"))
        np.testing.assert_allclose(f.numpy(), np.full(4, 0.25))
        assert fused_dim(4, 4, FusionConfig.parse("alpha:0.25")) == 4

    def test_alpha_needs_equal_widths(self):
        with pytest.raises(ShapeError, match="d_s == d"):
            fuse(Tensor(np.ones(3)), Tensor(np.ones(4)), FusionConfig.parse("alpha:0.5"))


class TestClassifierHead:
    def test_logits(self):
        head = ClassifierHead(12, 7, np.random.default_rng(0))
        assert head(Tensor(np.ones(12))).shape == (7,)
        assert head.fc1.out_features == 24

    def test_wrong_width(self):
        head = ClassifierHead(12, 2, np.random.default_rng(0))
        with pytest.raises(ShapeError, match="classify"):
            head(Tensor(np.ones(10)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(-20, 20).filter(lambda c: abs(c) > 1e-3))
    def test_decision_ignores_a_constant_logit_shift(self, seed, c):
        rng = np.random.default_rng(seed)
        head = ClassifierHead(12, 7, rng)
        with precision(np.float64):
            head.cast(np.float64)
            f_so = Tensor(rng.standard_normal(12))
            logits = head(f_so).numpy()
            head.fc2.bias.data = head.fc2.bias.data + c
            moved = head(f_so).numpy()
            probs = ops.softmax(Tensor(logits)).numpy()
            moved_probs = ops.softmax(Tensor(moved)).numpy()
        np.testing.assert_allclose(moved - logits, c, atol=1e-9)
        assert np.argmax(moved) == np.argmax(logits)
        np.testing.assert_allclose(moved_probs, probs, atol=1e-6)
