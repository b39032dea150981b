"""Tests for run configuration and seed derivation."""

import hashlib
from pathlib import Path

import pytest

from relation_engine.config import DataConfig, ModelConfig, RunConfig, TrainConfig, derive_seed
from relation_engine.errors import ConfigError

CONFIG_DIR = Path(__file__).resolve().parents[1] / "config"


class TestDeriveSeed:
    def test_matches_sha256_prefix(self):
        expected = int.from_bytes(hashlib.sha256(b"7:init").digest()[:8], "big")
        assert derive_seed(7, "init") == expected

    def test_labels_are_independent(self):
        seeds = {derive_seed(0, label) for label in ("init", "data", "sample", "order", "split")}
        assert len(seeds) == 5

    def test_deterministic_and_unsigned(self):
        assert derive_seed(3, "gen") == derive_seed(3, "gen")
        assert 0 <= derive_seed(3, "gen") < 2 ** 64


class TestSections:
    def test_defaults_are_desk_scale(self):
        model = ModelConfig()
        assert (model.d, model.L, model.M) == (64, 2, 4)
        assert model.d % model.M == 0

    def test_heads_must_divide_width(self):
        with pytest.raises(ConfigError, match="divisible"):
            ModelConfig(d=30, M=4)

    def test_bad_mask_loss(self):
        with pytest.raises(ConfigError, match="mask_loss"):
            ModelConfig(mask_loss="l1")

    def test_bad_fusion(self):
        with pytest.raises(ConfigError, match="fusion"):
            ModelConfig(fusion="sum")

    def test_alpha_fusion_needs_equal_widths(self):
        with pytest.raises(ConfigError, match="d_s == model.d"):
            ModelConfig(fusion="alpha:0.5", d=64, d_s=32)
        assert ModelConfig(fusion="alpha:0.5", d=64, d_s=64).fusion == "alpha:0.5"

    def test_positives_bounded_by_pairs(self):
        with pytest.raises(ConfigError, match="positives_per_image"):
            TrainConfig(pairs_per_image=4, positives_per_image=8)

    def test_zero_images(self):
        with pytest.raises(ConfigError, match="images"):
            DataConfig(images=0)

    def test_bad_mode(self):
        with pytest.raises(ConfigError, match="mode"):
            DataConfig(mode="scene-graph")


class TestRunConfig:
    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="unknown config section"):
            RunConfig.from_dict({"optimizer": {}})

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown key.*dropout"):
            RunConfig.from_dict({"model": {"dropout": 0.1}})

    def test_wrong_type(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"model": {"d": "wide"}})

    def test_partial_sections_keep_defaults(self):
        config = RunConfig.from_dict({"train": {"epochs": 3}})
        assert config.train.epochs == 3
        assert config.train.lr == TrainConfig().lr
        assert config.model == ModelConfig()

    def test_yaml_round_trip(self, tmp_path):
        config = RunConfig.from_dict({"model": {"spatial": False}, "data": {"mode": "binary"}})
        path = tmp_path / "run.yml"
        config.to_yaml(path)
        assert RunConfig.from_yaml(path) == config

    def test_invalid_yaml(self, tmp_path):
        path = tmp_path / "broken.yml"
        path.write_text("model: [unclosed\n")
        with pytest.raises(ConfigError, match="invalid YAML"):
            RunConfig.from_yaml(path)

    def test_empty_file_gives_defaults(self, tmp_path):
        path = tmp_path / "empty.yml"
        path.write_text("")
        assert RunConfig.from_yaml(path) == RunConfig()

    def test_shipped_default_matches_dataclasses(self):
        assert RunConfig.from_yaml(CONFIG_DIR / "default.yml") == RunConfig()

    def test_shipped_binary_config(self):
        config = RunConfig.from_yaml(CONFIG_DIR / "binary.yml")
        assert config.data.mode == "binary"


class TestOverrides:
    def test_none_means_not_given(self):
        base = RunConfig.from_dict({"model": {"spatial": False}})
        merged = base.with_overrides({"model": {"spatial": None, "mask_loss": "bce"}})
        assert merged.model.spatial is False
        assert merged.model.mask_loss == "bce"

    def test_flag_beats_file(self):
        base = RunConfig.from_dict({"train": {"epochs": 3}})
        assert base.with_overrides({"train": {"epochs": 9}}).train.epochs == 9

    def test_overrides_are_validated(self):
        with pytest.raises(ConfigError, match="divisible"):
            RunConfig().with_overrides({"model": {"M": 5}})

    def test_unknown_override(self):
        with pytest.raises(ConfigError, match="unknown override"):
            RunConfig().with_overrides({"model": {"width": 3}})

    def test_original_is_unchanged(self):
        base = RunConfig()
        base.with_overrides({"train": {"seed": 11}})
        assert base.train.seed == 0
