"""Tests for checkpoint save / load / restore."""

import json

import numpy as np
import pytest

from relation_engine.checkpoint import load_checkpoint, restore_model, save_checkpoint
from relation_engine.config import ModelConfig, RunConfig
from relation_engine.dataset import SyntheticConfig, generate_synthetic
from relation_engine.errors import (
    CheckpointError,
    CheckpointShapeError,
    CheckpointVersionError,
    MissingParameterError,
    TruncatedPayloadError,
)
from relation_engine.model import RelationshipModel
from relation_engine.optim import OptimizerState
from relation_engine.sequence import build_vocabulary

SMALL = dict(d=16, L=1, M=2, d_ff=32, d_s=8, d_c=8, d_w=4, d_h=4, p_max=32, backbone_hidden=4)


@pytest.fixture(scope="module")
def manifest():
    return generate_synthetic(
        SyntheticConfig(images=2, width=48, height=48, min_side=8, max_side=16, seed=5), "vrd"
    )


def make_model(manifest, seed=0, **overrides):
    return RelationshipModel(ModelConfig(**{**SMALL, **overrides}), build_vocabulary(manifest),
                             manifest.predicates, manifest.mode, seed=seed)


def moments(model, seed):
    rng = np.random.default_rng(seed)
    state = OptimizerState.zeros(model)
    for name in state.m:
        state.m[name] = rng.standard_normal(state.m[name].shape).astype(np.float32)
        state.v[name] = rng.random(state.v[name].shape).astype(np.float32)
    state.t = 17
    return state


class TestRoundTrip:
    def test_parameters_are_bit_exact(self, manifest, tmp_path):
        model = make_model(manifest, seed=3)
        state = moments(model, seed=1)
        config = RunConfig(model=model.config)
        save_checkpoint(tmp_path / "ckpt", model, state, config, epoch=2)

        ckpt = load_checkpoint(tmp_path / "ckpt")
        assert ckpt.version == 1
        assert ckpt.epoch == 2
        assert ckpt.mode == "doublet-vrd"
        assert ckpt.predicates == manifest.predicates
        assert ckpt.vocab == model.vocab
        assert ckpt.run_config == config
        for name, p in model.named_parameters():
            assert ckpt.params[name].tobytes() == p.data.astype("<f4").tobytes()
        assert ckpt.optimizer.t == 17
        for name in state.m:
            np.testing.assert_array_equal(ckpt.optimizer.m[name], state.m[name])
            np.testing.assert_array_equal(ckpt.optimizer.v[name], state.v[name])

    def test_restored_model_predicts_identically(self, manifest, tmp_path):
        model = make_model(manifest, seed=3)
        save_checkpoint(tmp_path / "ckpt", model)
        restored = restore_model(load_checkpoint(tmp_path / "ckpt"))
        record = manifest.records[0]
        np.testing.assert_array_equal(restored.predict_pair(record, 0, 1),
                                      model.predict_pair(record, 0, 1))

    def test_restore_into_existing_model(self, manifest, tmp_path):
        source = make_model(manifest, seed=3)
        target = make_model(manifest, seed=9)
        save_checkpoint(tmp_path / "ckpt", source)
        restore_model(load_checkpoint(tmp_path / "ckpt"), target)
        np.testing.assert_array_equal(target.classifier.fc2.weight.data,
                                      source.classifier.fc2.weight.data)

    def test_without_optimizer(self, manifest, tmp_path):
        model = make_model(manifest)
        save_checkpoint(tmp_path / "ckpt", model, moments(model, 0))
        save_checkpoint(tmp_path / "ckpt", model)
        assert not (tmp_path / "ckpt" / "optimizer.bin").exists()
        assert load_checkpoint(tmp_path / "ckpt").optimizer is None

    def test_file_layout(self, manifest, tmp_path):
        model = make_model(manifest)
        save_checkpoint(tmp_path / "ckpt", model, moments(model, 0))
        names = {p.name for p in (tmp_path / "ckpt").iterdir()}
        assert names == {"manifest.json", "params.bin", "optimizer.bin", "vocab.txt"}
        size = (tmp_path / "ckpt" / "params.bin").stat().st_size
        assert size == 4 * model.num_parameters()


class TestErrors:
    @pytest.fixture
    def saved(self, manifest, tmp_path):
        model = make_model(manifest)
        save_checkpoint(tmp_path / "ckpt", model, moments(model, 0))
        return tmp_path / "ckpt"

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(CheckpointError, match="manifest.json"):
            load_checkpoint(tmp_path)

    def test_version(self, saved):
        path = saved / "manifest.json"
        data = json.loads(path.read_text())
        data["version"] = 2
        path.write_text(json.dumps(data))
        with pytest.raises(CheckpointVersionError, match="version 2"):
            load_checkpoint(saved)

    def test_truncated_params(self, saved):
        path = saved / "params.bin"
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(TruncatedPayloadError, match="params.bin"):
            load_checkpoint(saved)

    def test_missing_optimizer_payload(self, saved):
        (saved / "optimizer.bin").unlink()
        with pytest.raises(TruncatedPayloadError, match="missing"):
            load_checkpoint(saved)

    def test_shape_mismatch(self, manifest, saved):
        with pytest.raises(CheckpointShapeError, match="stored shape"):
            restore_model(load_checkpoint(saved), make_model(manifest, d_s=12))

    def test_missing_parameter(self, manifest, tmp_path):
        save_checkpoint(tmp_path / "ckpt", make_model(manifest, mask_attention=False))
        with pytest.raises(MissingParameterError, match="mask_attention"):
            restore_model(load_checkpoint(tmp_path / "ckpt"), make_model(manifest))
