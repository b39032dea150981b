"""Tests for stage timing in training and evaluation."""

import threading
import time

import pytest

from relation_engine.config import ModelConfig, RunConfig, TrainConfig
from relation_engine.dataset import SyntheticConfig, generate_synthetic
from relation_engine.evaluator import evaluate
from relation_engine.model import RelationshipModel
from relation_engine.profiler import Stage, StageProfiler
from relation_engine.sequence import build_vocabulary
from relation_engine.trainer import Trainer

SMALL = dict(d=16, L=1, M=2, d_ff=32, d_s=8, d_c=8, d_w=4, d_h=4, p_max=32, backbone_hidden=4)
SCENES = SyntheticConfig(images=5, width=48, height=48, min_side=8, max_side=16, seed=6)


@pytest.fixture(scope="module")
def vrd():
    return generate_synthetic(SCENES, "vrd")


def run_config(epochs=2):
    return RunConfig(
        model=ModelConfig(**SMALL),
        train=TrainConfig(epochs=epochs, batch_size=8, warmup=0, lr=1e-3,
                          pairs_per_image=8, positives_per_image=2),
    )


def make_model(manifest, config):
    return RelationshipModel(config.model, build_vocabulary(manifest), manifest.predicates,
                             manifest.mode, seed=0)


class TestStageProfiler:
    def test_summary_follows_pipeline_order(self):
        profiler = StageProfiler()
        with profiler.stage(Stage.OPTIMIZER):
            time.sleep(0.001)
        with profiler.stage("forward"):
            pass
        with profiler.stage(Stage.FORWARD):
            pass

        summary = profiler.summary()
        assert list(summary) == ["forward", "optimizer"]
        assert summary["forward"]["calls"] == 2
        assert sum(s["share"] for s in summary.values()) == pytest.approx(1.0, abs=0.01)

    def test_unknown_stage(self):
        with pytest.raises(ValueError):
            with StageProfiler().stage("detection"):
                pass

    def test_timing_survives_exceptions(self):
        profiler = StageProfiler()
        with pytest.raises(RuntimeError):
            with profiler.stage(Stage.BACKWARD):
                raise RuntimeError("boom")
        assert profiler.timing(Stage.BACKWARD).calls == 1
        assert profiler.timing(Stage.DATA) is None

    def test_lap_restarts_but_run_keeps_counting(self):
        profiler = StageProfiler()
        with profiler.stage(Stage.DATA):
            pass
        assert profiler.lap()["data"]["calls"] == 1
        assert profiler.lap() == {}
        with profiler.stage(Stage.DATA):
            pass
        assert profiler.lap()["data"]["calls"] == 1
        assert profiler.summary()["data"]["calls"] == 2

    def test_threads_share_one_profiler(self):
        profiler = StageProfiler()

        def work():
            for _ in range(50):
                with profiler.stage(Stage.EVAL):
                    pass

        threads = [threading.Thread(target=work) for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        timing = profiler.timing(Stage.EVAL)
        assert timing.calls == 400
        assert timing.max_s * 1000.0 >= timing.mean_ms


class TestTrainingStages:
    def test_fit_times_every_stage(self, vrd, tmp_path):
        config = run_config(epochs=2)
        trainer = Trainer(make_model(vrd, config), vrd, config, out_dir=tmp_path / "run")
        result = trainer.fit()

        assert list(result.profile) == ["data", "forward", "backward", "optimizer", "checkpoint"]
        assert result.profile["data"]["calls"] == 2
        assert result.profile["checkpoint"]["calls"] == 2
        for stage in ("forward", "backward", "optimizer"):
            assert result.profile[stage]["calls"] == result.steps

    def test_no_checkpoint_stage_without_run_dir(self, vrd):
        config = run_config(epochs=1)
        result = Trainer(make_model(vrd, config), vrd, config).fit()
        assert "checkpoint" not in result.profile
        assert "eval" not in result.profile


class TestEvalStage:
    def test_scoring_is_timed_per_image(self, vrd):
        model = make_model(vrd, run_config())
        report = evaluate(model, vrd, split="test", ks=(5,), threads=2)
        assert list(report.timings) == ["eval"]
        assert report.timings["eval"]["calls"] == len(vrd.split("test"))

    def test_shared_profiler_spans_training_and_eval(self, vrd):
        config = run_config(epochs=1)
        profiler = StageProfiler()
        model = make_model(vrd, config)
        Trainer(model, vrd, config, profiler=profiler).fit()
        report = evaluate(model, vrd, split="test", ks=(5,), with_mask_iou=True,
                          profiler=profiler)
        assert {"forward", "eval"} <= set(report.timings)
        # ranking plus one mask pass per annotated test image
        assert report.timings["eval"]["calls"] >= len(vrd.split("test"))
