"""RelationEngine CLI: the entry point for all operations.

Usage:
    relation-engine gen-data        Generate a synthetic relationship dataset
    relation-engine train           Train a model on a dataset
    relation-engine eval            Recall@K (vrd) or accuracy (binary) on a split
    relation-engine predict         Show the top predictions for one image
    relation-engine dump-attention  Export attention masks of one image as PGM files
    relation-engine gradcheck       Run the finite-difference gradient suite
    relation-engine params          Report total / trainable parameter counts

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""

from __future__ import annotations

import json
import logging
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Optional

try:
    import typer
except ImportError:
    raise ImportError("typer is required for the CLI. Install with: pip install typer")

from relation_engine.errors import (
    ConfigError,
    DatasetError,
    EvaluationError,
    RelationEngineError,
    VocabularyError,
)

logger = logging.getLogger("relation_engine.cli")

app = typer.Typer(
    name="relation-engine",
    help="🔗 Visual relationship detection with a from-scratch vision-language Transformer.",
    add_completion=False,
)

EXIT_RUNTIME = 1
EXIT_USAGE = 2
LOG_LEVELS = ("debug", "info", "warning", "error")


@contextmanager
def _exit_codes() -> Iterator[None]:
    """Map library errors to the CLI exit-code contract."""
    try:
        yield
    except (ConfigError, DatasetError, EvaluationError, VocabularyError) as e:
        typer.echo(f"❌ {e}", err=True)
        raise typer.Exit(EXIT_USAGE)
    except (RelationEngineError, OSError) as e:
        typer.echo(f"❌ {e}", err=True)
        raise typer.Exit(EXIT_RUNTIME)


@app.callback()
def _main(
    log_level: str = typer.Option("info", "--log-level", help="debug, info, warning or error"),
):
    if log_level.lower() not in LOG_LEVELS:
        typer.echo(f"❌ Unknown log level: {log_level}", err=True)
        raise typer.Exit(EXIT_USAGE)
    logging.basicConfig(
        level=getattr(logging, log_level.upper()),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def _run_config(path: Optional[str]):
    from relation_engine.config import RunConfig

    if path is None:
        return RunConfig()
    if not Path(path).exists():
        raise ConfigError(f"config file not found: {path}")
    return RunConfig.from_yaml(path)


def _load_model(ckpt: str):
    from relation_engine.checkpoint import load_checkpoint, restore_model

    checkpoint = load_checkpoint(ckpt)
    return restore_model(checkpoint), checkpoint


def _find_record(manifest, image_id: str):
    try:
        return manifest.record(image_id)
    except DatasetError:
        raise DatasetError(f"image {image_id!r} is not in the dataset") from None


@app.command("gen-data")
def gen_data(
    out: str = typer.Option(..., "--out", help="Output dataset directory"),
    mode: Optional[str] = typer.Option(None, help="vrd or binary"),
    images: Optional[int] = typer.Option(None, help="Number of images"),
    seed: Optional[int] = typer.Option(None, help="Root seed"),
    config: Optional[str] = typer.Option(None, help="YAML config (data section)"),
):
    """Generate a synthetic dataset with rule-assigned spatial predicates."""
    with _exit_codes():
        from relation_engine.dataset import DatasetMode, SyntheticConfig, generate_synthetic, save_dataset

        run = _run_config(config).with_overrides({
            "data": {"mode": mode, "images": images},
            "train": {"seed": seed},
        })
        synthetic = SyntheticConfig.from_data_config(run.data, run.train.seed)
        manifest = generate_synthetic(synthetic, DatasetMode.parse(run.data.mode))
        save_dataset(manifest, out)
        n_rel = sum(len(r.relations) for r in manifest.records)
        typer.echo(f"🧩 Generated {len(manifest.records)} {manifest.mode.value} images, "
                   f"{n_rel} relations (seed {run.train.seed})")
        typer.echo(f"   train/test: {len(manifest.split('train'))}/{len(manifest.split('test'))}")
        typer.echo(f"   Written to: {out}")


@app.command()
def train(
    data: str = typer.Option(..., "--data", help="Dataset directory"),
    out: str = typer.Option(..., "--out", help="Run directory (checkpoint, log, config echo)"),
    config: Optional[str] = typer.Option(None, help="YAML config file"),
    freeze_backbone: Optional[bool] = typer.Option(
        None, "--freeze-backbone/--no-freeze-backbone", help="Freeze backbone, embeddings, encoder"),
    spatial: Optional[bool] = typer.Option(None, "--spatial/--no-spatial", help="Spatial module"),
    mask_att: Optional[bool] = typer.Option(None, "--mask-att/--no-mask-att", help="Mask attention"),
    mask_loss: Optional[str] = typer.Option(None, "--mask-loss", help="mse or bce"),
    fusion: Optional[str] = typer.Option(None, "--fusion", help="concat or alpha:<value>"),
    epochs: Optional[int] = typer.Option(None, help="Training epochs"),
    lr: Optional[float] = typer.Option(None, help="Base learning rate"),
    batch_size: Optional[int] = typer.Option(None, "--batch-size", help="Instances per step"),
    seed: Optional[int] = typer.Option(None, help="Root seed"),
):
    """Train a relationship model; flags override the config file."""
    with _exit_codes():
        from relation_engine.dataset import load_dataset
        from relation_engine.model import RelationshipModel
        from relation_engine.sequence import build_vocabulary
        from relation_engine.trainer import Trainer

        manifest = load_dataset(data)
        run = _run_config(config).with_overrides({
            "model": {"spatial": spatial, "mask_attention": mask_att,
                      "mask_loss": mask_loss, "fusion": fusion},
            "train": {"freeze_backbone": freeze_backbone, "epochs": epochs, "lr": lr,
                      "batch_size": batch_size, "seed": seed},
            "data": {"mode": manifest.mode.short_name},
        })
        typer.echo(f"📂 {len(manifest.split('train'))} training images ({manifest.mode.value})")

        model = RelationshipModel(run.model, build_vocabulary(manifest), manifest.predicates,
                                  manifest.mode, seed=run.train.seed)
        result = Trainer(model, manifest, run, out_dir=out).fit()

        losses = result.log.losses()
        typer.echo("\n✅ Training complete!")
        typer.echo(f"   Steps: {result.steps}")
        if len(losses):
            typer.echo(f"   Loss: {losses[0]:.4f} -> {losses[-1]:.4f}")
        typer.echo(f"   Checkpoint: {Path(out) / 'checkpoint'}")


def _parse_ks(text: str) -> list[int]:
    try:
        ks = [int(k) for k in text.split(",") if k.strip()]
    except ValueError:
        raise ConfigError(f"--k must be comma-separated integers, got {text!r}") from None
    if not ks or any(k <= 0 for k in ks):
        raise ConfigError(f"--k values must be positive, got {text!r}")
    return ks


@app.command("eval")
def evaluate_cmd(
    data: str = typer.Option(..., "--data", help="Dataset directory"),
    ckpt: str = typer.Option(..., "--ckpt", help="Checkpoint directory"),
    k: str = typer.Option("50,100", "--k", help="Comma-separated K values for Recall@K"),
    split: str = typer.Option("test", help="Split to evaluate"),
    threads: int = typer.Option(1, help="Worker threads"),
    metrics: Optional[str] = typer.Option(None, help="Metrics JSONL file (appended)"),
    mask_iou: bool = typer.Option(False, "--mask-iou", help="Also report mean mask IoU"),
):
    """Evaluate a checkpoint: Recall@K in vrd mode, accuracy in binary mode."""
    with _exit_codes():
        from relation_engine.dataset import load_dataset
        from relation_engine.evaluator import evaluate, write_metrics_report

        ks = _parse_ks(k)
        model, checkpoint = _load_model(ckpt)
        manifest = load_dataset(data)
        if checkpoint.mode != manifest.mode.value:
            raise EvaluationError(
                f"checkpoint mode {checkpoint.mode} does not match dataset mode {manifest.mode.value}"
            )
        report = evaluate(model, manifest, split=split, ks=ks, threads=threads,
                          with_mask_iou=mask_iou)
        metrics_path = Path(metrics) if metrics else Path(ckpt).parent / "metrics.jsonl"
        write_metrics_report(metrics_path, report)

        typer.echo(f"📊 {report.n_images} images, {report.n_gt} ground-truth facts ({report.mode})")
        for kk, r in sorted(report.recall.items()):
            typer.echo(f"   recall@{kk}: {r.recall:.4f} ({r.recalled}/{r.total})")
        if report.accuracy is not None:
            typer.echo(f"   overall accuracy: {report.accuracy.overall:.4f}")
        for predicate, value in report.per_predicate.items():
            typer.echo(f"     {predicate:<16} {value:.4f}")
        if report.mask_iou is not None:
            typer.echo(f"   mean mask IoU: {report.mask_iou:.4f}")
        typer.echo(f"   Metrics appended to: {metrics_path}")


@app.command()
def predict(
    data: str = typer.Option(..., "--data", help="Dataset directory"),
    ckpt: str = typer.Option(..., "--ckpt", help="Checkpoint directory"),
    image: str = typer.Option(..., "--image", help="Image id"),
    top: int = typer.Option(10, help="Predictions to show (vrd mode)"),
):
    """Print the model's predictions for one image."""
    with _exit_codes():
        from relation_engine.dataset import load_dataset
        from relation_engine.evaluator import rank_image

        model, _ = _load_model(ckpt)
        manifest = load_dataset(data)
        record = _find_record(manifest, image)
        names = [f"{o.cls}#{o.index}" for o in record.objects]
        typer.echo(f"🖼️  {record.image_id}: {len(record.objects)} objects")
        if model.mode.is_triplet:
            cache = model.image_cache(record)
            for rel in record.relations:
                probs = model.predict_pair(record, rel.subject, rel.object, rel.predicate,
                                           cache=cache)
                verdict = "true" if probs[1] > probs[0] else "false"
                typer.echo(f"   {names[rel.subject]} {rel.predicate} {names[rel.object]}: "
                           f"{verdict} (p={probs[1]:.3f}, label={rel.truth})")
        else:
            truth = set(record.ground_truth())
            for p in rank_image(model, record)[:top]:
                mark = "✓" if p.triplet in truth else " "
                typer.echo(f" {mark} {p.score:.3f}  {names[p.subject]} {p.predicate} "
                           f"{names[p.object]}")


@app.command("dump-attention")
def dump_attention_cmd(
    data: str = typer.Option(..., "--data", help="Dataset directory"),
    ckpt: str = typer.Option(..., "--ckpt", help="Checkpoint directory"),
    image: str = typer.Option(..., "--image", help="Image id"),
    out: str = typer.Option(..., "--out", help="Output directory for PGM files"),
):
    """Export predicted and ground-truth attention masks as PGM files."""
    with _exit_codes():
        from relation_engine.dataset import load_dataset
        from relation_engine.export import dump_attention

        model, _ = _load_model(ckpt)
        manifest = load_dataset(data)
        record = _find_record(manifest, image)
        written = dump_attention(model, manifest, record, out)
        typer.echo(f"🗺️  Wrote {len(written)} masks for {image} to {out}")


@app.command()
def gradcheck(
    dims: str = typer.Option("small", help="small or default"),
    inject_bug: Optional[str] = typer.Option(None, "--inject-bug", help="Op with a faulty adjoint"),
    report: Optional[str] = typer.Option(None, help="Write the full report as JSON"),
):
    """Check every gradient against central finite differences."""
    from relation_engine.gradcheck import run_suite

    try:
        suite = run_suite(dims, inject_bug)
    except ValueError as e:
        typer.echo(f"❌ {e}", err=True)
        raise typer.Exit(EXIT_USAGE)

    for r in suite.reports:
        mark = "✅" if r.passed else "❌"
        typer.echo(f"{mark} {r.name:<22} max rel error {r.max_error:.2e}")
    if report:
        Path(report).write_text(json.dumps(suite.to_dict(), indent=2))
    if not suite.passed:
        typer.echo(f"\n❌ Failing: {', '.join(suite.failing)}", err=True)
        raise typer.Exit(EXIT_RUNTIME)
    typer.echo(f"\n✅ All {len(suite.reports)} checks within tolerance")


@app.command()
def params(
    ckpt: Optional[str] = typer.Option(None, "--ckpt", help="Checkpoint directory"),
    config: Optional[str] = typer.Option(None, help="YAML config (estimate without a model)"),
    freeze_backbone: bool = typer.Option(False, "--freeze-backbone", help="Report with backbone frozen"),
):
    """Report total and trainable parameter counts."""
    with _exit_codes():
        from relation_engine.model import REFERENCE_VOCAB, estimate_parameters, frozen_fraction, reference_config

        if ckpt:
            model, _ = _load_model(ckpt)
            if freeze_backbone:
                model.freeze_backbone()
            rep = model.trainable_report()
            typer.echo(f"🔢 {rep['trainable']:,} of {rep['total']:,} parameters trainable "
                       f"({rep['fraction']:.1%})")
            for group, counts in rep["groups"].items():
                typer.echo(f"   {group:<16} {counts['trainable']:>10,} / {counts['total']:,}")
        else:
            from relation_engine.dataset import DEFAULT_CLASSES, DatasetMode
            from relation_engine.predicates import NO_RELATIONSHIP
            from relation_engine.sequence import Vocabulary, tokenize_term

            run = _run_config(config)
            mode = DatasetMode.parse(run.data.mode)
            predicates = mode.default_predicates()
            vocab = Vocabulary()
            for label in [*DEFAULT_CLASSES, *predicates]:
                if label != NO_RELATIONSHIP:
                    tokenize_term(label, vocab, grow=True)
            num_classes = 2 if mode.is_triplet else len(predicates)
            counts = estimate_parameters(run.model, len(vocab), num_classes)
            total = sum(counts.values())
            typer.echo(f"🔢 {total:,} parameters (estimated, {mode.short_name} mode)")
            for group, n in counts.items():
                typer.echo(f"   {group:<16} {n:>10,}")
            typer.echo(f"   trainable with backbone frozen: "
                       f"{frozen_fraction(run.model, len(vocab), num_classes):.1%}")
        ref = reference_config()
        reference = frozen_fraction(ref, REFERENCE_VOCAB, 2)
        typer.echo(f"   reference scale frozen-backbone trainable share: {reference:.1%}")
        typer.echo(f"     (d={ref.d} L={ref.L} M={ref.M} d_ff={ref.d_ff} d_s={ref.d_s} "
                   f"d_c={ref.d_c} p_max={ref.p_max} backbone_hidden={ref.backbone_hidden} "
                   f"vocab={REFERENCE_VOCAB}, binary head)")


def main():
    app()


if __name__ == "__main__":
    main()
