"""Checkpoint directories: JSON manifest plus raw little-endian float32 payloads.

    manifest.json   {version, entries: [{name, shape, dtype}], config, mode,
                     predicates, seed, epoch, optimizer: {t} | null}
    params.bin      every parameter, row-major, manifest order
    optimizer.bin   m then v for every parameter, manifest order (optional)
    vocab.txt       "word<TAB>id" lines

Usage:
    save_checkpoint("runs/a/checkpoint", model, state, config)
    ckpt = load_checkpoint("runs/a/checkpoint")
    model = restore_model(ckpt)
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from relation_engine.config import ModelConfig, RunConfig
from relation_engine.errors import (
    CheckpointError,
    CheckpointShapeError,
    CheckpointVersionError,
    MissingParameterError,
    TruncatedPayloadError,
)
from relation_engine.optim import OptimizerState
from relation_engine.sequence import Vocabulary

logger = logging.getLogger("relation_engine.checkpoint")

CHECKPOINT_VERSION = 1
MANIFEST_FILE = "manifest.json"
PARAMS_FILE = "params.bin"
OPTIMIZER_FILE = "optimizer.bin"
VOCAB_FILE = "vocab.txt"
_DTYPE = np.dtype("<f4")


@dataclass
class TensorEntry:
    name: str
    shape: tuple[int, ...]
    dtype: str = "f32"

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    def to_dict(self) -> dict:
        return {"name": self.name, "shape": list(self.shape), "dtype": self.dtype}

    @classmethod
    def from_dict(cls, data: dict) -> TensorEntry:
        return cls(data["name"], tuple(int(s) for s in data["shape"]), data.get("dtype", "f32"))


@dataclass
class Checkpoint:
    entries: list[TensorEntry]
    params: dict[str, np.ndarray]
    vocab: Vocabulary
    config: dict = field(default_factory=dict)
    mode: str = "doublet-vrd"
    predicates: list[str] = field(default_factory=list)
    seed: int = 0
    epoch: Optional[int] = None
    optimizer: Optional[OptimizerState] = None
    version: int = CHECKPOINT_VERSION

    @property
    def run_config(self) -> RunConfig:
        return RunConfig.from_dict(self.config)


def _write_payload(path: Path, arrays: list[np.ndarray]) -> None:
    with open(path, "wb") as f:
        for a in arrays:
            f.write(np.ascontiguousarray(a, dtype=_DTYPE).tobytes())


def _read_payload(path: Path, entries: list[TensorEntry], copies: int = 1) -> list[np.ndarray]:
    if not path.exists():
        raise TruncatedPayloadError(f"{path.name} is missing")
    raw = path.read_bytes()
    expected = copies * sum(e.size for e in entries) * _DTYPE.itemsize
    if len(raw) != expected:
        raise TruncatedPayloadError(
            f"{path.name}: expected {expected} bytes for {len(entries)} tensors, found {len(raw)}"
        )
    flat = np.frombuffer(raw, dtype=_DTYPE)
    arrays, offset = [], 0
    for _ in range(copies):
        for e in entries:
            arrays.append(flat[offset:offset + e.size].reshape(e.shape).copy())
            offset += e.size
    return arrays


def save_checkpoint(path: str | Path, model, optimizer: Optional[OptimizerState] = None,
                    config: Optional[RunConfig | dict] = None,
                    epoch: Optional[int] = None) -> Path:
    """Write `model` (a RelationshipModel) and optional optimizer state to `path`."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    named = list(model.named_parameters())
    entries = [TensorEntry(name, p.shape) for name, p in named]
    if isinstance(config, RunConfig):
        config = config.to_dict()
    manifest = {
        "version": CHECKPOINT_VERSION,
        "entries": [e.to_dict() for e in entries],
        "config": config or {"model": asdict(model.config)},
        "mode": model.mode.value,
        "predicates": list(model.predicates),
        "seed": model.seed,
        "epoch": epoch,
        "optimizer": {"t": optimizer.t} if optimizer is not None else None,
        "vocab": VOCAB_FILE,
    }
    _write_payload(path / PARAMS_FILE, [p.data for _, p in named])
    if optimizer is not None:
        zeros = {name: np.zeros(p.shape) for name, p in named}
        moments = [optimizer.m.get(n, zeros[n]) for n, _ in named] + \
                  [optimizer.v.get(n, zeros[n]) for n, _ in named]
        _write_payload(path / OPTIMIZER_FILE, moments)
    elif (path / OPTIMIZER_FILE).exists():
        (path / OPTIMIZER_FILE).unlink()
    model.vocab.save(path / VOCAB_FILE)
    with open(path / MANIFEST_FILE, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info("Saved checkpoint with %d tensors to %s", len(entries), path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    manifest_path = path / MANIFEST_FILE
    if not manifest_path.exists():
        raise CheckpointError(f"no {MANIFEST_FILE} in {path}")
    with open(manifest_path, encoding="utf-8") as f:
        manifest = json.load(f)
    version = manifest.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint version {version!r} is not supported (expected {CHECKPOINT_VERSION})"
        )
    entries = [TensorEntry.from_dict(e) for e in manifest["entries"]]
    for e in entries:
        if e.dtype != "f32":
            raise CheckpointError(f"{e.name}: unsupported dtype {e.dtype!r}")
    arrays = _read_payload(path / PARAMS_FILE, entries)
    params = {e.name: a for e, a in zip(entries, arrays)}

    optimizer = None
    if manifest.get("optimizer") is not None:
        moments = _read_payload(path / OPTIMIZER_FILE, entries, copies=2)
        n = len(entries)
        optimizer = OptimizerState(
            m={e.name: moments[i] for i, e in enumerate(entries)},
            v={e.name: moments[n + i] for i, e in enumerate(entries)},
            t=int(manifest["optimizer"]["t"]),
        )
    return Checkpoint(
        entries=entries,
        params=params,
        vocab=Vocabulary.load(path / manifest.get("vocab", VOCAB_FILE)),
        config=manifest.get("config") or {},
        mode=manifest["mode"],
        predicates=list(manifest["predicates"]),
        seed=int(manifest.get("seed", 0)),
        epoch=manifest.get("epoch"),
        optimizer=optimizer,
        version=version,
    )


def restore_model(checkpoint: Checkpoint, model=None):
    """Load parameters into `model`, or build a matching RelationshipModel."""
    if model is None:
        from relation_engine.model import RelationshipModel

        model_config = ModelConfig(**checkpoint.config.get("model", {}))
        model = RelationshipModel(model_config, checkpoint.vocab, checkpoint.predicates,
                                  checkpoint.mode, seed=checkpoint.seed)
    own = dict(model.named_parameters())
    for entry in checkpoint.entries:
        if entry.name in own and own[entry.name].shape != entry.shape:
            raise CheckpointShapeError(
                f"{entry.name}: stored shape {entry.shape} != model shape {own[entry.name].shape}"
            )
    missing = [n for n in own if n not in checkpoint.params]
    if missing:
        raise MissingParameterError(f"checkpoint has no parameter {missing[0]!r}")
    model.load_state_dict(checkpoint.params)
    return model
