"""Attention-mask export as 8-bit binary PGM (P5) heatmaps.

For each relation instance of an image, one predicted mask per term and
its box-derived target:

    <image_id>_<instance>_<role>.pgm       round(255 * m)
    <image_id>_<instance>_<role>_gt.pgm    0 or 255
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from relation_engine.dataset import DatasetManifest, ImageRecord, relation_instances
from relation_engine.errors import EvaluationError
from relation_engine.tensor import no_grad

logger = logging.getLogger("relation_engine.export")


def write_pgm(path: str | Path, mask: np.ndarray) -> Path:
    """Write a [0, 1] mask as a P5 image; values are clipped first."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2:
        raise ValueError(f"PGM export needs a 2-D mask, got shape {mask.shape}")
    pixels = np.rint(255.0 * np.clip(mask, 0.0, 1.0)).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())
    return path


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a P5 file written by `write_pgm` back to uint8 (H, W)."""
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM file")
    w, h = (int(v) for v in parts[1].split())
    if int(parts[2]) != 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    pixels = np.frombuffer(parts[3][:w * h], dtype=np.uint8)
    return pixels.reshape(h, w)


def dump_attention(model, manifest: DatasetManifest, record: ImageRecord,
                   out_dir: str | Path) -> list[Path]:
    """Export predicted and target masks for every annotated relation of `record`."""
    if model.mask_attention is None:
        raise EvaluationError("model was built without mask attention")
    out_dir = Path(out_dir)
    written = []
    with no_grad():
        cache = model.image_cache(record)
        for i, instance in enumerate(relation_instances(manifest, record)):
            for term in model.forward(instance, record, cache).terms:
                stem = f"{record.image_id}_{i}_{term.role.value}"
                written.append(write_pgm(out_dir / f"{stem}.pgm", term.mask.numpy()))
                written.append(write_pgm(out_dir / f"{stem}_gt.pgm", term.target))
    logger.info("Wrote %d attention maps for %s to %s", len(written), record.image_id, out_dir)
    return written
