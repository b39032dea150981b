"""Per-step training records, written as JSON lines.

One line per optimizer step:
    {"step": 1, "epoch": 0, "lr": 2.5e-06, "loss_cls": 1.94, "loss_mask": 0.31, "loss_total": 2.25}

Usage:
    log = TrainingLog()
    log.add_step(StepRecord(step=1, epoch=0, lr=2.5e-6, loss_cls=1.9, loss_mask=0.3))
    log.save("run/train_log.jsonl")
    curve = TrainingLog.load("run/train_log.jsonl").losses()
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np


@dataclass
class StepRecord:
    step: int
    epoch: int
    lr: float
    loss_cls: float
    loss_mask: float = 0.0
    loss_total: float = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.loss_total is None:
            self.loss_total = self.loss_cls + self.loss_mask

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> StepRecord:
        return cls(
            step=int(data["step"]),
            epoch=int(data["epoch"]),
            lr=float(data["lr"]),
            loss_cls=float(data["loss_cls"]),
            loss_mask=float(data.get("loss_mask", 0.0)),
            loss_total=float(data["loss_total"]),
        )


class TrainingLog:
    """Ordered step records; optionally streamed to a file as they arrive."""

    def __init__(self, records: Optional[list[StepRecord]] = None,
                 stream: Optional[str | Path] = None):
        self._records: list[StepRecord] = list(records or [])
        self._stream = Path(stream) if stream else None
        if self._stream:
            self._stream.parent.mkdir(parents=True, exist_ok=True)
            self._stream.write_text("")

    def add_step(self, record: StepRecord) -> None:
        self._records.append(record)
        if self._stream:
            with open(self._stream, "a", encoding="utf-8") as f:
                f.write(json.dumps(record.to_dict()) + "\n")

    @property
    def records(self) -> list[StepRecord]:
        return list(self._records)

    def __len__(self) -> int:
        return len(self._records)

    def losses(self, key: str = "loss_total") -> np.ndarray:
        return np.array([getattr(r, key) for r in self._records], dtype=np.float64)

    def epoch_summary(self) -> dict[int, dict[str, float]]:
        """Mean losses per epoch."""
        epochs: dict[int, list[StepRecord]] = {}
        for r in self._records:
            epochs.setdefault(r.epoch, []).append(r)
        return {
            epoch: {
                "steps": len(rs),
                "loss_cls": float(np.mean([r.loss_cls for r in rs])),
                "loss_mask": float(np.mean([r.loss_mask for r in rs])),
                "loss_total": float(np.mean([r.loss_total for r in rs])),
            }
            for epoch, rs in epochs.items()
        }

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for r in self._records:
                f.write(json.dumps(r.to_dict()) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> TrainingLog:
        records = []
        with open(path, encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    records.append(StepRecord.from_dict(json.loads(line)))
        return cls(records)
