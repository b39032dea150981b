"""Wall-clock accounting for the training and evaluation stages.

Each `Stage` accumulates call count, total and worst-case time, both since
construction (`summary`) and since the last `lap` call. The trainer laps
once per epoch, so its log shows per-epoch timings while `FitResult.profile`
keeps the whole run. Evaluation threads share one profiler, so updates are
serialized.

Usage:
    profiler = StageProfiler()

    with profiler.stage(Stage.FORWARD):
        result = model.forward(instance, record)

    logger.info("Stage timings: %s", profiler.lap())
"""

from __future__ import annotations

import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass
from enum import Enum
from typing import Iterator


class Stage(str, Enum):
    DATA = "data"
    FORWARD = "forward"
    BACKWARD = "backward"
    OPTIMIZER = "optimizer"
    CHECKPOINT = "checkpoint"
    EVAL = "eval"


@dataclass
class StageTiming:
    stage: Stage
    calls: int = 0
    total_s: float = 0.0
    max_s: float = 0.0

    @property
    def mean_ms(self) -> float:
        return 1000.0 * self.total_s / self.calls if self.calls else 0.0

    def add(self, seconds: float) -> None:
        self.calls += 1
        self.total_s += seconds
        self.max_s = max(self.max_s, seconds)

    def to_dict(self, share: float) -> dict:
        return {
            "calls": self.calls,
            "total_s": round(self.total_s, 3),
            "mean_ms": round(self.mean_ms, 3),
            "max_ms": round(1000.0 * self.max_s, 3),
            "share": round(share, 3),
        }


def _render(table: dict[Stage, StageTiming]) -> dict[str, dict]:
    spent = sum(t.total_s for t in table.values())
    return {
        s.value: table[s].to_dict(table[s].total_s / spent if spent > 0 else 0.0)
        for s in Stage if s in table
    }


class StageProfiler:
    """Per-stage timings for a run, with per-epoch laps."""

    def __init__(self):
        self._lock = threading.Lock()
        self._run: dict[Stage, StageTiming] = {}
        self._lap: dict[Stage, StageTiming] = {}

    @contextmanager
    def stage(self, stage: Stage | str) -> Iterator[None]:
        stage = Stage(stage)
        t0 = time.perf_counter()
        try:
            yield
        finally:
            elapsed = time.perf_counter() - t0
            with self._lock:
                for table in (self._run, self._lap):
                    table.setdefault(stage, StageTiming(stage)).add(elapsed)

    def timing(self, stage: Stage | str) -> StageTiming | None:
        return self._run.get(Stage(stage))

    def summary(self) -> dict[str, dict]:
        """Whole-run timings of every stage that ran, in pipeline order."""
        with self._lock:
            return _render(self._run)

    def lap(self) -> dict[str, dict]:
        """Timings since the previous lap; starts a new one."""
        with self._lock:
            current, self._lap = self._lap, {}
        return _render(current)
