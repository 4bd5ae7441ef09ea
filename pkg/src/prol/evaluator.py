"""Inference, the task-accuracy ledger, FAA/CAA/FFM and wall-clock accounting."""

from __future__ import annotations

import csv
import json
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError


def predict(learner, x) -> np.ndarray:
    """Top-1 key match, prompt from the matched class, argmax over registered logits."""
    x = np.asarray(x, dtype=np.float32)
    single = x.ndim == 3
    out = learner.predict(x[None] if single else x)
    return out[0] if single else out


def accuracy(learner, x, y, batch_size: int = 256) -> float:
    if len(y) == 0:
        raise ContractError("cannot score an empty test set")
    correct = 0
    for start in range(0, len(y), batch_size):
        correct += int((learner.predict(x[start:start + batch_size]) == y[start:start + batch_size]).sum())
    return 100.0 * correct / len(y)


class MetricsLedger:
    """Lower-triangular accuracy matrix: ``A[i][t]`` is accuracy (%) on task i after task t (1-based)."""

    def __init__(self, T: int):
        if T < 1:
            raise ContractError("ledger needs T >= 1")
        self.T = T
        self.A = np.full((T, T), np.nan)

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]]) -> "MetricsLedger":
        """Build from columns given as rows-after-task: ``rows[t-1]`` holds A[1..t][t]."""
        ledger = cls(len(rows))
        for t, row in enumerate(rows, start=1):
            ledger.record(t, row)
        return ledger

    def record(self, t: int, row: Sequence[float]) -> None:
        if not 1 <= t <= self.T or len(row) != t:
            raise ContractError(f"after task {t} the ledger expects {t} accuracies, got {len(row)}")
        for i, acc in enumerate(row):
            if not 0.0 <= acc <= 100.0:
                raise ContractError(f"accuracy {acc} outside [0, 100]")
            self.A[i, t - 1] = acc

    def get(self, i: int, t: int) -> float:
        return float(self.A[i - 1, t - 1])

    @property
    def completed(self) -> int:
        """Number of leading task columns that are fully populated."""
        n = 0
        for t in range(1, self.T + 1):
            if np.isnan(self.A[:t, t - 1]).any():
                break
            n = t
        return n

    def aa(self, t: int) -> float:
        col = self.A[:t, t - 1]
        if np.isnan(col).any():
            raise ContractError(f"ledger column {t} is incomplete")
        return float(col.mean())

    def aa_curve(self) -> list[float]:
        return [self.aa(t) for t in range(1, self.completed + 1)]

    def forgetting_at(self, t: int) -> float:
        """Forgetting measure evaluated as if ``t`` were the final task."""
        if t < 2:
            return 0.0
        return float(np.mean([np.max(self.A[i, i:t - 1]) - self.A[i, t - 1] for i in range(t - 1)]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["task_i", "after_t", "accuracy"])
            for t in range(1, self.T + 1):
                for i in range(1, t + 1):
                    if not np.isnan(self.A[i - 1, t - 1]):
                        w.writerow([i, t, repr(float(self.A[i - 1, t - 1]))])

    @classmethod
    def from_csv(cls, path, T: int | None = None) -> "MetricsLedger":
        with open(path, newline="") as fh:
            rows = [(int(r["task_i"]), int(r["after_t"]), float(r["accuracy"])) for r in csv.DictReader(fh)]
        ledger = cls(T or max(t for _, t, _ in rows))
        for i, t, acc in rows:
            ledger.A[i - 1, t - 1] = acc
        return ledger


def _require_complete(ledger: MetricsLedger) -> None:
    if ledger.completed != ledger.T:
        raise ContractError(f"ledger incomplete: only {ledger.completed} of {ledger.T} task columns present")


def faa(ledger: MetricsLedger) -> float:
    _require_complete(ledger)
    return ledger.aa(ledger.T)


def caa(ledger: MetricsLedger) -> float:
    _require_complete(ledger)
    return float(np.mean([ledger.aa(t) for t in range(1, ledger.T + 1)]))


def ffm(ledger: MetricsLedger) -> float:
    """Mean over tasks 1..T-1 of (best accuracy before the last task) - (final accuracy).

    The max runs over t in 1..T-1 where A[i][t] exists, so the value may be negative.
    """
    _require_complete(ledger)
    if ledger.T < 2:
        raise ContractError("forgetting needs at least two tasks")
    return ledger.forgetting_at(ledger.T)


def metrics(ledger: MetricsLedger) -> dict:
    out = {"FAA": faa(ledger), "CAA": caa(ledger), "AA": ledger.aa_curve()}
    out["FFM"] = ffm(ledger) if ledger.T >= 2 else None
    return out


def evaluate_after_task(learner, t: int, test_sets: Sequence, ledger: MetricsLedger | None = None) -> list[float]:
    """Accuracy (%) on each of the test sets of tasks 1..t; records into ``ledger`` when given."""
    if len(test_sets) < t or any(ts is None for ts in test_sets[:t]):
        raise ContractError(f"test sets for tasks 1..{t} are required")
    if all(len(ts[1]) == 0 for ts in test_sets[:t]):
        raise ContractError("all test sets are empty")
    row = [accuracy(learner, x, y) for x, y in test_sets[:t]]
    if ledger is not None:
        ledger.record(t, row)
    return row


@dataclass
class TimingRecord:
    task: int
    samples: int = 0
    train_seconds: float = 0.0
    inference_seconds: float = 0.0

    @property
    def throughput(self) -> float:
        return self.samples / self.train_seconds if self.train_seconds > 0 else float("nan")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["throughput"] = self.throughput
        return d


@dataclass
class RunTimer:
    """Disjoint training and inference stopwatches per task (monotonic clock)."""

    records: list = field(default_factory=list)

    def record_for(self, task: int) -> TimingRecord:
        for r in self.records:
            if r.task == task:
                return r
        r = TimingRecord(task)
        self.records.append(r)
        return r

    @contextmanager
    def training(self, task: int):
        rec = self.record_for(task)
        start = time.perf_counter()
        try:
            yield rec
        finally:
            rec.train_seconds += time.perf_counter() - start

    @contextmanager
    def inference(self, task: int):
        rec = self.record_for(task)
        start = time.perf_counter()
        try:
            yield rec
        finally:
            rec.inference_seconds += time.perf_counter() - start

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps([r.to_dict() for r in self.records], indent=1))
