"""Detection metrics and inference timing."""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from ..telemetry import Dataset
from .tree import GbdtModel, predict_proba


@dataclass(frozen=True)
class Metrics:
    tp: int
    fp: int
    tn: int
    fn: int
    precision: float
    recall: float
    f1: float
    precision_defined: bool = True
    recall_defined: bool = True


def metrics_from_counts(tp: int, fp: int, tn: int, fn: int) -> Metrics:
    """Precision, recall and F1 from a confusion matrix.

    An undefined ratio (zero denominator) is reported as 0 and flagged.
    """
    p_def = tp + fp > 0
    r_def = tp + fn > 0
    precision = tp / (tp + fp) if p_def else 0.0
    recall = tp / (tp + fn) if r_def else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return Metrics(tp, fp, tn, fn, precision, recall, f1, p_def, r_def)


def evaluate(model: GbdtModel, dataset: Dataset, threshold: float = 0.5) -> Metrics:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = model.predict_proba_batch(dataset.features) >= threshold
    truth = dataset.labels == 1
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    tn = int(np.sum(~pred & ~truth))
    return metrics_from_counts(tp, fp, tn, fn)


@dataclass(frozen=True)
class LatencyStats:
    mean: float
    std: float
    p50: float
    p99: float
    count: int

    def write_csv(self, path: str | Path) -> None:
        row = asdict(self)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(row), lineterminator="\n")
            w.writeheader()
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def measure_inference_latency(
    model: GbdtModel,
    dataset: Dataset,
    repetitions: int = 1,
    timer: Callable[[], float] = time.perf_counter,
    warmup: int = 100,
) -> LatencyStats:
    """Wall-clock seconds per single-record ``predict_proba`` call.

    The first ``warmup`` records are scored once untimed, then every record
    is timed ``repetitions`` times.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    rows = [tuple(r) for r in dataset.features.tolist()]
    for x in rows[:warmup]:
        predict_proba(model, x)
    samples = []
    for _ in range(repetitions):
        for x in rows:
            t0 = timer()
            predict_proba(model, x)
            samples.append(timer() - t0)
    arr = np.asarray(samples)
    return LatencyStats(
        mean=float(arr.mean()),
        std=statistics.pstdev(samples) if len(samples) > 1 else 0.0,
        p50=float(np.quantile(arr, 0.5)),
        p99=float(np.quantile(arr, 0.99)),
        count=len(samples),
    )
