"""Split-gain importance and exact interventional Shapley attributions."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..telemetry import TelemetryRecord
from .tree import GbdtModel, iter_splits


def feature_importance(model: GbdtModel) -> dict[str, float]:
    """Total split gain per feature, summed over every tree."""
    totals = [0.0] * len(model.feature_names)
    for tree in model.trees:
        for s in iter_splits(tree):
            totals[s.feature_index] += s.gain
    return dict(zip(model.feature_names, totals))


@dataclass(frozen=True)
class ShapExplanation:
    values: np.ndarray  # one attribution per feature, log-odds units
    base_value: float  # mean raw score over the background
    raw_score: float

    def local_accuracy_error(self) -> float:
        return abs(float(self.values.sum()) + self.base_value - self.raw_score)


def _matrix(rows) -> np.ndarray:
    out = []
    for r in rows:
        out.append(r.features if isinstance(r, TelemetryRecord) else r)
    return np.asarray(out, dtype=float)


def coalition_values(model: GbdtModel, record, background, chunk_rows: int = 200_000) -> np.ndarray:
    """Mean raw score for every feature subset, indexed by bitmask.

    Features whose bit is set come from ``record``; the rest come from each
    background row in turn.
    """
    x = _matrix([record])[0]
    bg = _matrix(background)
    m = len(x)
    masks = np.arange(1 << m)
    bits = ((masks[:, None] >> np.arange(m)) & 1).astype(bool)
    per_chunk = max(1, chunk_rows // len(bg))
    v = np.empty(len(masks))
    for start in range(0, len(masks), per_chunk):
        sel = bits[start : start + per_chunk]
        hybrid = np.where(sel[:, None, :], x[None, None, :], bg[None, :, :])
        scores = model.raw_scores(hybrid.reshape(-1, m)).reshape(len(sel), len(bg))
        v[start : start + len(sel)] = scores.mean(axis=1)
    return v


def shap_values(model: GbdtModel, record, background) -> ShapExplanation:
    """Exact Shapley values on the log-odds scale by full subset enumeration.

    Cost is 2**n_features * len(background) tree evaluations, which is cheap
    for the ten telemetry features.
    """
    if len(background) == 0:
        raise ValueError("background must contain at least one row")
    x = _matrix([record])[0]
    m = len(x)
    v = coalition_values(model, x, background)
    masks = np.arange(1 << m)
    size = np.array([bin(k).count("1") for k in masks])
    weight = np.array(
        [math.factorial(s) * math.factorial(m - s - 1) / math.factorial(m) if s < m else 0.0 for s in size]
    )
    phi = np.zeros(m)
    for i in range(m):
        without = masks[(masks >> i) & 1 == 0]
        phi[i] = float(np.sum(weight[without] * (v[without | (1 << i)] - v[without])))
    return ShapExplanation(phi, float(v[0]), float(model.raw_score(x)))
