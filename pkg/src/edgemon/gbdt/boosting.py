"""Gradient boosting on logistic loss with exact greedy split search."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from ..telemetry import FEATURES, Dataset
from .tree import GbdtModel, GbdtParams, Leaf, Split, TreeNode, _FlatTree, sigmoid

# relative tolerance under which two split gains count as tied
GAIN_TIE_RTOL = 1e-9
_HESS_EPS = 1e-12
MAX_BACKTRACKS = 40


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class SplitCandidate:
    feature_index: int
    threshold: float
    gain: float


def split_gain(g_left: float, h_left: float, g_right: float, h_right: float) -> float:
    """Second-order loss reduction of splitting a node into two children."""
    g, h = g_left + g_right, h_left + h_right
    return 0.5 * (
        g_left**2 / (h_left + _HESS_EPS)
        + g_right**2 / (h_right + _HESS_EPS)
        - g**2 / (h + _HESS_EPS)
    )


def leaf_value(g_sum: float, h_sum: float) -> float:
    return -g_sum / (h_sum + _HESS_EPS)


def best_split(
    X: np.ndarray, g: np.ndarray, h: np.ndarray, orders: list[np.ndarray], min_samples_leaf: int
) -> SplitCandidate | None:
    """Exact greedy search over midpoints between consecutive distinct values.

    ``orders[j]`` lists the node's rows sorted by feature ``j``. Ties within
    ``GAIN_TIE_RTOL`` go to the lowest feature index, then the lowest threshold.
    """
    per_feature = []
    best = -math.inf
    for j, order in enumerate(orders):
        n = len(order)
        if n < 2 * min_samples_leaf:
            per_feature.append(None)
            continue
        xs = X[order, j]
        gl = np.cumsum(g[order])[:-1]
        hl = np.cumsum(h[order])[:-1]
        gt, ht = gl[-1] + g[order[-1]], hl[-1] + h[order[-1]]
        pos = np.arange(1, n)  # left child size
        valid = (xs[:-1] < xs[1:]) & (pos >= min_samples_leaf) & (n - pos >= min_samples_leaf)
        if not valid.any():
            per_feature.append(None)
            continue
        gr, hr = gt - gl, ht - hl
        gains = 0.5 * (
            gl**2 / (hl + _HESS_EPS) + gr**2 / (hr + _HESS_EPS) - gt**2 / (ht + _HESS_EPS)
        )
        gains = np.where(valid, gains, -np.inf)
        per_feature.append((xs, gains))
        best = max(best, float(gains.max()))
    if best == -math.inf:
        return None
    floor = best - GAIN_TIE_RTOL * max(1.0, abs(best))
    for j, entry in enumerate(per_feature):
        if entry is None:
            continue
        xs, gains = entry
        hits = np.flatnonzero(gains >= floor)
        if len(hits):
            i = hits[0]
            return SplitCandidate(j, 0.5 * (xs[i] + xs[i + 1]), float(gains[i]))
    return None  # pragma: no cover


def build_tree(
    X: np.ndarray,
    g: np.ndarray,
    h: np.ndarray,
    orders: list[np.ndarray],
    params: GbdtParams,
    level: int = 0,
) -> TreeNode:
    rows = orders[0]
    g_sum, h_sum = float(g[rows].sum()), float(h[rows].sum())
    if level < params.max_depth:
        cand = best_split(X, g, h, orders, params.min_samples_leaf)
        if cand is not None and cand.gain > params.min_gain_to_split:
            goes_left = X[:, cand.feature_index] <= cand.threshold
            left = [o[goes_left[o]] for o in orders]
            right = [o[~goes_left[o]] for o in orders]
            return Split(
                cand.feature_index,
                float(cand.threshold),
                build_tree(X, g, h, left, params, level + 1),
                build_tree(X, g, h, right, params, level + 1),
                max(cand.gain, 0.0),
            )
    return Leaf(leaf_value(g_sum, h_sum))


def _scale(node: TreeNode, factor: float) -> TreeNode:
    if isinstance(node, Leaf):
        return Leaf(node.value * factor)
    return Split(
        node.feature_index,
        node.threshold,
        _scale(node.left, factor),
        _scale(node.right, factor),
        node.gain,
    )


def log_loss(y: np.ndarray, raw: np.ndarray) -> float:
    """Mean logistic loss computed stably from log-odds."""
    # log(1 + e^z) - y z
    return float(np.mean(np.logaddexp(0.0, raw) - y * raw))


def _xy(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, Dataset):
        return data.features, data.labels.astype(float)
    X, y = data
    return np.asarray(X, dtype=float), np.asarray(y, dtype=float)


def boost(data, params: GbdtParams, seed: int = 0) -> Iterator[GbdtModel]:
    """Yield the model after each boosting round.

    Each round fits a tree to the Newton step of the logistic loss. If the
    shrunken tree would raise training loss, its leaf values are halved until
    it does not, so the recorded loss curve never increases.

    ``seed`` is accepted for interface stability; exact greedy boosting
    without subsampling has no random choices.
    """
    del seed
    X, y = _xy(data)
    if len(y) == 0:
        raise TrainingError("empty training set")
    pos = float(y.sum())
    if pos == 0 or pos == len(y):
        raise TrainingError("training data must contain both classes")
    base = math.log(pos / (len(y) - pos))
    orders = [np.argsort(X[:, j], kind="stable") for j in range(X.shape[1])]
    raw = np.full(len(y), base)
    model = GbdtModel([], params.learning_rate, base, FEATURES[: X.shape[1]], params, [])
    loss = log_loss(y, raw)
    for _ in range(params.num_trees):
        p = sigmoid(raw)
        g = p - y
        h = p * (1.0 - p)
        tree = build_tree(X, g, h, orders, params)
        step = params.learning_rate * _FlatTree(tree).predict(X)
        new_loss = log_loss(y, raw + step)
        k = 0
        while new_loss > loss and k < MAX_BACKTRACKS:
            k += 1
            tree = _scale(tree, 0.5)
            step = params.learning_rate * _FlatTree(tree).predict(X)
            new_loss = log_loss(y, raw + step)
        if new_loss > loss:
            tree, step, new_loss = _scale(tree, 0.0), np.zeros_like(step), loss
        raw = raw + step
        loss = new_loss
        model.trees.append(tree)
        model.train_loss.append(loss)
        yield model


def train(data, params: GbdtParams | None = None, seed: int = 0) -> GbdtModel:
    """Fit a boosted-tree anomaly classifier.

    Args:
        data: a labelled ``Dataset`` or an ``(X, y)`` pair.
        params: ensemble hyperparameters; defaults to ``GbdtParams()``.

    Raises:
        TrainingError: empty or single-class training data.
    """
    params = params or GbdtParams()
    model = None
    for model in boost(data, params, seed):
        pass
    return model
