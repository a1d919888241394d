"""Tree and ensemble data structures, prediction and model files."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from ..telemetry import FEATURES, N_FEATURES, TelemetryRecord

MODEL_FORMAT = "edgemon-gbdt"
MODEL_VERSION = 1


class InputError(ValueError):
    pass


@dataclass(frozen=True)
class Leaf:
    value: float


@dataclass(frozen=True)
class Split:
    feature_index: int
    threshold: float
    left: "TreeNode"
    right: "TreeNode"
    gain: float


TreeNode = Union[Split, Leaf]


@dataclass(frozen=True)
class GbdtParams:
    num_trees: int = 100
    max_depth: int = 4
    min_samples_leaf: int = 20
    learning_rate: float = 0.1
    min_gain_to_split: float = 1e-6

    def __post_init__(self):
        if self.num_trees < 1 or self.max_depth < 1 or self.min_samples_leaf < 1:
            raise ValueError(f"num_trees, max_depth and min_samples_leaf must be >= 1: {self}")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError(f"learning_rate must be in (0, 1], got {self.learning_rate}")
        if self.min_gain_to_split <= 0:
            raise ValueError("min_gain_to_split must be positive")


def depth(node: TreeNode) -> int:
    if isinstance(node, Leaf):
        return 0
    return 1 + max(depth(node.left), depth(node.right))


def iter_splits(node: TreeNode):
    stack = [node]
    while stack:
        n = stack.pop()
        if isinstance(n, Split):
            yield n
            stack.append(n.right)
            stack.append(n.left)


def _eval_tree(node: TreeNode, x: Sequence[float]) -> float:
    while isinstance(node, Split):
        node = node.left if x[node.feature_index] <= node.threshold else node.right
    return node.value


class _FlatTree:
    """Array form of a tree for vectorised batch scoring."""

    def __init__(self, root: TreeNode):
        feat, thr, left, right, value = [], [], [], [], []

        def visit(n: TreeNode) -> int:
            i = len(feat)
            feat.append(-1)
            thr.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(0.0)
            if isinstance(n, Leaf):
                value[i] = n.value
            else:
                feat[i] = n.feature_index
                thr[i] = n.threshold
                left[i] = visit(n.left)
                right[i] = visit(n.right)
            return i

        visit(root)
        self.feat = np.array(feat)
        self.thr = np.array(thr)
        self.left = np.array(left)
        self.right = np.array(right)
        self.value = np.array(value)
        self.depth = depth(root)

    def predict(self, X: np.ndarray) -> np.ndarray:
        idx = np.zeros(len(X), dtype=np.intp)
        rows = np.arange(len(X))
        for _ in range(self.depth):
            f = self.feat[idx]
            inner = f >= 0
            if not inner.any():
                break
            go_left = X[rows, np.where(inner, f, 0)] <= self.thr[idx]
            nxt = np.where(go_left, self.left[idx], self.right[idx])
            idx = np.where(inner, nxt, idx)
        return self.value[idx]


# keeps probabilities strictly inside (0, 1) once |raw score| exceeds ~37
_P_MIN = 5e-324
_P_MAX = 1.0 - 2.0**-53


def sigmoid(z):
    p = 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))
    return np.clip(p, _P_MIN, _P_MAX)


def _sigmoid_scalar(z: float) -> float:
    if z >= 0:
        p = 1.0 / (1.0 + math.exp(-z))
    else:
        e = math.exp(z)
        p = e / (1.0 + e)
    return min(max(p, _P_MIN), _P_MAX)


@dataclass
class GbdtModel:
    """Additive ensemble of regression trees on the log-odds scale."""

    trees: list[TreeNode]
    learning_rate: float
    base_score: float
    feature_names: tuple[str, ...] = FEATURES
    params: GbdtParams | None = None
    train_loss: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.feature_names = tuple(self.feature_names)
        self._flat: list[_FlatTree] | None = None

    def _flat_trees(self) -> list[_FlatTree]:
        if self._flat is None or len(self._flat) != len(self.trees):
            self._flat = [_FlatTree(t) for t in self.trees]
        return self._flat

    def raw_score(self, x: Sequence[float]) -> float:
        total = 0.0
        for t in self.trees:
            total += _eval_tree(t, x)
        return self.base_score + self.learning_rate * total

    def raw_scores(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != len(self.feature_names):
            raise InputError(f"expected (n, {len(self.feature_names)}) features, got {X.shape}")
        acc = np.zeros(len(X))
        for ft in self._flat_trees():
            acc += ft.predict(X)
        return self.base_score + self.learning_rate * acc

    def predict_proba_batch(self, X) -> np.ndarray:
        return sigmoid(self.raw_scores(X))

    # serialization -------------------------------------------------------

    def to_json(self) -> str:
        doc = {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "feature_names": list(self.feature_names),
            "learning_rate": self.learning_rate,
            "base_score": self.base_score,
            "params": asdict(self.params) if self.params else None,
            "train_loss": list(self.train_loss),
            "trees": [_node_to_obj(t) for t in self.trees],
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "GbdtModel":
        doc = json.loads(text)
        if doc.get("format") != MODEL_FORMAT:
            raise ValueError("not a gbdt model file")
        if doc.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported model version {doc.get('version')}")
        params = GbdtParams(**doc["params"]) if doc["params"] else None
        return cls(
            trees=[_node_from_obj(o) for o in doc["trees"]],
            learning_rate=doc["learning_rate"],
            base_score=doc["base_score"],
            feature_names=tuple(doc["feature_names"]),
            params=params,
            train_loss=doc["train_loss"],
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "GbdtModel":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _node_to_obj(n: TreeNode) -> dict:
    if isinstance(n, Leaf):
        return {"leaf": n.value}
    return {
        "feature": n.feature_index,
        "threshold": n.threshold,
        "gain": n.gain,
        "left": _node_to_obj(n.left),
        "right": _node_to_obj(n.right),
    }


def _node_from_obj(o: dict) -> TreeNode:
    if "leaf" in o:
        return Leaf(float(o["leaf"]))
    return Split(
        int(o["feature"]),
        float(o["threshold"]),
        _node_from_obj(o["left"]),
        _node_from_obj(o["right"]),
        float(o["gain"]),
    )


def _as_vector(record) -> Sequence[float]:
    x = record.features if isinstance(record, TelemetryRecord) else record
    if len(x) != N_FEATURES:
        raise InputError(f"expected {N_FEATURES} features, got {len(x)}")
    return x


def predict_proba(model: GbdtModel, record) -> float:
    """Anomaly probability for one record (or a bare 10-value vector)."""
    return _sigmoid_scalar(model.raw_score(_as_vector(record)))


def classify(model: GbdtModel, record, threshold: float = 0.5) -> int:
    return int(predict_proba(model, record) >= threshold)
