"""Boosted-tree anomaly classifier."""

from .boosting import TrainingError, best_split, boost, log_loss, split_gain, train
from .explain import ShapExplanation, feature_importance, shap_values
from .metrics import LatencyStats, Metrics, evaluate, measure_inference_latency, metrics_from_counts
from .tree import (
    GbdtModel,
    GbdtParams,
    InputError,
    Leaf,
    Split,
    TreeNode,
    classify,
    predict_proba,
)

__all__ = [
    "GbdtModel",
    "GbdtParams",
    "InputError",
    "LatencyStats",
    "Leaf",
    "Metrics",
    "ShapExplanation",
    "Split",
    "TrainingError",
    "TreeNode",
    "best_split",
    "boost",
    "classify",
    "evaluate",
    "feature_importance",
    "log_loss",
    "measure_inference_latency",
    "metrics_from_counts",
    "predict_proba",
    "shap_values",
    "split_gain",
    "train",
]
