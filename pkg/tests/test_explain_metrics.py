import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgemon.gbdt import (
    GbdtModel,
    GbdtParams,
    Leaf,
    Split,
    evaluate,
    feature_importance,
    measure_inference_latency,
    metrics_from_counts,
    shap_values,
    train,
)
from edgemon.gbdt.tree import iter_splits
from edgemon.telemetry import FEATURES

from conftest import make_dataset, random_dataset
from oracles import confusion


def _random_tree(rng, d):
    if d == 0 or rng.random() < 0.2:
        return Leaf(float(rng.normal()))
    return Split(int(rng.integers(10)), float(rng.normal()), _random_tree(rng, d - 1), _random_tree(rng, d - 1), 1.0)


def _random_model(rng):
    trees = [_random_tree(rng, int(rng.integers(1, 4))) for _ in range(int(rng.integers(1, 6)))]
    return GbdtModel(trees, float(rng.uniform(0.05, 1.0)), float(rng.normal()))


# --------------------------------------------------------------- importance


def test_importance_single_stump():
    m = GbdtModel([Split(3, 0.0, Leaf(-1), Leaf(1), 2.5)], 0.1, 0.0)
    imp = feature_importance(m)
    assert imp[FEATURES[3]] == 2.5
    assert all(v == 0 for f, v in imp.items() if f != FEATURES[3])


def test_constant_feature_has_zero_importance():
    rng = np.random.default_rng(2)
    ds = random_dataset(rng, 200, n_features_used=6)  # features 6..9 constant zero
    model = train(ds, GbdtParams(num_trees=10, max_depth=3, min_samples_leaf=5))
    imp = feature_importance(model)
    for f in FEATURES[6:]:
        assert imp[f] == 0.0


def test_importance_completeness(default_model):
    imp = feature_importance(default_model)
    total = math.fsum(s.gain for t in default_model.trees for s in iter_splits(t))
    assert math.fsum(imp.values()) == pytest.approx(total, rel=1e-12)
    unused = {FEATURES[s.feature_index] for t in default_model.trees for s in iter_splits(t)}
    for f, v in imp.items():
        assert (v == 0.0) == (f not in unused)


# ------------------------------------------------------------------ shapley


def test_shap_zero_trees():
    m = GbdtModel([], 0.1, 0.3)
    e = shap_values(m, [1.0] * 10, [[0.0] * 10])
    assert np.all(e.values == 0) and e.base_value == 0.3


def test_shap_single_stump_closed_form():
    lr, k = 0.5, 4
    m = GbdtModel([Split(k, 10.0, Leaf(-2.0), Leaf(3.0), 1.0)], lr, 0.1)
    rng = np.random.default_rng(0)
    bg = rng.uniform(0, 5, size=(20, 10))  # all left of the threshold
    x = rng.uniform(0, 5, size=10)
    x[k] = 50.0
    e = shap_values(m, x, bg)
    assert e.values[k] == pytest.approx(lr * (3.0 - -2.0), abs=1e-12)
    assert np.all(np.delete(e.values, k) == 0)
    assert e.base_value == pytest.approx(0.1 + lr * -2.0)


def test_shap_empty_background():
    with pytest.raises(ValueError):
        shap_values(GbdtModel([], 0.1, 0.0), [0.0] * 10, [])


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_shap_local_accuracy(seed):
    rng = np.random.default_rng(seed)
    m = _random_model(rng)
    bg = rng.normal(size=(int(rng.integers(1, 8)), 10))
    x = rng.normal(size=10)
    e = shap_values(m, x, bg)
    assert e.local_accuracy_error() < 1e-9
    assert e.raw_score == pytest.approx(m.raw_score(x.tolist()), abs=1e-12)


def test_shap_symmetry_for_identical_columns():
    rng = np.random.default_rng(3)
    m = GbdtModel([Split(1, 0.0, Leaf(-1), Leaf(1), 1.0), Split(2, 0.0, Leaf(-1), Leaf(1), 1.0)], 1.0, 0.0)
    bg = rng.normal(size=(6, 10))
    bg[:, 2] = bg[:, 1]
    x = rng.normal(size=10)
    x[2] = x[1] = 1.0
    e = shap_values(m, x, bg)
    assert abs(e.values[1] - e.values[2]) < 1e-9


def test_shap_on_default_model(default_model, test_set):
    bg = test_set.features[:30]
    e = shap_values(default_model, test_set[100], bg)
    assert e.local_accuracy_error() < 1e-9


# ------------------------------------------------------------------ metrics


def test_metrics_hand_computed():
    m = metrics_from_counts(tp=1, fp=1, tn=5, fn=0)
    assert (m.precision, m.recall) == (0.5, 1.0)
    assert m.f1 == pytest.approx(2 / 3)


def test_metrics_undefined_precision_flagged():
    m = metrics_from_counts(0, 0, 10, 2)
    assert m.precision == 0.0 and not m.precision_defined
    assert m.recall == 0.0 and m.recall_defined


def test_all_correct_predictions():
    x = np.zeros((10, 10))
    x[5:, 0] = 10.0
    y = [0] * 5 + [1] * 5
    m = GbdtModel([Split(0, 5.0, Leaf(-5.0), Leaf(5.0), 1.0)], 1.0, 0.0)
    r = evaluate(m, make_dataset(x, y))
    assert (r.precision, r.recall, r.f1) == (1.0, 1.0, 1.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), thr=st.floats(0.05, 0.95))
def test_evaluate_matches_confusion_oracle(seed, thr):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, 60)
    m = _random_model(rng)
    r = evaluate(m, ds, thr)
    pred = [1 / (1 + math.exp(-m.raw_score(list(x)))) >= thr for x in ds.features]
    assert (r.tp, r.fp, r.tn, r.fn) == confusion(pred, list(ds.labels == 1))
    if r.precision_defined and r.recall_defined and r.precision + r.recall > 0:
        assert r.f1 == pytest.approx(2 * r.precision * r.recall / (r.precision + r.recall))


def test_evaluate_empty():
    with pytest.raises(ValueError):
        evaluate(GbdtModel([], 0.1, 0.0), make_dataset(np.zeros((0, 10))))


# ------------------------------------------------------------------ latency


def test_latency_rejects_zero_repetitions(default_model, test_set):
    with pytest.raises(ValueError):
        measure_inference_latency(default_model, test_set, repetitions=0)


def test_latency_stub_timer_constant():
    ticks = iter(range(0, 10**6, 3))
    m = GbdtModel([], 0.1, 0.0)
    ds = make_dataset(np.zeros((50, 10)))
    stats = measure_inference_latency(m, ds, repetitions=2, timer=lambda: next(ticks) * 1.0)
    assert stats.count == 100
    assert stats.mean == 3.0 and stats.std == 0.0 and stats.p50 == 3.0 and stats.p99 == 3.0


def test_latency_csv(tmp_path):
    m = GbdtModel([], 0.1, 0.0)
    stats = measure_inference_latency(m, make_dataset(np.zeros((5, 10))))
    stats.write_csv(tmp_path / "l.csv")
    assert (tmp_path / "l.csv").read_text().splitlines()[0] == "mean,std,p50,p99,count"
