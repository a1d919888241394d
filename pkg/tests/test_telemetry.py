import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgemon.telemetry import (
    FEATURES,
    REFERENCE_STATS,
    DEFAULT_INJECTION_VALUES,
    AnomalySpec,
    Collective,
    Dataset,
    DomainError,
    FeatureSummary,
    ParseError,
    SchemaError,
    Sparse,
    TelemetryRecord,
    constant_features,
    generate_synthetic,
    inject_collective,
    inject_sparse,
    load_anomaly_spec,
    load_csv,
    save_anomaly_spec,
    summarize,
    write_csv,
)

from conftest import make_dataset


def _write(path, header, rows):
    lines = [",".join(header)] + [",".join(str(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


# ------------------------------------------------------------------ schema


def test_record_rejects_wrong_arity_and_label():
    with pytest.raises(DomainError):
        TelemetryRecord(0, (1.0,) * 9)
    with pytest.raises(DomainError):
        TelemetryRecord(0, (1.0,) * 10, label=2)


def test_dataset_requires_increasing_timestamps():
    with pytest.raises(DomainError):
        Dataset([0, 0], np.zeros((2, 10)))


def test_dataset_is_read_only():
    ds = make_dataset(np.zeros((2, 10)))
    with pytest.raises(ValueError):
        ds.features[0, 0] = 1.0


# --------------------------------------------------------------------- csv


def test_load_three_rows_default_labels(tmp_path):
    rows = [[i * 1000] + [float(i + j) for j in range(10)] for i in range(3)]
    p = _write(tmp_path / "a.csv", ["timestamp_ms", *FEATURES], rows)
    ds = load_csv(p)
    assert len(ds) == 3
    assert list(ds.labels) == [0, 0, 0]
    assert ds[2].features == tuple(float(2 + j) for j in range(10))


def test_load_is_order_insensitive(tmp_path):
    order = list(reversed(FEATURES))
    p = _write(tmp_path / "a.csv", [*order, "label"], [[float(j) for j in range(10)] + [1]])
    ds = load_csv(p)
    assert ds[0].features == tuple(float(9 - j) for j in range(10))
    assert ds[0].label == 1


def test_short_row_is_parse_error_with_line(tmp_path):
    rows = [[0] + [1.0] * 10, [1000] + [1.0] * 9]
    p = _write(tmp_path / "a.csv", ["timestamp_ms", *FEATURES], rows)
    with pytest.raises(ParseError) as err:
        load_csv(p)
    assert err.value.line == 3


def test_non_numeric_is_parse_error(tmp_path):
    p = _write(tmp_path / "a.csv", FEATURES, [["x"] + [1.0] * 9])
    with pytest.raises(ParseError) as err:
        load_csv(p)
    assert err.value.line == 2


def test_unknown_column_named_in_schema_error(tmp_path):
    p = _write(tmp_path / "a.csv", [*FEATURES, "rpm"], [[1.0] * 11])
    with pytest.raises(SchemaError, match="rpm"):
        load_csv(p)


def test_missing_feature_is_schema_error(tmp_path):
    p = _write(tmp_path / "a.csv", FEATURES[:-1], [[1.0] * 9])
    with pytest.raises(SchemaError, match="time_since_engine_start"):
        load_csv(p)


def test_csv_round_trip(tmp_path):
    ds = inject_sparse(generate_synthetic(REFERENCE_STATS, 50, seed=3), AnomalySpec(Sparse(0.1), seed=1))
    write_csv(ds, tmp_path / "d.csv")
    assert load_csv(tmp_path / "d.csv") == ds


def test_constant_columns_reported(tmp_path, caplog):
    x = np.zeros((3, 10))
    x[:, 0] = [1, 2, 3]
    ds = make_dataset(x)
    assert constant_features(ds) == list(FEATURES[1:])
    write_csv(ds, tmp_path / "c.csv")
    with caplog.at_level("WARNING"):
        load_csv(tmp_path / "c.csv")
    assert "constant" in caplog.text


# --------------------------------------------------------------- summarize


def test_summarize_identical_rows():
    ds = make_dataset(np.tile(np.arange(10.0), (5, 1)))
    for j, f in enumerate(FEATURES):
        s = summarize(ds)[f]
        assert s.std == 0
        assert s.min == s.q25 == s.median == s.q75 == s.max == j


def test_summarize_hand_computed():
    x = np.zeros((4, 10))
    x[:, 0] = [1, 2, 3, 4]
    s = summarize(make_dataset(x))[FEATURES[0]]
    assert s.mean == 2.5 and s.median == 2.5
    # linear interpolation: position 0.75 and 2.25 between order statistics
    assert s.q25 == 1.75 and s.q75 == 3.25
    assert s.std == pytest.approx(math.sqrt(5 / 3))


def test_summarize_empty_is_domain_error():
    with pytest.raises(DomainError):
        summarize(Dataset([], np.empty((0, 10))))


def test_feature_summary_ordering_invariant():
    with pytest.raises(DomainError):
        FeatureSummary(1, 1, 0, 2, 1, 3, 4)


# ---------------------------------------------------------------- generator


def test_generate_single_row_in_range():
    ds = generate_synthetic(REFERENCE_STATS, 1, seed=0)
    assert len(ds) == 1
    for j, f in enumerate(FEATURES):
        assert REFERENCE_STATS[f].min <= ds.features[0, j] <= REFERENCE_STATS[f].max


def test_generate_is_deterministic():
    assert generate_synthetic(REFERENCE_STATS, 200, seed=9) == generate_synthetic(REFERENCE_STATS, 200, seed=9)
    assert generate_synthetic(REFERENCE_STATS, 200, seed=9) != generate_synthetic(REFERENCE_STATS, 200, seed=10)


def test_generated_set_matches_reference_stats():
    stats = summarize(generate_synthetic(REFERENCE_STATS, 9487, seed=2024))
    for f, ref in REFERENCE_STATS.items():
        s = stats[f]
        if ref.mean > 1:
            assert abs(s.mean - ref.mean) <= 0.05 * ref.mean, f
        if ref.median > 1:
            assert abs(s.median - ref.median) <= 0.10 * ref.median, f
        assert ref.min <= s.min and s.max <= ref.max


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 300))
def test_round_trip_keeps_quartile_order(seed, n):
    for s in summarize(generate_synthetic(REFERENCE_STATS, n, seed)).values():
        assert s.min <= s.q25 <= s.median <= s.q75 <= s.max


# ----------------------------------------------------------------- injection


def test_default_injection_values_are_out_of_range():
    spec = AnomalySpec(Sparse(0.1))
    for f, v in spec.injection_values.items():
        ref = REFERENCE_STATS[f]
        assert v > ref.max or v < ref.min, f


def test_sparse_ten_percent_count():
    ds = generate_synthetic(REFERENCE_STATS, 9487, seed=1)
    out = inject_sparse(ds, AnomalySpec(Sparse(0.10), seed=5))
    assert int(out.labels.sum()) == 948


def test_sparse_density_too_low():
    ds = generate_synthetic(REFERENCE_STATS, 50, seed=1)
    with pytest.raises(DomainError, match="density too low for dataset size"):
        inject_sparse(ds, AnomalySpec(Sparse(0.01), seed=5))


def test_sparse_untouched_rows_multiset():
    ds = generate_synthetic(REFERENCE_STATS, 500, seed=1)
    out = inject_sparse(ds, AnomalySpec(Sparse(0.05), seed=2))
    sel = out.labels == 1
    before = Counter(map(tuple, ds.features))
    removed = Counter(map(tuple, ds.features[sel]))
    assert Counter(map(tuple, out.features[~sel])) == before - removed


def _check_injected_rows(before, after):
    for i in np.flatnonzero(after.labels):
        diff = np.flatnonzero(before.features[i] != after.features[i])
        assert len(diff) >= 1
        for j in diff:
            assert after.features[i, j] == DEFAULT_INJECTION_VALUES[FEATURES[j]]
    untouched = after.labels == 0
    assert np.array_equal(before.features[untouched], after.features[untouched])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**63 - 1), density=st.floats(0.02, 0.9))
def test_sparse_properties(seed, density):
    ds = generate_synthetic(REFERENCE_STATS, 120, seed=seed % 1000)
    out = inject_sparse(ds, AnomalySpec(Sparse(density), seed=seed))
    assert int(out.labels.sum()) == math.floor(density * 120 + 1e-9)
    _check_injected_rows(ds, out)
    assert ((ds.features != out.features).sum(axis=1) <= 1).all()


def test_sparse_changes_exactly_one_feature_per_row():
    # zero base values never collide with the (nonzero) injection values
    ds = make_dataset(np.zeros((200, 10)))
    out = inject_sparse(ds, AnomalySpec(Sparse(0.1), seed=3))
    changed = (out.features != 0).sum(axis=1)
    assert list(changed[out.labels == 1]) == [1] * 20
    assert changed[out.labels == 0].sum() == 0


def test_collective_window_100():
    ds = generate_synthetic(REFERENCE_STATS, 1000, seed=1)
    out = inject_collective(ds, AnomalySpec(Collective(100), seed=4), 250)
    idx = np.flatnonzero(out.labels)
    assert list(idx) == list(range(250, 350))
    _check_injected_rows(ds, out)


def test_collective_single_row_five_features():
    ds = make_dataset(np.zeros((10, 10)))
    out = inject_collective(ds, AnomalySpec(Collective(1), seed=7), 4)
    assert int(out.labels.sum()) == 1
    assert int((out.features[4] != 0).sum()) == 5


def test_collective_feature_subset_fixed_across_window():
    ds = make_dataset(np.zeros((300, 10)))
    out = inject_collective(ds, AnomalySpec(Collective(200, 0.5), seed=11), 50)
    masks = {tuple(r != 0) for r in out.features[50:250]}
    assert len(masks) == 1 and sum(next(iter(masks))) == 5


def test_collective_out_of_bounds():
    ds = make_dataset(np.zeros((10, 10)))
    with pytest.raises(IndexError):
        inject_collective(ds, AnomalySpec(Collective(5)), 6)


def test_injection_is_deterministic_and_pure():
    ds = generate_synthetic(REFERENCE_STATS, 300, seed=1)
    copy = ds.features.copy()
    a = inject_sparse(ds, AnomalySpec(Sparse(0.1), seed=99))
    b = inject_sparse(ds, AnomalySpec(Sparse(0.1), seed=99))
    assert a == b
    assert np.array_equal(ds.features, copy)


def test_spec_validation():
    with pytest.raises(DomainError):
        Sparse(0.0)
    with pytest.raises(DomainError):
        Collective(0)
    with pytest.raises(DomainError):
        AnomalySpec(Sparse(0.1), {"rpm": 1.0})


@pytest.mark.parametrize("pattern", [Sparse(0.05), Collective(100, 0.5)])
def test_anomaly_spec_file_round_trip(tmp_path, pattern):
    spec = AnomalySpec(pattern, dict(DEFAULT_INJECTION_VALUES), seed=2**63 - 5)
    save_anomaly_spec(spec, tmp_path / "s.ini")
    back = load_anomaly_spec(tmp_path / "s.ini")
    assert back.pattern == spec.pattern and back.seed == spec.seed
    assert dict(back.injection_values) == dict(spec.injection_values)


def test_shipped_spec_files_use_default_values():
    from importlib import resources

    for name in ("sparse_5pct.ini", "collective_100.ini"):
        spec = load_anomaly_spec(str(resources.files("edgemon") / "data" / name))
        assert dict(spec.injection_values) == dict(DEFAULT_INJECTION_VALUES)
