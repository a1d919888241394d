"""Vehicle telemetry schema, synthetic generation and anomaly injection."""

from __future__ import annotations

import configparser
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
from scipy.optimize import brentq

logger = logging.getLogger(__name__)

FEATURES: tuple[str, ...] = (
    "accelerator_pedal_position",
    "brake_pressure",
    "scr_catalyst_efficiency",
    "engine_oil_temperature",
    "engine_torque",
    "fuel_consumption",
    "fuel_level",
    "normed_load_value",
    "oil_fill_level",
    "time_since_engine_start",
)
N_FEATURES = len(FEATURES)
TIMESTAMP_COLUMN = "timestamp_ms"
LABEL_COLUMN = "label"
TEST_SET_SIZE = 9487
SAMPLE_PERIOD_MS = 1000


class TelemetryError(Exception):
    """Base class for telemetry errors."""


class SchemaError(TelemetryError):
    pass


class ParseError(TelemetryError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DomainError(TelemetryError, ValueError):
    pass


@dataclass(frozen=True)
class TelemetryRecord:
    timestamp: int
    features: tuple[float, ...]
    label: int = 0

    def __post_init__(self):
        if len(self.features) != N_FEATURES:
            raise DomainError(f"expected {N_FEATURES} features, got {len(self.features)}")
        if self.label not in (0, 1):
            raise DomainError(f"label must be 0 or 1, got {self.label!r}")

    def as_dict(self) -> dict[str, float]:
        return dict(zip(FEATURES, self.features))


class Dataset:
    """Immutable columnar collection of telemetry records.

    Records are stored as three read-only numpy arrays so that detectors and
    injectors can work on whole columns; indexing yields ``TelemetryRecord``.
    """

    def __init__(self, timestamps, features, labels=None):
        ts = np.array(timestamps, dtype=np.int64)
        x = np.array(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != N_FEATURES:
            raise DomainError(f"feature matrix must be (n, {N_FEATURES}), got {x.shape}")
        if ts.shape != (x.shape[0],):
            raise DomainError("timestamps and features disagree on row count")
        y = np.zeros(len(ts), dtype=np.int8) if labels is None else np.array(labels, dtype=np.int8)
        if y.shape != ts.shape:
            raise DomainError("labels and features disagree on row count")
        if not np.isin(y, (0, 1)).all():
            raise DomainError("labels must be 0 or 1")
        if len(ts) > 1 and not (np.diff(ts) > 0).all():
            raise DomainError("timestamps must strictly increase")
        for arr in (ts, x, y):
            arr.flags.writeable = False
        self.timestamps = ts
        self.features = x
        self.labels = y

    @classmethod
    def from_records(cls, records: Sequence[TelemetryRecord]) -> "Dataset":
        if not records:
            return cls(np.empty(0), np.empty((0, N_FEATURES)))
        return cls(
            [r.timestamp for r in records],
            [r.features for r in records],
            [r.label for r in records],
        )

    def __len__(self) -> int:
        return len(self.timestamps)

    def __getitem__(self, i: int) -> TelemetryRecord:
        return TelemetryRecord(
            int(self.timestamps[i]), tuple(float(v) for v in self.features[i]), int(self.labels[i])
        )

    def __iter__(self) -> Iterator[TelemetryRecord]:
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            np.array_equal(self.timestamps, other.timestamps)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )

    def replace(self, features=None, labels=None) -> "Dataset":
        return Dataset(
            self.timestamps,
            self.features if features is None else features,
            self.labels if labels is None else labels,
        )

    def subset(self, index) -> "Dataset":
        return Dataset(self.timestamps[index], self.features[index], self.labels[index])


# --------------------------------------------------------------------------- csv


def load_csv(path: str | Path) -> Dataset:
    """Read a telemetry CSV.

    The header must name all ten features in any order; ``timestamp_ms`` and
    ``label`` are optional. Without timestamps, rows are spaced one sample
    period apart. Constant columns are logged as a warning.

    Raises:
        SchemaError: unknown or missing column names.
        ParseError: non-numeric cell or wrong number of cells, with line number.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError("empty file, no header") from None
        known = set(FEATURES) | {TIMESTAMP_COLUMN, LABEL_COLUMN}
        unknown = [h for h in header if h not in known]
        if unknown:
            raise SchemaError(f"unknown columns: {', '.join(unknown)}")
        missing = [f for f in FEATURES if f not in header]
        if missing:
            raise SchemaError(f"missing feature columns: {', '.join(missing)}")
        if len(set(header)) != len(header):
            raise SchemaError("duplicate column names")

        col = {name: header.index(name) for name in header}
        ts, xs, ys = [], [], []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(line, f"expected {len(header)} values, got {len(row)}")
            try:
                xs.append([float(row[col[f]]) for f in FEATURES])
                if TIMESTAMP_COLUMN in col:
                    ts.append(int(row[col[TIMESTAMP_COLUMN]]))
                if LABEL_COLUMN in col:
                    label = int(row[col[LABEL_COLUMN]])
                    if label not in (0, 1):
                        raise ValueError(f"label {label} not in {{0, 1}}")
                    ys.append(label)
            except ValueError as exc:
                raise ParseError(line, str(exc)) from None

    if TIMESTAMP_COLUMN not in col:
        ts = [i * SAMPLE_PERIOD_MS for i in range(len(xs))]
    x = np.array(xs, dtype=float).reshape(-1, N_FEATURES)
    ds = Dataset(ts, x, ys if LABEL_COLUMN in col else None)
    const = constant_features(ds)
    if const:
        logger.warning("constant columns in %s: %s", path, ", ".join(const))
    return ds


def write_csv(dataset: Dataset, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([TIMESTAMP_COLUMN, *FEATURES, LABEL_COLUMN])
        for t, row, y in zip(dataset.timestamps, dataset.features, dataset.labels):
            w.writerow([int(t), *(repr(float(v)) for v in row), int(y)])


def constant_features(dataset: Dataset) -> list[str]:
    if len(dataset) == 0:
        return []
    x = dataset.features
    return [f for j, f in enumerate(FEATURES) if (x[:, j] == x[0, j]).all()]


# -------------------------------------------------------------------- statistics


@dataclass(frozen=True)
class FeatureSummary:
    mean: float
    std: float
    min: float
    q25: float
    median: float
    q75: float
    max: float

    def __post_init__(self):
        if not (self.min <= self.q25 <= self.median <= self.q75 <= self.max):
            raise DomainError(f"quantiles out of order: {self}")
        if self.std < 0:
            raise DomainError("std must be non-negative")


FeatureStats = dict  # feature name -> FeatureSummary

REFERENCE_STATS: dict[str, FeatureSummary] = {
    "accelerator_pedal_position": FeatureSummary(16.93, 9.62, 0.00, 14.90, 14.90, 14.90, 86.30),
    "brake_pressure": FeatureSummary(1.61, 29.29, 0.00, 0.00, 0.00, 0.00, 655.33),
    "scr_catalyst_efficiency": FeatureSummary(0.76, 0.25, 0.00, 0.64, 0.88, 0.92, 0.98),
    "engine_oil_temperature": FeatureSummary(9.65, 28.59, 0.00, 0.00, 0.00, 0.00, 113.20),
    "engine_torque": FeatureSummary(38.75, 45.51, 0.00, 25.80, 28.60, 32.40, 392.90),
    "fuel_consumption": FeatureSummary(0.69, 3.45, 0.00, 0.00, 0.00, 0.00, 29.0),
    "fuel_level": FeatureSummary(2.47, 7.58, 0.00, 0.00, 0.00, 0.00, 28.0),
    "normed_load_value": FeatureSummary(29.68, 15.80, 0.00, 23.80, 25.70, 28.70, 97.70),
    "oil_fill_level": FeatureSummary(70.23, 10.35, 0.00, 67.23, 71.51, 73.93, 92.09),
    "time_since_engine_start": FeatureSummary(470.17, 1634.49, 0.00, 0.00, 0.00, 0.00, 10190.0),
}


def summarize(dataset: Dataset) -> dict[str, FeatureSummary]:
    """Per-feature mean, sample std and quartiles.

    Quartiles use linear interpolation between order statistics; std uses
    the n-1 denominator (0 for a single row).
    """
    if len(dataset) == 0:
        raise DomainError("cannot summarize an empty dataset")
    x = dataset.features
    q = np.quantile(x, [0.0, 0.25, 0.5, 0.75, 1.0], axis=0, method="linear")
    std = x.std(axis=0, ddof=1) if len(x) > 1 else np.zeros(N_FEATURES)
    mean = x.mean(axis=0)
    out = {}
    for j, name in enumerate(FEATURES):
        # guard the ordering invariant against interpolation round-off
        qs = np.maximum.accumulate(q[:, j])
        out[name] = FeatureSummary(
            float(mean[j]), float(std[j]), *(float(v) for v in qs)
        )
    return out


# --------------------------------------------------------------------- generator


def _texp_mean(lam: float) -> float:
    """Mean of the density proportional to exp(lam * u) on [0, 1]."""
    if abs(lam) < 1e-6:
        return 0.5 + lam / 12.0
    return 1.0 / (-math.expm1(-lam)) - 1.0 / lam


def _texp_sample(lam: float, u: np.ndarray) -> np.ndarray:
    if abs(lam) < 1e-6:
        return u
    if lam > 0:
        # inverse cdf written around the upper end to stay finite for large lam
        return 1.0 + np.log1p(-(1.0 - u) * -np.expm1(-lam)) / lam
    return np.log1p(u * np.expm1(lam)) / lam


@dataclass(frozen=True)
class _Marginal:
    """Four equal-mass quartile bands; outer bands share an exponential tilt."""

    edges: tuple[float, float, float, float, float]
    tilt: float

    def band_mean(self, k: int) -> float:
        lo, hi = self.edges[k], self.edges[k + 1]
        if k in (0, 3):
            return lo + (hi - lo) * _texp_mean(self.tilt)
        return 0.5 * (lo + hi)

    def mean(self) -> float:
        return sum(self.band_mean(k) for k in range(4)) / 4.0

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        # equal band counts up to n % 4; removes multinomial noise in the point masses
        band = rng.permutation(np.arange(n) % 4)
        # stratified uniforms inside each band keep the heavy tails from dominating the mean
        u = np.empty(n)
        for k in range(4):
            idx = np.flatnonzero(band == k)
            u[idx] = (rng.permutation(len(idx)) + rng.random(len(idx))) / max(len(idx), 1)
        lo = np.asarray(self.edges[:4])[band]
        width = np.asarray(np.diff(self.edges))[band]
        frac = np.where((band == 0) | (band == 3), _texp_sample(self.tilt, u), u)
        return np.clip(lo + width * frac, self.edges[0], self.edges[4])


def _fit_marginal(s: FeatureSummary) -> _Marginal:
    m = _Marginal((s.min, s.q25, s.median, s.q75, s.max), 0.0)
    lo_tilt, hi_tilt = -200.0, 200.0
    lo_mean = _Marginal(m.edges, lo_tilt).mean()
    hi_mean = _Marginal(m.edges, hi_tilt).mean()
    if s.mean <= lo_mean:
        return _Marginal(m.edges, lo_tilt)
    if s.mean >= hi_mean:
        return _Marginal(m.edges, hi_tilt)
    tilt = brentq(lambda t: _Marginal(m.edges, t).mean() - s.mean, lo_tilt, hi_tilt, xtol=1e-10)
    return _Marginal(m.edges, tilt)


def generate_synthetic(
    stats: Mapping[str, FeatureSummary], n: int, seed: int, period_ms: int = SAMPLE_PERIOD_MS
) -> Dataset:
    """Draw ``n`` independent rows whose marginals follow ``stats``.

    Each feature is a mixture of four equal-probability bands between its
    min/quartiles/max. Inner bands are uniform, collapsing to a point mass
    where two quartiles coincide (e.g. brake pressure is 0 for at least 75%
    of rows). The two outer bands share an exponential tilt solved so the
    mixture mean equals the target mean. Quartiles and mean therefore
    converge to ``stats``; std is not matched.
    """
    if n < 1:
        raise DomainError("n must be >= 1")
    missing = [f for f in FEATURES if f not in stats]
    if missing:
        raise DomainError(f"stats missing features: {missing}")
    rng = np.random.default_rng(seed)
    cols = [_fit_marginal(stats[f]).sample(rng, n) for f in FEATURES]
    ts = np.arange(n, dtype=np.int64) * period_ms
    return Dataset(ts, np.column_stack(cols))


# --------------------------------------------------------------------- injection

DEFAULT_INJECTION_VALUES: dict[str, float] = {
    "accelerator_pedal_position": 200.0,
    "brake_pressure": 2000.0,
    "scr_catalyst_efficiency": 2.0,
    "engine_oil_temperature": 250.0,
    "engine_torque": 700.0,
    "fuel_consumption": 70.0,
    "fuel_level": 100.0,
    "normed_load_value": 200.0,
    "oil_fill_level": 200.0,
    "time_since_engine_start": -100.0,
}


@dataclass(frozen=True)
class Sparse:
    density: float

    def __post_init__(self):
        if not 0.0 < self.density < 1.0:
            raise DomainError(f"density must be in (0, 1), got {self.density}")


@dataclass(frozen=True)
class Collective:
    window_len: int
    feature_fraction: float = 0.5

    def __post_init__(self):
        if self.window_len < 1:
            raise DomainError("window_len must be >= 1")
        if not 0.0 < self.feature_fraction <= 1.0:
            raise DomainError("feature_fraction must be in (0, 1]")


@dataclass(frozen=True)
class AnomalySpec:
    pattern: Sparse | Collective
    injection_values: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_INJECTION_VALUES))
    seed: int = 0

    def __post_init__(self):
        extra = set(self.injection_values) - set(FEATURES)
        if extra:
            raise DomainError(f"injection values for unknown features: {sorted(extra)}")

    def injectable(self) -> list[int]:
        return [j for j, f in enumerate(FEATURES) if f in self.injection_values]


def _floor_count(fraction: float, n: int) -> int:
    # tolerate 0.29 * 100 == 28.999999999999996
    return math.floor(fraction * n + 1e-9)


def inject_sparse(dataset: Dataset, spec: AnomalySpec) -> Dataset:
    """Overwrite one random feature in floor(density * n) random rows."""
    if not isinstance(spec.pattern, Sparse):
        raise DomainError("inject_sparse needs a Sparse pattern")
    n = len(dataset)
    k = _floor_count(spec.pattern.density, n)
    if k < 1:
        raise DomainError("density too low for dataset size")
    cols = spec.injectable()
    if not cols:
        raise DomainError("no injection values given")
    rng = np.random.default_rng(spec.seed)
    rows = np.sort(rng.choice(n, size=k, replace=False))
    which = np.asarray(cols)[rng.integers(0, len(cols), size=k)]
    values = np.array([spec.injection_values[FEATURES[j]] for j in which])
    x = dataset.features.copy()
    y = dataset.labels.copy()
    x[rows, which] = values
    y[rows] = 1
    return dataset.replace(x, y)


def inject_collective(dataset: Dataset, spec: AnomalySpec, start_index: int) -> Dataset:
    """Overwrite a fixed random feature subset over a contiguous row window."""
    if not isinstance(spec.pattern, Collective):
        raise DomainError("inject_collective needs a Collective pattern")
    n = len(dataset)
    w = spec.pattern.window_len
    if start_index < 0 or start_index + w > n:
        raise IndexError(f"window [{start_index}, {start_index + w}) exceeds dataset of {n} rows")
    cols = spec.injectable()
    k = min(len(cols), max(1, _floor_count(spec.pattern.feature_fraction, N_FEATURES)))
    rng = np.random.default_rng(spec.seed)
    chosen = np.sort(rng.choice(cols, size=k, replace=False))
    x = dataset.features.copy()
    y = dataset.labels.copy()
    for j in chosen:
        x[start_index : start_index + w, j] = spec.injection_values[FEATURES[j]]
    y[start_index : start_index + w] = 1
    return dataset.replace(x, y)


# ------------------------------------------------------------ spec serialization


def save_anomaly_spec(spec: AnomalySpec, path: str | Path) -> None:
    cp = configparser.ConfigParser()
    p = spec.pattern
    if isinstance(p, Sparse):
        cp["pattern"] = {"kind": "sparse", "density": repr(p.density)}
    else:
        cp["pattern"] = {
            "kind": "collective",
            "window_len": str(p.window_len),
            "feature_fraction": repr(p.feature_fraction),
        }
    cp["pattern"]["seed"] = str(spec.seed)
    cp["injection_values"] = {f: repr(float(v)) for f, v in spec.injection_values.items()}
    with open(path, "w", encoding="utf-8") as fh:
        cp.write(fh)


def load_anomaly_spec(path: str | Path) -> AnomalySpec:
    cp = configparser.ConfigParser()
    if not cp.read(path, encoding="utf-8"):
        raise FileNotFoundError(path)
    sec = cp["pattern"]
    kind = sec.get("kind", "sparse")
    if kind == "sparse":
        pattern: Sparse | Collective = Sparse(sec.getfloat("density"))
    elif kind == "collective":
        pattern = Collective(sec.getint("window_len"), sec.getfloat("feature_fraction", 0.5))
    else:
        raise SchemaError(f"unknown anomaly pattern {kind!r}")
    values = (
        {k: float(v) for k, v in cp["injection_values"].items()}
        if cp.has_section("injection_values")
        else dict(DEFAULT_INJECTION_VALUES)
    )
    return AnomalySpec(pattern, values, sec.getint("seed", 0))
