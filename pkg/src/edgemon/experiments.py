"""Experiment pipelines and report files.

Detection: generate -> inject -> (tune) -> train -> evaluate.
Migration: simulate handovers -> migrate -> account.
"""

from __future__ import annotations

import csv
import json
import math
import statistics
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .edge import EdgeRuntime, ServiceKind, schedule_telemetry
from .gbdt import GbdtModel, GbdtParams, LatencyStats, evaluate, measure_inference_latency, train
from .hpo import DEFAULT_GBDT_SPACE, Study, gbdt_objective, run_study
from .netsim import EventLog, MobilityTrace, Topology, VirtualClock, run
from .orchestrator import WITH_MEDIATOR, WITHOUT_MEDIATOR, MigrationRecord, Orchestrator
from .scenario import Scenario
from .telemetry import (
    AnomalySpec,
    Collective,
    Dataset,
    Sparse,
    generate_synthetic,
    inject_collective,
    inject_sparse,
)


def _sub_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# ---------------------------------------------------------------- data sets

# salts keep the streams for each stage independent under one scenario seed
_TRAIN, _TEST, _SPARSE, _COLL, _START, _HPO, _MIG, _SIM = range(1, 9)


def make_test_set(scenario: Scenario) -> Dataset:
    t = scenario.section("telemetry")
    return generate_synthetic(scenario.feature_stats(), int(t["test_size"]), _sub_seed(scenario.seed, _TEST))


def make_training_set(scenario: Scenario) -> Dataset:
    """Synthetic normal data with one sparse and one collective injection."""
    t = scenario.section("telemetry")
    det = scenario.section("detection")
    seed = scenario.seed
    ds = generate_synthetic(scenario.feature_stats(), int(t["train_size"]), _sub_seed(seed, _TRAIN))
    values = det["injection_values"]
    ds = inject_sparse(ds, AnomalySpec(Sparse(float(t["train_sparse_density"])), values, _sub_seed(seed, _TRAIN, 1)))
    w = int(t["train_collective_len"])
    if w > 0:
        start = int(np.random.default_rng(_sub_seed(seed, _TRAIN, 2)).integers(0, len(ds) - w + 1))
        spec = AnomalySpec(Collective(w, float(det["feature_fraction"])), values, _sub_seed(seed, _TRAIN, 3))
        ds = inject_collective(ds, spec, start)
    return ds


def tune_detector(scenario: Scenario, train_set: Dataset, n_trials: int, log_path=None) -> Study:
    objective = gbdt_objective(train_set, seed=_sub_seed(scenario.seed, _HPO), base_params=scenario.gbdt_params())
    return run_study(objective, DEFAULT_GBDT_SPACE, n_trials, _sub_seed(scenario.seed, _HPO, 1), log_path=log_path)


def train_detector(scenario: Scenario, train_set: Dataset | None = None, params: GbdtParams | None = None) -> GbdtModel:
    if train_set is None:
        train_set = make_training_set(scenario)
    return train(train_set, params or scenario.gbdt_params(), seed=scenario.seed)


# ---------------------------------------------------------------- detection


@dataclass(frozen=True)
class DetectionRow:
    pattern: str  # "sparse" or "collective"
    level: float  # density for sparse, window length for collective
    seed: int
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int


@dataclass(frozen=True)
class DetectionSummary:
    pattern: str
    level: float
    n_seeds: int
    precision_mean: float
    precision_std: float
    recall_mean: float
    recall_std: float
    f1_mean: float
    f1_std: float


def _mean_std(xs: Sequence[float]) -> tuple[float, float]:
    # fixed left-to-right summation order for reproducible output
    m = math.fsum(xs) / len(xs)
    s = statistics.stdev(xs) if len(xs) > 1 else 0.0
    return m, s


def inject_pattern(test_set: Dataset, pattern: str, level: float, seed: int, values, feature_fraction: float):
    if pattern == "sparse":
        return inject_sparse(test_set, AnomalySpec(Sparse(float(level)), values, seed))
    w = int(level)
    start = int(np.random.default_rng(_sub_seed(seed, _START)).integers(0, len(test_set) - w + 1))
    return inject_collective(test_set, AnomalySpec(Collective(w, feature_fraction), values, seed), start)


def run_detection_experiment(
    scenario: Scenario, model: GbdtModel, test_set: Dataset | None = None, threshold: float | None = None
) -> list[DetectionRow]:
    """Evaluate every configured anomaly pattern on fresh copies of the test set."""
    det = scenario.section("detection")
    test_set = make_test_set(scenario) if test_set is None else test_set
    thr = float(det["threshold"]) if threshold is None else threshold
    configs = [("sparse", float(d)) for d in det["sparse_densities"]]
    configs += [("collective", float(w)) for w in det["collective_lengths"]]
    rows = []
    for pattern, level in configs:
        for k in range(int(det["seeds"])):
            seed = _sub_seed(scenario.seed, _SPARSE if pattern == "sparse" else _COLL, int(level * 1000), k)
            ds = inject_pattern(test_set, pattern, level, seed, det["injection_values"], float(det["feature_fraction"]))
            m = evaluate(model, ds, thr)
            rows.append(DetectionRow(pattern, level, k, m.precision, m.recall, m.f1, m.tp, m.fp, m.tn, m.fn))
    return rows


def summarize_detection(rows: Sequence[DetectionRow]) -> list[DetectionSummary]:
    groups: dict[tuple[str, float], list[DetectionRow]] = {}
    for r in rows:
        groups.setdefault((r.pattern, r.level), []).append(r)
    out = []
    for (pattern, level), rs in groups.items():
        p = _mean_std([r.precision for r in rs])
        rc = _mean_std([r.recall for r in rs])
        f = _mean_std([r.f1 for r in rs])
        out.append(DetectionSummary(pattern, level, len(rs), p[0], p[1], rc[0], rc[1], f[0], f[1]))
    return out


# ---------------------------------------------------------------- migration


@dataclass(frozen=True)
class MigrationSummary:
    variant: str
    runs: int
    mean_s: float
    std_s: float
    high_level_mean_s: float
    low_level_mean_s: float
    timeouts: int


def _single_handover(topology: Topology) -> MobilityTrace:
    first = topology.radio_nodes[0]
    other = next((r for r in topology.radio_nodes if r.tai != first.tai), None)
    if other is None:
        raise ValueError("topology needs at least two TAIs for a migration")
    return MobilityTrace(((0.0, first.id), (10.0, other.id)))


def run_migration_experiment(
    scenario: Scenario, n_runs: int | None = None, variants: Sequence[str] = ("with_mediator", "without_mediator")
) -> tuple[list[MigrationSummary], dict[str, list[MigrationRecord]]]:
    """Repeat one inter-TAI handover ``n_runs`` times per variant on fresh simulations."""
    n_runs = int(scenario.section("migration")["runs"]) if n_runs is None else n_runs
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    topology = scenario.topology()
    trace = _single_handover(topology)
    profile = scenario.latency_profile()
    cfg = scenario.orchestrator_config()
    latency = float(scenario.section("network")["delivery_latency_s"])
    start_node = topology.edge_for_tai(topology.tai_of(trace.entries[0][1]))
    summaries, records = [], {}
    for vi, variant in enumerate(variants):
        kinds = WITH_MEDIATOR if variant == "with_mediator" else WITHOUT_MEDIATOR
        recs = []
        for i in range(n_runs):
            clock = VirtualClock()
            rt = EdgeRuntime(topology, clock, profile, seed=[scenario.seed, _MIG, vi, i])
            orch = Orchestrator(clock, topology, rt, kinds=kinds, config=cfg)
            orch.bootstrap(start_node)
            run(clock, topology, trace, [orch], latency)
            recs.extend(orch.records)
        records[variant] = recs
        ok = [r for r in recs if r.outcome == "ok"]
        totals = [r.total for r in ok] or [math.nan]
        mean, std = _mean_std(totals)
        summaries.append(
            MigrationSummary(
                variant,
                n_runs,
                mean,
                std,
                math.fsum(r.high_level_time for r in ok) / max(len(ok), 1),
                math.fsum(r.low_level_time for r in ok) / max(len(ok), 1),
                len(recs) - len(ok),
            )
        )
    return summaries, records


@dataclass
class SimulationResult:
    event_log: EventLog
    runtime: EdgeRuntime
    orchestrator: Orchestrator

    @property
    def records(self) -> list[MigrationRecord]:
        return self.orchestrator.records


def run_scenario_simulation(
    scenario: Scenario,
    model: GbdtModel,
    include_mediator: bool | None = None,
    inference_time_s: float | None = None,
    records=None,
) -> SimulationResult:
    """Replay the scenario trace with telemetry flowing through the edge data path."""
    topology = scenario.topology()
    trace = scenario.trace()
    clock = VirtualClock()
    rt = EdgeRuntime(topology, clock, scenario.latency_profile(), seed=[scenario.seed, _SIM])
    if include_mediator is None:
        include_mediator = bool(scenario.section("orchestrator")["include_mediator"])
    kinds = WITH_MEDIATOR if include_mediator else WITHOUT_MEDIATOR
    orch = Orchestrator(clock, topology, rt, kinds=kinds, config=scenario.orchestrator_config())
    orch.bootstrap(topology.edge_for_tai(topology.tai_of(trace.entries[0][1])))
    period = float(scenario.section("edge")["telemetry_period_s"])
    if records is None:
        records = make_test_set(scenario)
    end = trace.entries[-1][0] + 200.0
    n_msgs = min(len(records), int(end / period))
    # messages are offset by half a period so none coincide with a handover instant
    schedule_telemetry(
        rt, trace, [records[i] for i in range(n_msgs)], period, model, orch.service_id,
        (ServiceKind.MEDIATOR, ServiceKind.INFERENCE) if include_mediator else (ServiceKind.INFERENCE,),
        inference_time_s, start_s=period / 2,
    )
    log = run(clock, topology, trace, [orch], float(scenario.section("network")["delivery_latency_s"]))
    return SimulationResult(log, rt, orch)


@dataclass(frozen=True)
class GapStats:
    messages: int
    delivered: int
    gaps: int
    dropped: int
    migrations: int

    @property
    def availability(self) -> float:
        return self.delivered / self.messages if self.messages else 1.0


def gap_stats(sim: SimulationResult) -> GapStats:
    outcomes = [m.outcome for m in sim.runtime.message_log]
    return GapStats(
        len(outcomes), outcomes.count("ok"), outcomes.count("gap"), outcomes.count("dropped"), len(sim.records)
    )


# ------------------------------------------------------------------- report


@dataclass
class Report:
    detection: list[DetectionRow] = field(default_factory=list)
    detection_summary: list[DetectionSummary] = field(default_factory=list)
    migration: list[MigrationSummary] = field(default_factory=list)
    inference: LatencyStats | None = None
    gaps: GapStats | None = None


def write_rows(path: Path, cls, rows) -> None:
    names = [f.name for f in fields(cls)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for r in rows:
            d = asdict(r)
            w.writerow([repr(d[n]) if isinstance(d[n], float) else d[n] for n in names])


def _read_rows(path: Path, cls) -> list:
    types = {f.name: f.type for f in fields(cls)}
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            kw = {}
            for k, v in row.items():
                t = types[k]
                kw[k] = float(v) if t in ("float", float) else int(v) if t in ("int", int) else v
            out.append(cls(**kw))
    return out


def load_detection_csv(path: str | Path) -> list[DetectionRow]:
    return _read_rows(Path(path), DetectionRow)


def load_detection_summary_csv(path: str | Path) -> list[DetectionSummary]:
    return _read_rows(Path(path), DetectionSummary)


def load_migration_summary_csv(path: str | Path) -> list[MigrationSummary]:
    return _read_rows(Path(path), MigrationSummary)


def render_text(report: Report) -> str:
    lines = ["Detection performance (seed mean +/- std)", ""]
    lines.append(f"{'pattern':<12}{'level':>8}{'seeds':>7}{'precision':>20}{'recall':>20}{'f1':>20}")
    for s in report.detection_summary:
        level = f"{s.level:.0%}" if s.pattern == "sparse" else f"{int(s.level)}"
        lines.append(
            f"{s.pattern:<12}{level:>8}{s.n_seeds:>7}"
            f"{s.precision_mean:>12.4f} +/- {s.precision_std:<4.2f}"
            f"{s.recall_mean:>12.4f} +/- {s.recall_std:<4.2f}"
            f"{s.f1_mean:>12.4f} +/- {s.f1_std:<4.2f}"
        )
    lines += ["", "Inference and service migration times", ""]
    lines.append(f"{'time':<40}{'mean (s)':>14}{'std (s)':>14}")
    if report.inference is not None:
        lines.append(f"{'native inference (per record)':<40}{report.inference.mean:>14.6f}{report.inference.std:>14.6f}")
    for m in report.migration:
        name = "migration (w/ Mediator)" if m.variant == "with_mediator" else "migration (w/o Mediator)"
        lines.append(f"{name:<40}{m.mean_s:>14.3f}{m.std_s:>14.3f}")
    if report.gaps is not None:
        g = report.gaps
        lines += [
            "",
            "Service continuity on the scenario trace",
            "",
            f"messages {g.messages}  delivered {g.delivered}  gaps {g.gaps}  dropped {g.dropped}  "
            f"migrations {g.migrations}  availability {g.availability:.4f}",
        ]
    return "\n".join(lines) + "\n"


def emit_report(report: Report, out_dir: str | Path) -> list[Path]:
    """Write CSV tables plus a plain-text rendering; identical reports give identical bytes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, cls, rows in (
        ("detection.csv", DetectionRow, report.detection),
        ("detection_summary.csv", DetectionSummary, report.detection_summary),
        ("migration_summary.csv", MigrationSummary, report.migration),
    ):
        write_rows(out / name, cls, rows)
        written.append(out / name)
    if report.inference is not None:
        report.inference.write_csv(out / "inference_latency.csv")
        written.append(out / "inference_latency.csv")
    if report.gaps is not None:
        write_rows(out / "gaps.csv", GapStats, [report.gaps])
        written.append(out / "gaps.csv")
    (out / "report.txt").write_text(render_text(report), encoding="utf-8")
    written.append(out / "report.txt")
    return written


def load_report(out_dir: str | Path) -> Report:
    """Reassemble a report from whatever tables exist in ``out_dir``."""
    out = Path(out_dir)
    rep = Report()
    if (out / "detection.csv").exists():
        rep.detection = load_detection_csv(out / "detection.csv")
        rep.detection_summary = summarize_detection(rep.detection)
    if (out / "migration_summary.csv").exists():
        rep.migration = load_migration_summary_csv(out / "migration_summary.csv")
    if (out / "inference_latency.csv").exists():
        (row,) = _read_rows(out / "inference_latency.csv", LatencyStats)
        rep.inference = row
    if (out / "gaps.csv").exists():
        (g,) = _read_rows(out / "gaps.csv", GapStats)
        rep.gaps = g
    return rep


def measure_latency(scenario: Scenario, model: GbdtModel, test_set: Dataset) -> LatencyStats:
    reps = int(scenario.section("detector")["latency_repetitions"])
    return measure_inference_latency(model, test_set, reps)


def save_params(params: GbdtParams, path: str | Path) -> None:
    Path(path).write_text(json.dumps(asdict(params), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_params(path: str | Path) -> GbdtParams:
    return GbdtParams(**json.loads(Path(path).read_text(encoding="utf-8")))
