"""Command line entry point: ``edgemon <subcommand> [options]``.

Every subcommand reads a scenario (the packaged default when ``--scenario``
is omitted) and writes under its output directory. Exit status is 0 on
success, 2 for configuration errors and 3 for runtime failures.
"""

from __future__ import annotations

import argparse
import logging
import sys
from importlib import resources
from pathlib import Path

from . import experiments as ex
from .gbdt import GbdtModel, GbdtParams, TrainingError
from .hpo import HpoError
from .netsim import SimulationError, TopologyError
from .orchestrator import LogLockedError, MigrationLog, write_migration_csv
from .scenario import ConfigError, Scenario, load_scenario
from .telemetry import (
    Collective,
    SchemaError,
    TelemetryError,
    inject_collective,
    inject_sparse,
    load_anomaly_spec,
    load_csv,
    write_csv,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

logger = logging.getLogger("edgemon")


def default_scenario_path() -> Path:
    return Path(str(resources.files("edgemon") / "data" / "default_scenario.yaml"))


# ------------------------------------------------------------------ helpers


def _scenario(args) -> Scenario:
    path = Path(args.scenario) if args.scenario else default_scenario_path()
    sc = load_scenario(path, require_seed=args.seed is None)
    if args.seed is not None:
        sc.raw["seed"] = args.seed
    if args.out is not None:
        sc.raw["output_dir"] = str(Path(args.out).resolve())
    if getattr(args, "runs", None) is not None:
        if args.runs < 1:
            raise ConfigError("--runs must be >= 1")
        sc.raw["migration"]["runs"] = args.runs
    if getattr(args, "threshold", None) is not None:
        if not 0.0 <= args.threshold <= 1.0:
            raise ConfigError("--threshold must lie in [0, 1]")
        sc.raw["detection"]["threshold"] = args.threshold
    if getattr(args, "no_mediator", False):
        sc.raw["orchestrator"]["include_mediator"] = False
    sc.output_dir.mkdir(parents=True, exist_ok=True)
    return sc


def _model(sc: Scenario, path: str | None) -> GbdtModel:
    """Load ``path``, else ``<out>/model.json``, else train from the scenario."""
    p = Path(path) if path else sc.output_dir / "model.json"
    if p.exists():
        return GbdtModel.load(p)
    if path:
        raise ConfigError(f"model file not found: {p}")
    logger.info("no model at %s; training one", p)
    model = ex.train_detector(sc)
    model.save(p)
    return model


def _variants(sc: Scenario) -> tuple[str, ...]:
    if sc.section("orchestrator")["include_mediator"]:
        return ("with_mediator", "without_mediator")
    return ("without_mediator",)


# -------------------------------------------------------------- subcommands


def cmd_generate(sc: Scenario, args) -> None:
    out = sc.output_dir
    write_csv(ex.make_training_set(sc), out / "train.csv")
    write_csv(ex.make_test_set(sc), out / "test.csv")
    print(f"wrote {out / 'train.csv'} and {out / 'test.csv'}")


def cmd_inject(sc: Scenario, args) -> None:
    out = sc.output_dir
    src = Path(args.input) if args.input else out / "test.csv"
    base = load_csv(src) if src.exists() else ex.make_test_set(sc)
    det = sc.section("detection")
    if args.spec:
        spec = load_anomaly_spec(args.spec)
        if isinstance(spec.pattern, Collective):
            ds = inject_collective(base, spec, args.start if args.start is not None else 0)
        else:
            ds = inject_sparse(base, spec)
        target = Path(args.output) if args.output else out / "injected.csv"
        write_csv(ds, target)
        print(f"wrote {target}")
        return
    for d in det["sparse_densities"]:
        ds = ex.inject_pattern(base, "sparse", d, sc.seed, det["injection_values"], det["feature_fraction"])
        write_csv(ds, out / f"test_sparse_{round(float(d) * 100)}pct.csv")
    for w in det["collective_lengths"]:
        ds = ex.inject_pattern(base, "collective", w, sc.seed, det["injection_values"], det["feature_fraction"])
        write_csv(ds, out / f"test_collective_{int(w)}.csv")
    print(f"wrote injected test sets to {out}")


def cmd_tune(sc: Scenario, args) -> None:
    n = args.trials if args.trials is not None else int(sc.section("detector")["hpo_trials"]) or 30
    study = ex.tune_detector(sc, ex.make_training_set(sc), n, log_path=sc.output_dir / "hpo_trials.csv")
    best = study.best_trial()
    params = GbdtParams(**{**vars(sc.gbdt_params()), **best.params})
    ex.save_params(params, sc.output_dir / "best_params.json")
    print(f"best trial {best.id}: loss {best.value:.6g} params {best.params}")


def cmd_train(sc: Scenario, args) -> None:
    params = None
    if args.params:
        params = ex.load_params(args.params)
    elif int(sc.section("detector")["hpo_trials"]) > 0:
        cmd_tune(sc, argparse.Namespace(trials=None))
        params = ex.load_params(sc.output_dir / "best_params.json")
    train_path = sc.output_dir / "train.csv"
    data = load_csv(train_path) if args.use_files and train_path.exists() else ex.make_training_set(sc)
    model = ex.train_detector(sc, data, params)
    model.save(sc.output_dir / "model.json")
    print(f"wrote {sc.output_dir / 'model.json'} ({len(model.trees)} trees)")


def cmd_evaluate(sc: Scenario, args) -> None:
    model = _model(sc, args.model)
    test = ex.make_test_set(sc)
    rows = ex.run_detection_experiment(sc, model, test)
    ex.write_rows(sc.output_dir / "detection.csv", ex.DetectionRow, rows)
    ex.write_rows(sc.output_dir / "detection_summary.csv", ex.DetectionSummary, ex.summarize_detection(rows))
    if not args.skip_latency:
        # wall-clock numbers vary run to run, so they get their own file
        ex.measure_latency(sc, model, test).write_csv(sc.output_dir / "inference_latency.csv")
    print(f"wrote detection tables to {sc.output_dir}")


def cmd_simulate(sc: Scenario, args) -> None:
    out = sc.output_dir
    summaries, records = ex.run_migration_experiment(sc, variants=_variants(sc))
    ex.write_rows(out / "migration_summary.csv", ex.MigrationSummary, summaries)
    for variant, recs in records.items():
        write_migration_csv(recs, out / f"migrations_{variant}.csv")
    model = _model(sc, getattr(args, "model", None))
    # without --inference-time each message is timed around the real model call;
    # latency never feeds back into virtual time, so the logs stay reproducible
    sim = ex.run_scenario_simulation(sc, model, inference_time_s=args.inference_time)
    log_path = out / "migration_log.csv"
    if log_path.exists():
        log_path.unlink()
    with MigrationLog(log_path) as log:
        for r in sim.records:
            log.append(r)
    sim.event_log.write_csv(out / "sm_context_events.csv")
    sim.runtime.write_placement_log(out / "placement_log.csv")
    sim.runtime.write_message_log(out / "message_log.csv")
    ex.write_rows(out / "gaps.csv", ex.GapStats, [ex.gap_stats(sim)])
    for s in summaries:
        print(f"{s.variant}: mean {s.mean_s:.3f} s std {s.std_s:.3f} s over {s.runs} runs")


def cmd_report(sc: Scenario, args) -> None:
    rep = ex.load_report(sc.output_dir)
    ex.emit_report(rep, sc.output_dir)
    print(ex.render_text(rep), end="")


def cmd_all(sc: Scenario, args) -> None:
    cmd_generate(sc, args)
    cmd_train(sc, argparse.Namespace(params=None, use_files=True))
    cmd_evaluate(sc, argparse.Namespace(model=None, skip_latency=False))
    cmd_simulate(sc, argparse.Namespace(model=None, inference_time=args.inference_time))
    cmd_report(sc, args)


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", help="scenario YAML file (default: packaged scenario)")
    common.add_argument("--seed", type=int, help="override the scenario seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="edgemon", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("generate", parents=[common], help="write synthetic training and test telemetry")

    s = sub.add_parser("inject", parents=[common], help="inject anomalies into a telemetry CSV")
    s.add_argument("--input", help="telemetry CSV (default: <out>/test.csv)")
    s.add_argument("--spec", help="anomaly spec file; without it every configured pattern is written")
    s.add_argument("--start", type=int, help="first row of a collective window")
    s.add_argument("--output", help="output CSV when --spec is given")

    s = sub.add_parser("tune", parents=[common], help="search detector hyperparameters with TPE")
    s.add_argument("--trials", type=int)

    s = sub.add_parser("train", parents=[common], help="train the anomaly detector")
    s.add_argument("--params", help="JSON file of detector parameters")
    s.add_argument("--use-files", action="store_true", help="train on <out>/train.csv when present")

    s = sub.add_parser("evaluate", parents=[common], help="detection experiment and inference latency")
    s.add_argument("--model")
    s.add_argument("--threshold", type=float)
    s.add_argument("--skip-latency", action="store_true")

    for name, text in (("simulate", "migration experiment and scenario replay"), ("all", "full pipeline")):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("--runs", type=int, help="simulated migrations per variant")
        s.add_argument("--no-mediator", action="store_true", help="migrate the inference service alone")
        s.add_argument("--inference-time", type=float, help="fixed seconds per inference (default: measured)")
        if name == "simulate":
            s.add_argument("--model")
        else:
            s.add_argument("--threshold", type=float)

    sub.add_parser("report", parents=[common], help="render tables from existing CSV outputs")
    return p


COMMANDS = {
    "generate": cmd_generate,
    "inject": cmd_inject,
    "tune": cmd_tune,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "simulate": cmd_simulate,
    "report": cmd_report,
    "all": cmd_all,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        sc = _scenario(args)
    except (ConfigError, TopologyError, SchemaError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        COMMANDS[args.command](sc, args)
    except (ConfigError, TopologyError, SchemaError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TelemetryError, TrainingError, HpoError, SimulationError, LogLockedError, OSError, ValueError, RuntimeError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
