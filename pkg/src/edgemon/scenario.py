"""Scenario files: one YAML document describing a full experiment."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .edge import LatencyProfile, ServiceKind, StartupDelay
from .gbdt import GbdtParams
from .netsim import (
    DEFAULT_DELIVERY_LATENCY_S,
    DEFAULT_TOPOLOGY_CONFIG,
    MobilityTrace,
    Topology,
    TopologyError,
    build_topology,
    default_trace,
    load_trace_csv,
)
from .orchestrator import OrchestratorConfig
from .telemetry import FEATURES, REFERENCE_STATS, DEFAULT_INJECTION_VALUES, FeatureSummary, TEST_SET_SIZE, load_csv, summarize


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, Any] = {
    "seed": 20250101,
    "output_dir": "out",
    "telemetry": {
        "stats": "reference",
        "test_size": TEST_SET_SIZE,
        "train_size": TEST_SET_SIZE,
        "train_sparse_density": 0.05,
        "train_collective_len": 50,
    },
    "detection": {
        "sparse_densities": [0.01, 0.05, 0.10],
        "collective_lengths": [10, 100, 200],
        "feature_fraction": 0.5,
        "seeds": 5,
        "threshold": 0.5,
        "injection_values": dict(DEFAULT_INJECTION_VALUES),
    },
    "detector": {
        "params": {
            "num_trees": 100,
            "max_depth": 4,
            "min_samples_leaf": 20,
            "learning_rate": 0.1,
            "min_gain_to_split": 1e-6,
        },
        "hpo_trials": 0,
        "latency_repetitions": 2,
    },
    "topology": copy.deepcopy(DEFAULT_TOPOLOGY_CONFIG),
    "trace": {"period_s": 120.0, "laps": 3},
    "network": {"delivery_latency_s": DEFAULT_DELIVERY_LATENCY_S},
    "edge": {
        "inference_startup": {"mean": 24.57, "std": 3.39},
        "mediator_startup": {"mean": 42.18, "std": 10.39},
        "hop_delays_s": [0.002, 0.003],
        "teardown_s": 0.0,
        "telemetry_period_s": 1.0,
    },
    "orchestrator": {"poll_interval_s": 0.5, "max_polls": 600, "action_delay_s": 0.0, "include_mediator": True},
    "migration": {"runs": 100},
}


def _merge(base: dict, over: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown scenario key {k!r}")
        if isinstance(base[k], dict) and isinstance(v, Mapping) and k not in ("topology", "injection_values", "trace"):
            out[k] = _merge(base[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class Scenario:
    raw: dict
    base_dir: Path = field(default_factory=Path.cwd)

    # access helpers -----------------------------------------------------

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def output_dir(self) -> Path:
        p = Path(self.raw["output_dir"])
        return p if p.is_absolute() else self.base_dir / p

    def section(self, name: str) -> dict:
        return self.raw[name]

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else self.base_dir / path

    def feature_stats(self) -> dict[str, FeatureSummary]:
        src = self.raw["telemetry"]["stats"]
        if src == "reference":
            return dict(REFERENCE_STATS)
        return summarize(load_csv(self.resolve(src)))

    def gbdt_params(self) -> GbdtParams:
        try:
            return GbdtParams(**self.raw["detector"]["params"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"detector.params: {exc}") from None

    def topology(self) -> Topology:
        return build_topology(self.raw["topology"])

    def trace(self) -> MobilityTrace:
        t = self.raw["trace"]
        if "file" in t:
            return load_trace_csv(self.resolve(t["file"]))
        return default_trace(float(t.get("period_s", 120.0)), int(t.get("laps", 3)))

    def latency_profile(self) -> LatencyProfile:
        e = self.raw["edge"]
        return LatencyProfile(
            startup={
                ServiceKind.INFERENCE: StartupDelay(**e["inference_startup"]),
                ServiceKind.MEDIATOR: StartupDelay(**e["mediator_startup"]),
            },
            hop_delays_s=tuple(float(h) for h in e["hop_delays_s"]),
            teardown_s=float(e["teardown_s"]),
        )

    def orchestrator_config(self) -> OrchestratorConfig:
        o = self.raw["orchestrator"]
        return OrchestratorConfig(float(o["poll_interval_s"]), int(o["max_polls"]), float(o["action_delay_s"]))

    def validate(self) -> None:
        """Build every derived object once so config mistakes surface before any work."""
        try:
            self.seed
            self.feature_stats()
            self.gbdt_params()
            topo = self.topology()
            self.trace().validate(topo)
            self.latency_profile()
            self.orchestrator_config()
        except (TopologyError, ConfigError):
            raise
        except (KeyError, TypeError, ValueError, OSError) as exc:
            raise ConfigError(f"invalid scenario: {exc}") from exc
        det = self.raw["detection"]
        unknown = set(det["injection_values"]) - set(FEATURES)
        if unknown:
            raise ConfigError(f"injection values for unknown features: {sorted(unknown)}")
        if int(det["seeds"]) < 1 or int(self.raw["migration"]["runs"]) < 1:
            raise ConfigError("detection.seeds and migration.runs must be >= 1")


def default_scenario(**overrides) -> Scenario:
    return Scenario(_merge(DEFAULTS, overrides))


def load_scenario(path: str | Path, require_seed: bool = True) -> Scenario:
    """Read a scenario file; missing keys take defaults except the seed."""
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except FileNotFoundError:
        raise ConfigError(f"scenario file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if not isinstance(doc, Mapping):
        raise ConfigError("scenario must be a mapping")
    if require_seed and "seed" not in doc:
        raise ConfigError("scenario must set an explicit 'seed'")
    sc = Scenario(_merge(DEFAULTS, doc), path.parent.resolve())
    sc.validate()
    return sc


def dump_scenario(scenario: Scenario) -> str:
    return yaml.safe_dump(scenario.raw, sort_keys=False)
