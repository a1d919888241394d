"""Simulated edge runtime hosting the Mediator and inference microservices."""

from __future__ import annotations

import csv
import enum
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .gbdt import GbdtModel, predict_proba
from .netsim import MobilityTrace, Topology, VirtualClock, to_s, to_us
from .telemetry import FEATURES, TelemetryRecord


class EdgeError(Exception):
    pass


class DeploymentConflict(EdgeError):
    pass


class LifecycleError(EdgeError):
    pass


class AdaptationError(EdgeError):
    pass


class ServiceGap(EdgeError):
    """No in-sync inference service on the edge node the vehicle is routed to."""


class ServiceKind(enum.Enum):
    MEDIATOR = "mediator"
    INFERENCE = "inference"


class ServiceStatus(enum.IntEnum):
    DEPLOYING = 0
    IN_SYNC = 1
    TERMINATING = 2
    TERMINATED = 3


@dataclass
class ServiceInstance:
    service_id: str
    kind: ServiceKind
    node: str
    deploy_requested_at_us: int
    in_sync_at_us: int
    status: ServiceStatus = ServiceStatus.DEPLOYING
    history: list[tuple[int, ServiceStatus]] = field(default_factory=list)

    @property
    def active(self) -> bool:
        return self.status in (ServiceStatus.DEPLOYING, ServiceStatus.IN_SYNC)

    def advance(self, to: ServiceStatus, now_us: int) -> None:
        allowed = {
            ServiceStatus.DEPLOYING: (ServiceStatus.IN_SYNC, ServiceStatus.TERMINATING),
            ServiceStatus.IN_SYNC: (ServiceStatus.TERMINATING,),
            ServiceStatus.TERMINATING: (ServiceStatus.TERMINATED,),
            ServiceStatus.TERMINATED: (),
        }
        if to not in allowed[self.status]:
            raise LifecycleError(f"{self.kind.value}@{self.node}: {self.status.name} -> {to.name} not allowed")
        self.status = to
        self.history.append((now_us, to))


@dataclass(frozen=True)
class StartupDelay:
    """Normal startup delay in seconds, truncated at zero."""

    mean: float
    std: float

    def __post_init__(self):
        if self.mean < 0 or self.std < 0:
            raise ValueError("startup delay mean and std must be non-negative")

    def sample(self, rng: np.random.Generator) -> float:
        if self.std == 0:
            return self.mean
        for _ in range(1000):
            d = rng.normal(self.mean, self.std)
            if d > 0:
                return float(d)
        raise EdgeError(f"could not draw a positive delay from {self}")


# startup of the inference service alone is the migration time without the
# Mediator; an independent Mediator startup on top gives 24.57 + 42.18 ~ 66.75 s
# and sqrt(3.39^2 + 10.39^2) ~ 10.93 s with it
INFERENCE_STARTUP = StartupDelay(24.57, 3.39)
MEDIATOR_STARTUP = StartupDelay(42.18, 10.39)


@dataclass(frozen=True)
class LatencyProfile:
    startup: Mapping[ServiceKind, StartupDelay] = field(
        default_factory=lambda: {ServiceKind.INFERENCE: INFERENCE_STARTUP, ServiceKind.MEDIATOR: MEDIATOR_STARTUP}
    )
    hop_delays_s: tuple[float, ...] = (0.002, 0.003)
    teardown_s: float = 0.0

    def __post_init__(self):
        if any(h < 0 for h in self.hop_delays_s) or self.teardown_s < 0:
            raise ValueError("delays must be non-negative")


# ------------------------------------------------------------------- messages


@dataclass(frozen=True)
class ObuMessage:
    message_id: int
    time: float
    raw: str  # JSON object of feature name -> value, in any field order

    @classmethod
    def from_record(cls, message_id: int, time_s: float, record: TelemetryRecord, order=None) -> "ObuMessage":
        items = list(zip(FEATURES, record.features))
        if order is not None:
            items = [items[i] for i in order]
        return cls(message_id, time_s, json.dumps(dict(items)))


@dataclass(frozen=True)
class InferenceRequest:
    features: tuple[float, ...]


@dataclass(frozen=True)
class InferenceResponse:
    message_id: int
    probability: float
    label: int
    inference_time: float
    total_latency: float


def mediator_adapt(msg: ObuMessage) -> InferenceRequest:
    """Turn a raw OBU payload into a request with canonical feature order.

    Raises:
        AdaptationError: unparsable payload, missing or unknown field, or a
            non-numeric value.
    """
    try:
        payload = json.loads(msg.raw)
    except json.JSONDecodeError as exc:
        raise AdaptationError(f"message {msg.message_id}: bad payload ({exc})") from None
    if not isinstance(payload, dict):
        raise AdaptationError(f"message {msg.message_id}: payload is not an object")
    missing = [f for f in FEATURES if f not in payload]
    unknown = sorted(set(payload) - set(FEATURES))
    if missing or unknown:
        raise AdaptationError(f"message {msg.message_id}: missing={missing} unknown={unknown}")
    values = []
    for f in FEATURES:
        v = payload[f]
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise AdaptationError(f"message {msg.message_id}: field {f} is not a finite number")
        values.append(float(v))
    return InferenceRequest(tuple(values))


class Mediator:
    """Adapter that counts dropped messages instead of raising."""

    def __init__(self):
        self.dropped = 0
        self.forwarded = 0

    def adapt(self, msg: ObuMessage) -> InferenceRequest | None:
        try:
            req = mediator_adapt(msg)
        except AdaptationError:
            self.dropped += 1
            return None
        self.forwarded += 1
        return req


# -------------------------------------------------------------------- runtime


@dataclass(frozen=True)
class PlacementEvent:
    time_us: int
    service_id: str
    kind: ServiceKind
    node: str
    status: ServiceStatus


@dataclass(frozen=True)
class MessageOutcome:
    time_us: int
    message_id: int
    node: str
    outcome: str  # "ok", "gap" or "dropped"


class EdgeRuntime:
    """Placement table and lifecycle engine for all edge nodes.

    Deployments become IN_SYNC after a sampled startup delay scheduled on the
    shared virtual clock; the random stream is owned by the runtime so a
    fixed seed reproduces every delay.
    """

    def __init__(
        self,
        topology: Topology,
        clock: VirtualClock,
        profile: LatencyProfile | None = None,
        seed: int | Sequence[int] = 0,
    ):
        self.topology = topology
        self.clock = clock
        self.profile = profile or LatencyProfile()
        self.rng = np.random.default_rng(seed)
        self.instances: list[ServiceInstance] = []
        self.placement_log: list[PlacementEvent] = []
        self.message_log: list[MessageOutcome] = []
        self.mediator = Mediator()

    def _record(self, inst: ServiceInstance, status: ServiceStatus) -> None:
        self.placement_log.append(PlacementEvent(self.clock.now_us, inst.service_id, inst.kind, inst.node, status))

    def _transition(self, inst: ServiceInstance, to: ServiceStatus) -> None:
        if inst.status is to:
            return
        if to is ServiceStatus.IN_SYNC and inst.status is not ServiceStatus.DEPLOYING:
            return  # torn down before it came up
        inst.advance(to, self.clock.now_us)
        self._record(inst, to)

    def deploy(
        self,
        service_id: str,
        kind: ServiceKind,
        node: str,
        after: ServiceInstance | None = None,
        delay_s: float | None = None,
    ) -> ServiceInstance:
        """Start a service instance on ``node``.

        With ``after``, the startup delay counts from that instance's
        readiness (the Mediator waits for the inference service).
        """
        if node not in self.topology.edge_ids:
            raise EdgeError(f"unknown edge node {node!r}")
        for inst in self.instances:
            if inst.service_id == service_id and inst.kind is kind and inst.node == node and inst.active:
                raise DeploymentConflict(f"{service_id}/{kind.value} already {inst.status.name} on {node}")
        if delay_s is None:
            delay_s = self.profile.startup[kind].sample(self.rng)
        now = self.clock.now_us
        start = max(now, after.in_sync_at_us) if after is not None else now
        inst = ServiceInstance(service_id, kind, node, now, start + to_us(delay_s))
        inst.history.append((now, ServiceStatus.DEPLOYING))
        self.instances.append(inst)
        self._record(inst, ServiceStatus.DEPLOYING)
        if inst.in_sync_at_us == now:
            self._transition(inst, ServiceStatus.IN_SYNC)
        else:
            self.clock.schedule_at(inst.in_sync_at_us, self._transition, inst, ServiceStatus.IN_SYNC)
        return inst

    def terminate(self, inst: ServiceInstance) -> None:
        if not inst.active:
            raise LifecycleError(f"{inst.kind.value}@{inst.node} is already {inst.status.name}")
        self._transition(inst, ServiceStatus.TERMINATING)
        teardown = to_us(self.profile.teardown_s)
        if teardown == 0:
            self._transition(inst, ServiceStatus.TERMINATED)
        else:
            self.clock.schedule_in(teardown, self._transition, inst, ServiceStatus.TERMINATED)

    def active_instances(self, service_id: str) -> list[ServiceInstance]:
        return [i for i in self.instances if i.service_id == service_id and i.active]

    def instance(self, service_id: str, kind: ServiceKind, node: str) -> ServiceInstance | None:
        for i in reversed(self.instances):
            if i.service_id == service_id and i.kind is kind and i.node == node and i.active:
                return i
        return None

    def in_sync_nodes(self, service_id: str, kind: ServiceKind = ServiceKind.INFERENCE) -> list[str]:
        return [
            i.node
            for i in self.instances
            if i.service_id == service_id and i.kind is kind and i.status is ServiceStatus.IN_SYNC
        ]

    # ------------------------------------------------------------- data path

    def route_and_infer(
        self,
        msg: ObuMessage,
        tai: str,
        model: GbdtModel,
        service_id: str,
        kinds: Iterable[ServiceKind] = (ServiceKind.MEDIATOR, ServiceKind.INFERENCE),
        inference_time_s: float | None = None,
        threshold: float = 0.5,
    ) -> InferenceResponse:
        """Carry a message vehicle -> UPF(tai) -> Mediator -> inference.

        Latency is the sum of hop delays plus the model's inference time,
        measured around ``predict_proba`` unless ``inference_time_s`` is given.

        Raises:
            ServiceGap: a required service is not IN_SYNC on the target node.
            AdaptationError: the Mediator rejected the payload.
        """
        node = self.topology.edge_for_tai(tai)
        now = self.clock.now_us
        kinds = tuple(kinds)
        for kind in kinds:
            inst = self.instance(service_id, kind, node)
            if inst is None or inst.status is not ServiceStatus.IN_SYNC:
                self.message_log.append(MessageOutcome(now, msg.message_id, node, "gap"))
                raise ServiceGap(f"message {msg.message_id}: no in-sync {kind.value} on {node}")
        if ServiceKind.MEDIATOR in kinds:
            req = self.mediator.adapt(msg)
            if req is None:
                self.message_log.append(MessageOutcome(now, msg.message_id, node, "dropped"))
                raise AdaptationError(f"message {msg.message_id} dropped by mediator")
        else:
            req = mediator_adapt(msg)
        t0 = time.perf_counter()
        p = predict_proba(model, req.features)
        measured = time.perf_counter() - t0
        infer = measured if inference_time_s is None else inference_time_s
        self.message_log.append(MessageOutcome(now, msg.message_id, node, "ok"))
        return InferenceResponse(
            msg.message_id, p, int(p >= threshold), infer, sum(self.profile.hop_delays_s) + infer
        )

    # ----------------------------------------------------------------- logs

    def write_placement_log(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time_s", "service_id", "kind", "node", "status"])
            for e in self.placement_log:
                w.writerow([repr(to_s(e.time_us)), e.service_id, e.kind.value, e.node, e.status.name])

    def write_message_log(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time_s", "message_id", "node", "outcome"])
            for m in self.message_log:
                w.writerow([repr(to_s(m.time_us)), m.message_id, m.node, m.outcome])


def schedule_telemetry(
    runtime: EdgeRuntime,
    trace: MobilityTrace,
    records: Sequence[TelemetryRecord],
    period_s: float,
    model: GbdtModel,
    service_id: str,
    kinds: Iterable[ServiceKind] = (ServiceKind.MEDIATOR, ServiceKind.INFERENCE),
    inference_time_s: float | None = None,
    start_s: float = 0.0,
) -> list[InferenceResponse]:
    """Queue one OBU message per record, ``period_s`` apart, on the runtime's clock.

    Responses are appended to the returned list as the clock runs; gaps and
    drops only show up in ``runtime.message_log``.
    """
    kinds = tuple(kinds)
    responses: list[InferenceResponse] = []

    def send(i: int, rec: TelemetryRecord) -> None:
        t = runtime.clock.now
        rn = trace.radio_at(t)
        if rn is None:
            return
        msg = ObuMessage.from_record(i, t, rec)
        try:
            responses.append(
                runtime.route_and_infer(
                    msg, runtime.topology.tai_of(rn), model, service_id, kinds, inference_time_s
                )
            )
        except (ServiceGap, AdaptationError):
            pass

    for i, rec in enumerate(records):
        runtime.clock.schedule_at(to_us(start_s + i * period_s), send, i, rec)
    return responses
