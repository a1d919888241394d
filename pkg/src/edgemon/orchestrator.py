"""Closed-loop migration of the condition-monitoring service on handover events."""

from __future__ import annotations

import csv
import fcntl
import logging
import os
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Union

from .edge import EdgeRuntime, ServiceInstance, ServiceKind, ServiceStatus
from .netsim import SmContextEvent, Topology, VirtualClock, to_s, to_us

logger = logging.getLogger(__name__)

DEFAULT_SERVICE_ID = "condition-monitoring"
WITH_MEDIATOR = (ServiceKind.INFERENCE, ServiceKind.MEDIATOR)
WITHOUT_MEDIATOR = (ServiceKind.INFERENCE,)


class OrchestratorError(Exception):
    pass


class MappingError(OrchestratorError, KeyError):
    pass


class MigrationTimeout(OrchestratorError):
    def __init__(self, service_id: str, request_us: int, polls: int):
        super().__init__(f"{service_id} not IN_SYNC after {polls} polls")
        self.request_us = request_us
        self.polls = polls


class LogLockedError(OrchestratorError):
    pass


@dataclass(frozen=True)
class OrchestratorConfig:
    poll_interval_s: float = 0.5
    max_polls: int = 600
    action_delay_s: float = 0.0  # orchestrator processing before the relocation request

    def __post_init__(self):
        if self.poll_interval_s <= 0 or self.max_polls < 1 or self.action_delay_s < 0:
            raise ValueError(f"invalid orchestrator config {self}")
        if self.action_delay_s > self.poll_interval_s:
            raise ValueError("action delay above one polling interval breaks the timing decomposition")


@dataclass(frozen=True)
class OnNode:
    node: str
    status: ServiceStatus


@dataclass(frozen=True)
class Absent:
    pass


@dataclass(frozen=True)
class NoOp:
    node: str


@dataclass(frozen=True)
class MigrationRecord:
    """One relocation; times are virtual microseconds, seconds via properties."""

    event_time_us: int
    received_us: int
    request_us: int
    in_sync_us: int | None
    source: str
    target: str
    low_level_us: int
    outcome: str = "ok"

    @property
    def event_time(self) -> float:
        return to_s(self.event_time_us)

    @property
    def request_time(self) -> float:
        return to_s(self.request_us)

    @property
    def in_sync_time(self) -> float | None:
        return None if self.in_sync_us is None else to_s(self.in_sync_us)

    @property
    def total(self) -> float | None:
        return None if self.in_sync_us is None else to_s(self.in_sync_us - self.request_us)

    @property
    def low_level_time(self) -> float:
        return to_s(self.low_level_us)

    @property
    def high_level_time(self) -> float | None:
        """Orchestrator action time plus polling overshoot past actual readiness."""
        if self.in_sync_us is None:
            return None
        action = self.request_us - self.received_us
        overshoot = self.in_sync_us - (self.request_us + self.low_level_us)
        return to_s(action + overshoot)


MIGRATION_LOG_COLUMNS = [
    "event_time",
    "received_time",
    "request_time",
    "in_sync_time",
    "source",
    "target",
    "high_level_s",
    "low_level_s",
    "total_s",
    "outcome",
]


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(v)


def record_to_row(r: MigrationRecord) -> list[str]:
    return [
        _fmt(r.event_time),
        _fmt(to_s(r.received_us)),
        _fmt(r.request_time),
        _fmt(r.in_sync_time),
        r.source,
        r.target,
        _fmt(r.high_level_time),
        _fmt(r.low_level_time),
        _fmt(r.total),
        r.outcome,
    ]


def row_to_record(row: Mapping[str, str]) -> MigrationRecord:
    in_sync = row["in_sync_time"]
    return MigrationRecord(
        event_time_us=to_us(float(row["event_time"])),
        received_us=to_us(float(row["received_time"])),
        request_us=to_us(float(row["request_time"])),
        in_sync_us=to_us(float(in_sync)) if in_sync else None,
        source=row["source"],
        target=row["target"],
        low_level_us=to_us(float(row["low_level_s"])),
        outcome=row["outcome"],
    )


class MigrationLog:
    """Append-only CSV migration log held under an exclusive advisory lock."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._fh = open(self.path, "a+", newline="", encoding="utf-8")
        try:
            fcntl.flock(self._fh.fileno(), fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            self._fh.close()
            raise LogLockedError(f"{self.path} is locked by another run") from None
        self._fh.seek(0, os.SEEK_END)
        self._writer = csv.writer(self._fh, lineterminator="\n")
        if self._fh.tell() == 0:
            self._writer.writerow(MIGRATION_LOG_COLUMNS)
            self._flush()

    def _flush(self) -> None:
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def append(self, record: MigrationRecord) -> None:
        if self._fh.closed:
            raise OrchestratorError("migration log is closed")
        self._writer.writerow(record_to_row(record))
        self._flush()

    def close(self) -> None:
        if not self._fh.closed:
            fcntl.flock(self._fh.fileno(), fcntl.LOCK_UN)
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @staticmethod
    def read(path: str | Path) -> list[MigrationRecord]:
        with open(path, newline="", encoding="utf-8") as fh:
            return [row_to_record(r) for r in csv.DictReader(fh)]


def persist_record(record: MigrationRecord, store: MigrationLog) -> None:
    store.append(record)


def write_migration_csv(records: Iterable[MigrationRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MIGRATION_LOG_COLUMNS)
        for r in records:
            w.writerow(record_to_row(r))


def tai_edge_map(topology: Topology) -> dict[tuple[str, str], str]:
    """(PLMN, TAI) -> edge node, composed through each TAI's UPF."""
    return {(t.plmn, t.tai): topology.edge_of_upf(t.upf) for t in topology.tais}


def map_event(event: SmContextEvent, mapping: Mapping[tuple[str, str], str]) -> str:
    try:
        return mapping[(event.plmn, event.new_tai)]
    except KeyError:
        raise MappingError(f"no edge node for PLMN {event.plmn} TAI {event.new_tai}") from None


HandleResult = Union[NoOp, MigrationRecord]


class Orchestrator:
    """Single serialized consumer of SM context events.

    Events that arrive while a migration is in flight are queued and handled
    in arrival order once the service reports IN_SYNC.
    """

    def __init__(
        self,
        clock: VirtualClock,
        topology: Topology,
        runtime: EdgeRuntime,
        service_id: str = DEFAULT_SERVICE_ID,
        kinds: tuple[ServiceKind, ...] = WITH_MEDIATOR,
        config: OrchestratorConfig | None = None,
        log: MigrationLog | None = None,
    ):
        if ServiceKind.INFERENCE not in kinds:
            raise ValueError("the monitored service must include the inference component")
        self.clock = clock
        self.topology = topology
        self.runtime = runtime
        self.service_id = service_id
        self.kinds = tuple(kinds)
        self.config = config or OrchestratorConfig()
        self.log = log
        self.mapping = tai_edge_map(topology)
        self.records: list[MigrationRecord] = []
        self.noops = 0
        self.errors: list[tuple[SmContextEvent, Exception]] = []
        self._queue: deque[SmContextEvent] = deque()
        self._busy = False

    # setup --------------------------------------------------------------

    def bootstrap(self, node: str) -> None:
        """Place the service on ``node`` already IN_SYNC (state before the trial starts)."""
        for kind in self.kinds:
            self.runtime.deploy(self.service_id, kind, node, delay_s=0.0)

    # event stream ---------------------------------------------------------

    def on_event(self, event: SmContextEvent) -> None:
        self._queue.append(event)
        if self._busy:
            return
        self._busy = True
        try:
            while self._queue:
                ev = self._queue.popleft()
                try:
                    self.handle_event(ev)
                except MappingError as exc:
                    logger.error("dropping event %s: %s", ev, exc)
                    self.errors.append((ev, exc))
        finally:
            self._busy = False

    __call__ = on_event

    # the five steps ---------------------------------------------------------

    def verify_status(self) -> OnNode | Absent:
        """Where the service currently lives; the newest active deployment wins."""
        active = self.runtime.active_instances(self.service_id)
        anchor = [i for i in active if i.kind is ServiceKind.INFERENCE]
        if not anchor:
            return Absent()
        node = anchor[-1].node
        parts = [i for i in active if i.node == node and i.kind in self.kinds]
        if {i.kind for i in parts} >= set(self.kinds) and all(i.status is ServiceStatus.IN_SYNC for i in parts):
            return OnNode(node, ServiceStatus.IN_SYNC)
        return OnNode(node, ServiceStatus.DEPLOYING)

    def relocate(self, target: str) -> tuple[int, list[ServiceInstance]]:
        """Stop the service where it runs and start it on ``target``."""
        current = self.verify_status()
        if isinstance(current, OnNode) and current.node == target:
            raise OrchestratorError(f"{self.service_id} already on {target}; nothing to relocate")
        request_us = self.clock.now_us
        for inst in self.runtime.active_instances(self.service_id):
            self.runtime.terminate(inst)
        started: list[ServiceInstance] = []
        prev = None
        for kind in self.kinds:
            prev = self.runtime.deploy(self.service_id, kind, target, after=prev)
            started.append(prev)
        return request_us, started

    def ready_at_us(self, started: list[ServiceInstance]) -> int:
        return max(i.in_sync_at_us for i in started)

    def poll_until_in_sync(self, target: str, request_us: int) -> int:
        """Check status at request + k * interval, k = 1, 2, ...; return the first IN_SYNC tick."""
        step = to_us(self.config.poll_interval_s)
        for k in range(1, self.config.max_polls + 1):
            tick = request_us + k * step
            self.clock.run_until(tick)
            status = self.verify_status()
            if isinstance(status, OnNode) and status.node == target and status.status is ServiceStatus.IN_SYNC:
                return tick
        raise MigrationTimeout(self.service_id, request_us, self.config.max_polls)

    def handle_event(self, event: SmContextEvent) -> HandleResult:
        received = self.clock.now_us
        target = map_event(event, self.mapping)
        current = self.verify_status()
        if isinstance(current, OnNode) and current.node == target:
            self.noops += 1
            return NoOp(target)
        source = current.node if isinstance(current, OnNode) else ""
        if self.config.action_delay_s:
            self.clock.run_until(received + to_us(self.config.action_delay_s))
        request_us, started = self.relocate(target)
        low = self.ready_at_us(started) - request_us
        try:
            in_sync = self.poll_until_in_sync(target, request_us)
            outcome = "ok"
        except MigrationTimeout:
            in_sync, outcome = None, "timeout"
        rec = MigrationRecord(to_us(event.time), received, request_us, in_sync, source, target, low, outcome)
        self.records.append(rec)
        if self.log is not None:
            persist_record(rec, self.log)
        if outcome != "ok":
            logger.warning("migration of %s to %s timed out", self.service_id, target)
        return rec

    def placement(self) -> str | None:
        s = self.verify_status()
        return s.node if isinstance(s, OnNode) else None

