"""Discrete-event network model: topology, mobility trace and handover events.

Virtual time is kept in integer microseconds so that durations built from
fixed polling steps stay exact.
"""

from __future__ import annotations

import bisect
import csv
import heapq
import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

US_PER_S = 1_000_000
DEFAULT_DELIVERY_LATENCY_S = 0.05
DEFAULT_PLMN = "00101"
DEFAULT_SESSION = "pdu-session-1"


def to_us(seconds: float) -> int:
    return int(round(seconds * US_PER_S))


def to_s(us: int) -> float:
    return us / US_PER_S


class SimulationError(RuntimeError):
    def __init__(self, message: str, event=None):
        super().__init__(message)
        self.event = event


class VirtualClock:
    """Event queue ordered by (time, insertion sequence)."""

    def __init__(self, start_us: int = 0):
        self.now_us = start_us
        self._queue: list[tuple[int, int, Callable, tuple]] = []
        self._seq = itertools.count()

    @property
    def now(self) -> float:
        return to_s(self.now_us)

    def schedule_at(self, time_us: int, callback: Callable, *args) -> None:
        if time_us < self.now_us:
            raise SimulationError(f"cannot schedule at {time_us} us, clock is at {self.now_us} us")
        heapq.heappush(self._queue, (time_us, next(self._seq), callback, args))

    def schedule_in(self, delay_us: int, callback: Callable, *args) -> None:
        self.schedule_at(self.now_us + delay_us, callback, *args)

    def pending(self) -> int:
        return len(self._queue)

    def peek(self) -> int | None:
        return self._queue[0][0] if self._queue else None

    def step(self) -> bool:
        if not self._queue:
            return False
        t, _, cb, args = heapq.heappop(self._queue)
        self.now_us = t
        cb(*args)
        return True

    def run_until(self, time_us: int) -> None:
        """Process every event due at or before ``time_us`` then park the clock there."""
        if time_us < self.now_us:
            raise SimulationError("virtual time cannot move backwards")
        while self._queue and self._queue[0][0] <= time_us:
            self.step()
        self.now_us = time_us

    def run(self) -> None:
        while self.step():
            pass


# --------------------------------------------------------------------- topology


class TopologyError(ValueError):
    def __init__(self, problems: Sequence[str]):
        super().__init__("invalid topology: " + "; ".join(problems))
        self.problems = list(problems)


class UnknownIdError(KeyError):
    pass


@dataclass(frozen=True)
class RadioNode:
    id: str
    tai: str
    position: tuple[float, float] = (0.0, 0.0)


@dataclass(frozen=True)
class TrackingArea:
    tai: str
    plmn: str
    upf: str


@dataclass(frozen=True)
class EdgeNode:
    id: str
    upf: str
    position: tuple[float, float] = (0.0, 0.0)


@dataclass(frozen=True)
class Topology:
    radio_nodes: tuple[RadioNode, ...]
    tais: tuple[TrackingArea, ...]
    edge_nodes: tuple[EdgeNode, ...]

    def __post_init__(self):
        problems = []
        tai_ids = [t.tai for t in self.tais]
        for dup in sorted({t for t in tai_ids if tai_ids.count(t) > 1}):
            problems.append(f"TAI {dup} is declared more than once (one UPF per TAI)")
        rn_ids = [r.id for r in self.radio_nodes]
        for dup in sorted({r for r in rn_ids if rn_ids.count(r) > 1}):
            problems.append(f"duplicate radio node {dup}")
        for r in self.radio_nodes:
            if r.tai not in tai_ids:
                problems.append(f"radio node {r.id} references unknown TAI {r.tai}")
        upfs = [t.upf for t in self.tais]
        for dup in sorted({u for u in upfs if upfs.count(u) > 1}):
            problems.append(f"UPF {dup} serves more than one TAI")
        edge_upfs = [e.upf for e in self.edge_nodes]
        for u in sorted(set(upfs)):
            c = edge_upfs.count(u)
            if c == 0:
                problems.append(f"UPF {u} has no edge node")
            elif c > 1:
                problems.append(f"UPF {u} has {c} edge nodes")
        for e in self.edge_nodes:
            if e.upf not in upfs:
                problems.append(f"edge node {e.id} references unknown UPF {e.upf}")
        eids = [e.id for e in self.edge_nodes]
        for dup in sorted({e for e in eids if eids.count(e) > 1}):
            problems.append(f"duplicate edge node {dup}")
        if problems:
            raise TopologyError(problems)

    def tai_of(self, radio_node: str) -> str:
        for r in self.radio_nodes:
            if r.id == radio_node:
                return r.tai
        raise UnknownIdError(f"unknown radio node {radio_node!r}")

    def area(self, tai: str) -> TrackingArea:
        for t in self.tais:
            if t.tai == tai:
                return t
        raise UnknownIdError(f"unknown TAI {tai!r}")

    def edge_of_upf(self, upf: str) -> str:
        for e in self.edge_nodes:
            if e.upf == upf:
                return e.id
        raise UnknownIdError(f"unknown UPF {upf!r}")

    def edge_for_tai(self, tai: str) -> str:
        return self.edge_of_upf(nearest_upf(self, tai))

    @property
    def edge_ids(self) -> list[str]:
        return [e.id for e in self.edge_nodes]


def nearest_upf(topology: Topology, tai: str) -> str:
    """UPF serving ``tai``; geographic proximity is fixed when the topology is written."""
    return topology.area(tai).upf


def _pos(v) -> tuple[float, float]:
    if v is None:
        return (0.0, 0.0)
    x, y = v
    return (float(x), float(y))


def build_topology(config: Mapping) -> Topology:
    """Build a topology from the ``topology`` section of a scenario.

    Raises:
        TopologyError: listing every dangling or duplicated reference.
    """
    try:
        radio = tuple(
            RadioNode(str(r["id"]), str(r["tai"]), _pos(r.get("position"))) for r in config["radio_nodes"]
        )
        tais = tuple(
            TrackingArea(str(t["tai"]), str(t.get("plmn", DEFAULT_PLMN)), str(t["upf"])) for t in config["tais"]
        )
        edges = tuple(
            EdgeNode(str(e["id"]), str(e["upf"]), _pos(e.get("position"))) for e in config["edge_nodes"]
        )
    except (KeyError, TypeError) as exc:
        raise TopologyError([f"malformed topology section: {exc!r}"]) from None
    return Topology(radio, tais, edges)


DEFAULT_TOPOLOGY_CONFIG = {
    "radio_nodes": [
        {"id": "rn1", "tai": "tai1", "position": [0.0, 0.0]},
        {"id": "rn2", "tai": "tai2", "position": [800.0, 0.0]},
    ],
    "tais": [
        {"tai": "tai1", "plmn": DEFAULT_PLMN, "upf": "upf1"},
        {"tai": "tai2", "plmn": DEFAULT_PLMN, "upf": "upf2"},
    ],
    "edge_nodes": [
        {"id": "edge1", "upf": "upf1", "position": [0.0, 50.0]},
        {"id": "edge2", "upf": "upf2", "position": [800.0, 50.0]},
    ],
}


def default_topology() -> Topology:
    """Two radio nodes, each its own TAI with a UPF and an edge server."""
    return build_topology(DEFAULT_TOPOLOGY_CONFIG)


def ring_topology(n: int, plmn: str = DEFAULT_PLMN) -> Topology:
    return build_topology(
        {
            "radio_nodes": [{"id": f"rn{i}", "tai": f"tai{i}"} for i in range(1, n + 1)],
            "tais": [{"tai": f"tai{i}", "plmn": plmn, "upf": f"upf{i}"} for i in range(1, n + 1)],
            "edge_nodes": [{"id": f"edge{i}", "upf": f"upf{i}"} for i in range(1, n + 1)],
        }
    )


# ------------------------------------------------------------------------ trace


@dataclass(frozen=True)
class MobilityTrace:
    """Cell attachments of the vehicle as (time in seconds, radio node id)."""

    entries: tuple[tuple[float, str], ...]

    def __post_init__(self):
        times = [t for t, _ in self.entries]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("trace times must strictly increase")

    def __len__(self) -> int:
        return len(self.entries)

    def validate(self, topology: Topology) -> None:
        known = {r.id for r in topology.radio_nodes}
        bad = sorted({rn for _, rn in self.entries if rn not in known})
        if bad:
            raise TopologyError([f"trace references unknown radio node {b}" for b in bad])

    def radio_at(self, t: float) -> str | None:
        """Radio node attached at time ``t`` (None before the first entry)."""
        times = [e[0] for e in self.entries]
        i = bisect.bisect_right(times, t) - 1
        return self.entries[i][1] if i >= 0 else None


def load_trace_csv(path: str | Path) -> MobilityTrace:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"time_s", "radio_node_id"} <= set(reader.fieldnames):
            raise ValueError("trace CSV needs columns time_s, radio_node_id")
        return MobilityTrace(tuple((float(r["time_s"]), r["radio_node_id"].strip()) for r in reader))


def write_trace_csv(trace: MobilityTrace, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_s", "radio_node_id"])
        for t, rn in trace.entries:
            w.writerow([repr(float(t)), rn])


def default_trace(period_s: float = 120.0, laps: int = 3, radio_nodes: Sequence[str] = ("rn1", "rn2")) -> MobilityTrace:
    """Vehicle alternating between radio nodes, dwelling ``period_s`` on each."""
    entries = []
    t = 0.0
    for _ in range(laps):
        for rn in radio_nodes:
            entries.append((t, rn))
            t += period_s
    return MobilityTrace(tuple(entries))


def random_trace(
    topology: Topology, rng: np.random.Generator, n_steps: int, mean_dwell_s: float = 30.0
) -> MobilityTrace:
    """Random walk over radio nodes with exponential dwell times (at least 1 s)."""
    ids = [r.id for r in topology.radio_nodes]
    t = 0.0
    entries = []
    for _ in range(n_steps):
        entries.append((round(t, 3), ids[int(rng.integers(len(ids)))]))
        t += 1.0 + float(rng.exponential(mean_dwell_s))
    return MobilityTrace(tuple(entries))


# ----------------------------------------------------------------------- events


@dataclass(frozen=True)
class SmContextEvent:
    time: float
    plmn: str
    old_tai: str
    new_tai: str
    session_id: str = DEFAULT_SESSION

    def __post_init__(self):
        if self.old_tai == self.new_tai:
            raise ValueError("an SM context event needs a TAI change")


def detect_handovers(
    trace: MobilityTrace, topology: Topology, session_id: str = DEFAULT_SESSION
) -> list[SmContextEvent]:
    """One event per consecutive attachment pair that crosses a TAI boundary."""
    if len(trace) == 0:
        raise ValueError("trace is empty")
    events = []
    prev_tai = topology.tai_of(trace.entries[0][1])
    for t, rn in trace.entries[1:]:
        tai = topology.tai_of(rn)
        if tai != prev_tai:
            events.append(SmContextEvent(t, topology.area(tai).plmn, prev_tai, tai, session_id))
        prev_tai = tai
    return events


@dataclass(frozen=True)
class DeliveredEvent:
    delivered_at_us: int
    event: SmContextEvent

    @property
    def delivered_at(self) -> float:
        return to_s(self.delivered_at_us)


@dataclass
class EventLog:
    entries: list[DeliveredEvent] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["delivered_at_s", "event_time_s", "plmn", "old_tai", "new_tai", "session_id"])
            for d in self.entries:
                e = d.event
                w.writerow([repr(d.delivered_at), repr(float(e.time)), e.plmn, e.old_tai, e.new_tai, e.session_id])


Subscriber = Callable[[SmContextEvent], None]


def run(
    clock: VirtualClock,
    topology: Topology,
    trace: MobilityTrace,
    subscribers: Iterable[Subscriber],
    delivery_latency_s: float = DEFAULT_DELIVERY_LATENCY_S,
    session_id: str = DEFAULT_SESSION,
) -> EventLog:
    """Replay ``trace`` and notify subscribers of every TAI change.

    Each event reaches subscribers ``delivery_latency_s`` after the handover,
    in registration order. The clock is drained before returning, so any
    work subscribers schedule also completes.

    Raises:
        SimulationError: a subscriber raised; ``.event`` names the event.
    """
    trace.validate(topology)
    subs = list(subscribers)
    log = EventLog()
    latency = to_us(delivery_latency_s)
    if latency < 0:
        raise ValueError("delivery latency must be non-negative")

    def deliver(ev: SmContextEvent) -> None:
        log.entries.append(DeliveredEvent(clock.now_us, ev))
        for fn in subs:
            try:
                fn(ev)
            except SimulationError:
                raise
            except Exception as exc:
                raise SimulationError(f"subscriber {fn!r} failed on {ev}: {exc}", ev) from exc

    for ev in detect_handovers(trace, topology, session_id):
        clock.schedule_at(to_us(ev.time) + latency, deliver, ev)
    clock.run()
    return log
