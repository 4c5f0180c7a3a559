"""Discrete-event replay of job traces against simulated destinations.

Each job is dispatched once, at arrival, through the real pipeline with a
load snapshot of that instant, then waits in its destination's FIFO queue
until the queue head fits in free capacity. Background load occupies cores
independently of the simulated jobs and takes priority over queued jobs
when capacity frees up.
"""

from __future__ import annotations

import heapq
import json
import math
import random
from collections import deque
from collections.abc import Callable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .config import ResolvedConfig
from .dispatch import DispatchDecision, DispatchError, JobContext, dispatch
from .rank import LoadSnapshot, RankStrategy, Strategy

EPS = 1e-9

# event kinds, in tie-break order at equal times
_COMPLETE, _BG_END, _BG_START, _ARRIVE = 0, 1, 2, 3


class SimError(Exception):
    pass


class TraceError(SimError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class TraceJob:
    arrival_s: float
    tool_id: str
    service_s: float
    user: Optional[str] = None
    roles: tuple = ()
    input_gb: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "roles", tuple(self.roles))
        for name in ("arrival_s", "service_s", "input_gb"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
                raise ValueError(f"{name} must be a finite number")
            object.__setattr__(self, name, float(value))
        if self.arrival_s < 0:
            raise ValueError("arrival_s must be >= 0")
        if self.input_gb < 0:
            raise ValueError("input_gb must be >= 0")
        if self.service_s <= 0:
            raise ValueError("service_s must be > 0")

    def context(self) -> JobContext:
        return JobContext(self.tool_id, self.user, self.roles, self.input_gb)

    def to_dict(self) -> dict:
        return {
            "arrival_s": self.arrival_s,
            "tool_id": self.tool_id,
            "user": self.user,
            "roles": list(self.roles),
            "input_gb": self.input_gb,
            "service_s": self.service_s,
        }


@dataclass(frozen=True)
class BackgroundSegment:
    start_s: float
    end_s: float
    cores_occupied: float


@dataclass(frozen=True)
class SimDestination:
    id: str
    total_cores: int
    total_mem_gb: float
    total_gpus: int = 0
    background_load: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "background_load", tuple(self.background_load))
        if self.total_cores <= 0:
            raise ValueError(f"{self.id}: total_cores must be > 0")
        if self.total_mem_gb <= 0:
            raise ValueError(f"{self.id}: total_mem_gb must be > 0")
        if self.total_gpus < 0:
            raise ValueError(f"{self.id}: total_gpus must be >= 0")
        for seg in self.background_load:
            if seg.end_s < seg.start_s or seg.cores_occupied < 0:
                raise ValueError(f"{self.id}: malformed background segment {seg}")
        # the summed background demand peaks at some segment start
        for seg in self.background_load:
            t = seg.start_s
            demand = sum(s.cores_occupied for s in self.background_load if s.start_s <= t < s.end_s)
            if demand > self.total_cores + EPS:
                raise ValueError(f"{self.id}: background load {demand} exceeds total_cores at t={t}")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SimDestination":
        segments = []
        for item in data.get("background_load") or ():
            if isinstance(item, Mapping):
                segments.append(BackgroundSegment(float(item["start_s"]), float(item["end_s"]), float(item["cores_occupied"])))
            else:
                start, end, cores = item
                segments.append(BackgroundSegment(float(start), float(end), float(cores)))
        return cls(
            id=str(data["id"]),
            total_cores=int(data["total_cores"]),
            total_mem_gb=float(data["total_mem_gb"]),
            total_gpus=int(data.get("total_gpus", 0)),
            background_load=tuple(segments),
        )


@dataclass(frozen=True)
class JobOutcome:
    index: int
    destination_id: Optional[str]
    arrival_s: float
    start_s: Optional[float] = None
    end_s: Optional[float] = None
    enqueue_seq: Optional[int] = None
    unschedulable_reason: Optional[str] = None

    @property
    def wait_s(self) -> Optional[float]:
        return None if self.start_s is None else self.start_s - self.arrival_s


@dataclass(frozen=True)
class DestinationMetrics:
    jobs: int
    mean_wait_s: float
    utilization_fraction: float

    def to_dict(self) -> dict:
        return {"jobs": self.jobs, "mean_wait_s": self.mean_wait_s, "utilization_fraction": self.utilization_fraction}


@dataclass(frozen=True)
class SimMetrics:
    jobs_completed: int = 0
    jobs_unschedulable: int = 0
    jobs_still_queued: int = 0
    mean_wait_s: float = 0.0
    p50_wait_s: float = 0.0
    p95_wait_s: float = 0.0
    per_destination: Mapping[str, DestinationMetrics] = field(default_factory=dict)
    outcomes: tuple = field(default=(), compare=False, repr=False)

    def to_dict(self) -> dict:
        return {
            "jobs_completed": self.jobs_completed,
            "jobs_unschedulable": self.jobs_unschedulable,
            "jobs_still_queued": self.jobs_still_queued,
            "mean_wait_s": self.mean_wait_s,
            "p50_wait_s": self.p50_wait_s,
            "p95_wait_s": self.p95_wait_s,
            "per_destination": {k: v.to_dict() for k, v in self.per_destination.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


# ------------------------------------------------------------------ input


def _trace_job(data: Any) -> TraceJob:
    if not isinstance(data, dict):
        raise ValueError("expected a JSON object")
    missing = [k for k in ("arrival_s", "tool_id", "service_s") if k not in data]
    if missing:
        raise ValueError(f"missing field(s): {', '.join(missing)}")
    roles = data.get("roles") or []
    if isinstance(roles, str) or not isinstance(roles, list):
        raise ValueError("roles must be a list of strings")
    return TraceJob(
        arrival_s=data["arrival_s"],
        tool_id=str(data["tool_id"]),
        service_s=data["service_s"],
        user=data.get("user"),
        roles=tuple(str(r) for r in roles),
        input_gb=data.get("input_gb", 0.0),
    )


def load_trace(path: str | Path) -> list[TraceJob]:
    """Read a line-delimited JSON trace, sorted by arrival (stable)."""
    jobs = []
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                jobs.append(_trace_job(json.loads(line)))
            except (ValueError, TypeError) as exc:
                raise TraceError(str(exc), lineno) from None
    jobs.sort(key=lambda j: j.arrival_s)
    return jobs


def write_trace(path: str | Path, jobs: Sequence[TraceJob]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for job in jobs:
            handle.write(json.dumps(job.to_dict()) + "\n")


def load_destinations(path: str | Path) -> list[SimDestination]:
    """Read a JSON list of destination capacity records."""
    with open(path, encoding="utf-8") as handle:
        data = json.load(handle)
    if not isinstance(data, list):
        raise SimError("destination file must hold a JSON list")
    try:
        return [SimDestination.from_dict(item) for item in data]
    except (KeyError, TypeError, ValueError) as exc:
        raise SimError(f"bad destination record: {exc}") from None


# ------------------------------------------------------------- event loop


class _DestState:
    def __init__(self, spec: SimDestination):
        self.spec = spec
        self.free_cores = float(spec.total_cores)
        self.free_mem = float(spec.total_mem_gb)
        self.free_gpus = float(spec.total_gpus)
        self.queue: deque = deque()
        self.bg_claimed: dict[int, float] = {}
        self.bg_deficit: dict[int, float] = {}
        self.job_core_seconds = 0.0
        self.routed = 0
        self.waits: list[float] = []

    @property
    def occupied_cores(self) -> float:
        return self.spec.total_cores - self.free_cores

    def percent_allocated(self) -> float:
        return min(100.0, max(0.0, self.occupied_cores / self.spec.total_cores * 100.0))

    def fits(self, d: DispatchDecision) -> bool:
        return d.cores <= self.free_cores + EPS and d.mem <= self.free_mem + EPS and d.gpus <= self.free_gpus + EPS

    def could_ever_fit(self, d: DispatchDecision) -> bool:
        s = self.spec
        return d.cores <= s.total_cores + EPS and d.mem <= s.total_mem_gb + EPS and d.gpus <= s.total_gpus + EPS

    def check(self) -> None:
        if self.free_cores < -EPS or self.free_mem < -EPS or self.free_gpus < -EPS:
            raise AssertionError(f"capacity exceeded at {self.spec.id}")


Observer = Callable[[float, Mapping[str, _DestState]], None]


def _percentile(values: Sequence[float], q: float) -> float:
    return float(np.percentile(values, q)) if values else 0.0


def run_simulation(
    config: ResolvedConfig,
    destinations: Sequence[SimDestination],
    trace: Sequence[TraceJob],
    strategy: RankStrategy,
    seed: int = 0,
    observer: Optional[Observer] = None,
) -> SimMetrics:
    """Replay ``trace`` and report queue-wait metrics.

    Jobs that fail to dispatch, or whose envelope exceeds the chosen
    destination's total capacity, count as unschedulable. ``observer`` is
    called after every event with the current time and destination states.
    """
    unknown = [d.id for d in destinations if d.id not in config.destinations]
    if unknown:
        raise SimError(f"simulated destination(s) not in config: {', '.join(unknown)}")
    if len({d.id for d in destinations}) != len(destinations):
        raise SimError("duplicate simulated destination id")
    sim_config = config.with_destinations(d.id for d in destinations)
    states = {d.id: _DestState(d) for d in destinations}
    jobs = sorted(trace, key=lambda j: j.arrival_s)
    rng = random.Random(seed)

    events: list = []
    seq = 0

    def push(time: float, kind: int, payload: Any) -> None:
        nonlocal seq
        heapq.heappush(events, (time, kind, seq, payload))
        seq += 1

    for state in states.values():
        for index, seg in enumerate(state.spec.background_load):
            if seg.end_s > seg.start_s and seg.cores_occupied > 0:
                push(seg.start_s, _BG_START, (state.spec.id, index))
                push(seg.end_s, _BG_END, (state.spec.id, index))
    for index, job in enumerate(jobs):
        push(job.arrival_s, _ARRIVE, index)

    outcomes: dict[int, JobOutcome] = {}
    decisions: dict[int, DispatchDecision] = {}
    enqueue_counter = 0
    unschedulable = 0
    now = 0.0

    def settle(state: _DestState, t: float) -> None:
        for index in list(state.bg_deficit):
            take = min(state.bg_deficit[index], max(state.free_cores, 0.0))
            if take > 0:
                state.free_cores -= take
                state.bg_claimed[index] += take
                state.bg_deficit[index] -= take
            if state.bg_deficit[index] <= EPS:
                del state.bg_deficit[index]
        if state.bg_deficit:
            return
        while state.queue and state.fits(decisions[state.queue[0]]):
            index = state.queue.popleft()
            d = decisions[index]
            state.free_cores -= d.cores
            state.free_mem -= d.mem
            state.free_gpus -= d.gpus
            job = jobs[index]
            end = t + job.service_s
            outcomes[index] = JobOutcome(
                index, state.spec.id, job.arrival_s, t, end, outcomes[index].enqueue_seq
            )
            state.waits.append(t - job.arrival_s)
            state.job_core_seconds += d.cores * job.service_s
            push(end, _COMPLETE, index)

    while events:
        now, kind, _, payload = heapq.heappop(events)
        if kind == _ARRIVE:
            index = payload
            job = jobs[index]
            snapshot = LoadSnapshot({k: s.percent_allocated() for k, s in states.items()})
            job_strategy = RankStrategy(strategy.kind, rng.getrandbits(63))
            try:
                decision = dispatch(sim_config, job.context(), job_strategy, snapshot)
            except DispatchError as exc:
                unschedulable += 1
                outcomes[index] = JobOutcome(index, None, job.arrival_s, unschedulable_reason=str(exc))
            else:
                state = states[decision.destination_id]
                state.routed += 1
                if not state.could_ever_fit(decision):
                    unschedulable += 1
                    outcomes[index] = JobOutcome(
                        index, state.spec.id, job.arrival_s, unschedulable_reason="exceeds destination capacity"
                    )
                else:
                    decisions[index] = decision
                    outcomes[index] = JobOutcome(index, state.spec.id, job.arrival_s, enqueue_seq=enqueue_counter)
                    enqueue_counter += 1
                    state.queue.append(index)
                    settle(state, now)
        elif kind == _COMPLETE:
            d = decisions[payload]
            state = states[d.destination_id]
            state.free_cores += d.cores
            state.free_mem += d.mem
            state.free_gpus += d.gpus
            settle(state, now)
        elif kind == _BG_START:
            dest_id, index = payload
            state = states[dest_id]
            want = state.spec.background_load[index].cores_occupied
            take = min(want, max(state.free_cores, 0.0))
            state.free_cores -= take
            state.bg_claimed[index] = take
            if want - take > EPS:
                state.bg_deficit[index] = want - take
        else:
            dest_id, index = payload
            state = states[dest_id]
            state.free_cores += state.bg_claimed.pop(index, 0.0)
            state.bg_deficit.pop(index, None)
            settle(state, now)
        for state in states.values():
            state.check()
        if observer is not None:
            observer(now, states)

    makespan = now
    waits = [o.wait_s for o in (outcomes[i] for i in sorted(outcomes)) if o.start_s is not None]
    completed = len(waits)
    still_queued = sum(len(s.queue) for s in states.values())
    per_destination = {}
    for dest_id, state in states.items():
        capacity = state.spec.total_cores * makespan
        per_destination[dest_id] = DestinationMetrics(
            jobs=state.routed,
            mean_wait_s=float(np.mean(state.waits)) if state.waits else 0.0,
            utilization_fraction=min(1.0, state.job_core_seconds / capacity) if capacity > 0 else 0.0,
        )
    return SimMetrics(
        jobs_completed=completed,
        jobs_unschedulable=unschedulable,
        jobs_still_queued=still_queued,
        mean_wait_s=float(np.mean(waits)) if waits else 0.0,
        p50_wait_s=_percentile(waits, 50),
        p95_wait_s=_percentile(waits, 95),
        per_destination=per_destination,
        outcomes=tuple(outcomes[i] for i in sorted(outcomes)),
    )


class Comparison(Mapping):
    """Metrics per strategy name, plus mean-wait change relative to the first."""

    def __init__(self, metrics: Mapping[str, SimMetrics]):
        self.metrics = dict(metrics)
        self.baseline = next(iter(self.metrics), None)

    def relative_wait_delta(self) -> dict[str, float]:
        if self.baseline is None:
            return {}
        base = self.metrics[self.baseline].mean_wait_s
        return {
            name: ((m.mean_wait_s - base) / base if base > 0 else 0.0) for name, m in self.metrics.items()
        }

    def __getitem__(self, name: str) -> SimMetrics:
        return self.metrics[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.metrics)

    def __len__(self) -> int:
        return len(self.metrics)

    def to_dict(self) -> dict:
        return {
            "baseline": self.baseline,
            "strategies": {name: m.to_dict() for name, m in self.metrics.items()},
            "relative_mean_wait_delta": self.relative_wait_delta(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def compare_strategies(
    config: ResolvedConfig,
    destinations: Sequence[SimDestination],
    trace: Sequence[TraceJob],
    strategies: Sequence[RankStrategy | Strategy | str],
    seed: int = 0,
) -> Comparison:
    """Run every strategy on the same trace and seed."""
    results = {}
    for strategy in strategies:
        if isinstance(strategy, str):
            strategy = RankStrategy(Strategy(strategy), seed)
        elif isinstance(strategy, Strategy):
            strategy = RankStrategy(strategy, seed)
        results[strategy.name] = run_simulation(config, destinations, trace, strategy, seed)
    return Comparison(results)
