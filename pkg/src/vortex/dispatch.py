"""The dispatch pipeline: lookup, combine, flatten, match, rank, evaluate.

:func:`dispatch` returns only the final :class:`DispatchDecision`;
:func:`explain` also records the intermediate state of every stage.
"""

from __future__ import annotations

import json
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any, Optional

from . import expr
from .config import RESOURCES, EntityDef, ResolvedConfig
from .expr import Expression, ExpressionError
from .rank import LoadSnapshot, RankStrategy, rank
from .tags import EMPTY, TagConflict, TagSet, merge_tag_sets, mismatched_tags, preference_score

STAGES = ("lookup", "combine", "flatten", "match", "rank", "evaluate")


class DispatchError(Exception):
    """A job could not be dispatched; ``stage`` names the failing step."""

    def __init__(self, stage: str, message: str):
        self.stage = stage
        self.message = message
        self.trace: Optional[DispatchTrace] = None
        super().__init__(f"{stage}: {message}")


class Unschedulable(DispatchError):
    def __init__(self, conflict: TagConflict):
        self.tags = conflict.names
        super().__init__("combine", str(conflict))


class NoCandidate(DispatchError):
    def __init__(self, message: str = "no destination accepts this job"):
        super().__init__("match", message)


@dataclass(frozen=True)
class JobContext:
    tool_id: str
    user_name: Optional[str] = None
    roles: tuple = ()
    input_size: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "roles", tuple(self.roles))
        size = float(self.input_size)
        if not math.isfinite(size) or size < 0:
            raise ValueError(f"input_size must be a finite number >= 0, got {self.input_size!r}")
        object.__setattr__(self, "input_size", size)

    def bindings(self) -> dict:
        # a missing user binds to "" so conditions like `user == "x"` stay evaluable
        return {
            "input_size": self.input_size,
            "tool_id": self.tool_id,
            "user": self.user_name or "",
            "roles": self.roles,
        }

    def to_dict(self) -> dict:
        return {
            "tool_id": self.tool_id,
            "user": self.user_name,
            "roles": list(self.roles),
            "input_size_gb": self.input_size,
        }


@dataclass(frozen=True)
class Lookup:
    tool: Optional[EntityDef]
    user: Optional[EntityDef]
    roles: tuple
    destinations: tuple

    def to_dict(self) -> dict:
        return {
            "tool": self.tool.to_dict() if self.tool else None,
            "user": self.user.to_dict() if self.user else None,
            "roles": [r.to_dict() for r in self.roles],
            "destinations": [d.id for d in self.destinations],
        }


@dataclass(frozen=True)
class JobEntity:
    cores: Optional[Expression] = None
    mem: Optional[Expression] = None
    gpus: Optional[Expression] = None
    env: Mapping[str, str] = field(default_factory=dict)
    params: Mapping[str, str] = field(default_factory=dict)
    scheduling: TagSet = EMPTY
    rules: tuple = ()

    @property
    def tags(self) -> TagSet:
        return self.scheduling

    def to_dict(self) -> dict:
        out: dict[str, Any] = {}
        for res in RESOURCES:
            value = getattr(self, res)
            if value is not None:
                out[res] = value.source
        if self.env:
            out["env"] = dict(self.env)
        if self.params:
            out["params"] = dict(self.params)
        if self.scheduling:
            out["scheduling"] = self.scheduling.to_lists()
        if self.rules:
            out["rules"] = [r.to_dict() for r in self.rules]
        return out


@dataclass(frozen=True)
class FlatEntity:
    cores: float
    mem: float
    gpus: float
    env: Mapping[str, str] = field(default_factory=dict)
    params: Mapping[str, str] = field(default_factory=dict)
    scheduling: TagSet = EMPTY

    @property
    def tags(self) -> TagSet:
        return self.scheduling

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"cores": _num(self.cores), "mem": _num(self.mem), "gpus": _num(self.gpus)}
        if self.env:
            out["env"] = dict(self.env)
        if self.params:
            out["params"] = dict(self.params)
        if self.scheduling:
            out["scheduling"] = self.scheduling.to_lists()
        return out


def _num(value: float) -> float | int:
    return int(value) if float(value).is_integer() else value


@dataclass(frozen=True)
class DispatchDecision:
    destination_id: str
    cores: int
    mem: float
    gpus: int
    env: Mapping[str, str] = field(default_factory=dict)
    params: Mapping[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "destination_id": self.destination_id,
            "cores": self.cores,
            "mem_gb": _num(self.mem),
            "gpus": self.gpus,
            "env": dict(self.env),
            "params": dict(self.params),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


@dataclass
class DispatchTrace:
    job: JobContext
    lookup: Optional[Lookup] = None
    combined: Optional[JobEntity] = None
    flattened: Optional[FlatEntity] = None
    candidates: list = field(default_factory=list)  # (destination id, skip reason or None)
    ranked: list = field(default_factory=list)  # (destination id, score, load percent or None)
    decision: Optional[DispatchDecision] = None
    error: Optional[DispatchError] = None

    def to_dict(self) -> dict:
        return {
            "job": self.job.to_dict(),
            "lookup": self.lookup.to_dict() if self.lookup else None,
            "combine": self.combined.to_dict() if self.combined else None,
            "flatten": self.flattened.to_dict() if self.flattened else None,
            "match": [{"destination": d, "accepted": r is None, "reason": r} for d, r in self.candidates],
            "rank": [{"destination": d, "score": s, "load": l} for d, s, l in self.ranked],
            "evaluate": self.decision.to_dict() if self.decision else None,
            "error": {"stage": self.error.stage, "message": self.error.message} if self.error else None,
        }


# ------------------------------------------------------------------ stages


def _last_match(patterns, value: str) -> Optional[EntityDef]:
    found = None
    for pattern, entity in patterns:
        if pattern is not None and pattern.fullmatch(value):
            found = entity
    return found


def lookup(config: ResolvedConfig, job: JobContext) -> Lookup:
    """Find the entities relevant to ``job``.

    Among several matching tool (or user) patterns the last declared wins.
    A tool with no match falls back to the ``default_inherits`` tool.
    """
    tool = _last_match(config.patterns("tools"), job.tool_id)
    if tool is None and config.default_inherits is not None:
        tool = config.tools.get(config.default_inherits)
    user = _last_match(config.patterns("users"), job.user_name) if job.user_name else None
    roles = tuple(
        entity
        for pattern, entity in config.patterns("roles")
        if pattern is not None and any(pattern.fullmatch(r) for r in job.roles)
    )
    return Lookup(tool, user, roles, tuple(config.destinations.values()))


def combine(tool: Optional[EntityDef], user: Optional[EntityDef], roles: Sequence[EntityDef] = ()) -> JobEntity:
    """Stack matched entities by priority: user over roles over tool.

    Later roles beat earlier ones. Tags merge with the higher-priority side
    as the stronger claim; a conflict raises :class:`Unschedulable`.
    """
    layers = [e for e in (tool, *roles, user) if e is not None]
    resources: dict[str, Optional[Expression]] = {r: None for r in RESOURCES}
    env: dict[str, str] = {}
    params: dict[str, str] = {}
    tags = EMPTY
    rules: list = []
    for entity in layers:
        for res in RESOURCES:
            value = getattr(entity, res)
            if value is not None:
                resources[res] = value
        env.update(entity.env)
        params.update(entity.params)
        try:
            tags = merge_tag_sets(entity.tags, tags)
        except TagConflict as exc:
            raise Unschedulable(exc) from None
        rules.extend(entity.rules)
    return JobEntity(env=env, params=params, scheduling=tags, rules=tuple(rules), **resources)


def _evaluate_resources(
    exprs: Mapping[str, Optional[Expression]], base: Mapping[str, Any], upto: int = len(RESOURCES)
) -> dict[str, float]:
    """Evaluate cores, mem, gpus in that order; each sees the ones before it."""
    env = dict(base)
    values: dict[str, float] = {}
    for res in RESOURCES[:upto]:
        e = exprs[res]
        value = 0.0 if e is None else expr.evaluate(e, env)
        if isinstance(value, bool) or not isinstance(value, float):
            raise expr.ExprTypeError(f"{res} must evaluate to a number, got {expr.type_name(value)}", None, e.source)
        values[res] = value
        env[res] = value
    return values


def flatten(job: JobEntity, ctx: JobContext) -> FlatEntity:
    """Apply each rule once, in order, then evaluate resource expressions.

    A true rule's overrides replace the current values. Resources a rule
    condition mentions are evaluated on demand from the current state.
    Unset resources evaluate to 0.
    """
    base = ctx.bindings()
    state = {res: getattr(job, res) for res in RESOURCES}
    env = dict(job.env)
    params = dict(job.params)
    tags = dict(job.scheduling)
    try:
        for rule in job.rules:
            wanted = rule.condition.identifiers()
            needed = max((RESOURCES.index(r) + 1 for r in RESOURCES if r in wanted), default=0)
            bindings = {**base, **_evaluate_resources(state, base, needed)} if needed else base
            result = expr.evaluate(rule.condition, bindings)
            if not isinstance(result, bool):
                raise expr.ExprTypeError(
                    f"rule condition must be a boolean, got {expr.type_name(result)}", None, rule.condition.source
                )
            if not result:
                continue
            overrides = rule.overrides
            for res in RESOURCES:
                value = getattr(overrides, res)
                if value is not None:
                    state[res] = value
            env.update(overrides.env)
            params.update(overrides.params)
            tags.update(overrides.tags)
        values = _evaluate_resources(state, base)
    except ExpressionError as exc:
        raise DispatchError("flatten", str(exc)) from None
    for res, value in values.items():
        if not math.isfinite(value) or value < 0:
            raise DispatchError("flatten", f"{res} evaluated to {expr.render(value)}; must be finite and >= 0")
    return FlatEntity(env=env, params=params, scheduling=TagSet(tags), **values)


def skip_reason(flat: FlatEntity, destination: EntityDef) -> Optional[str]:
    """Why ``destination`` cannot take ``flat``, or None if it can."""
    for res in RESOURCES:
        value = getattr(flat, res)
        low = destination.bound(f"min_accepted_{res}")
        high = destination.bound(f"max_accepted_{res}")
        if low is not None and value < low:
            return f"{res} {expr.render(value)} below min_accepted_{res} {expr.render(float(low))}"
        if high is not None and value > high:
            return f"{res} {expr.render(value)} exceeds max_accepted_{res} {expr.render(float(high))}"
    bad = mismatched_tags(flat.scheduling, destination.tags)
    if bad:
        return "incompatible tags: " + ", ".join(repr(n) for n in bad)
    return None


def match(flat: FlatEntity, destinations: Sequence[EntityDef]) -> list[EntityDef]:
    """Destinations whose accepted bounds and tags admit ``flat``, in declared order."""
    return [d for d in destinations if skip_reason(flat, d) is None]


def _clamp_whole(value: float, limit: Optional[float]) -> int:
    whole = math.ceil(value)
    if limit is not None:
        whole = min(whole, math.floor(limit))
    return int(whole)


def evaluate(flat: FlatEntity, destination: EntityDef, ctx: Optional[JobContext] = None) -> DispatchDecision:
    """Join the job with its destination and render the final request.

    Destination env/params win per key. Resources are clamped to the
    destination's ``max_*`` values, cores and gpus rounded up to whole
    units, and only then are templates interpolated.
    """
    cores = _clamp_whole(flat.cores, destination.max_cores)
    gpus = _clamp_whole(flat.gpus, destination.max_gpus)
    mem = flat.mem if destination.max_mem is None else min(flat.mem, destination.max_mem)
    env_templates = {**flat.env, **destination.env}
    param_templates = {**flat.params, **destination.params}
    bindings = dict(ctx.bindings()) if ctx is not None else {}
    bindings.update(cores=float(cores), mem=float(mem), gpus=float(gpus))
    try:
        env = {k: expr.interpolate(v, bindings) for k, v in env_templates.items()}
        params = {k: expr.interpolate(v, bindings) for k, v in param_templates.items()}
    except ExpressionError as exc:
        raise DispatchError("evaluate", str(exc)) from None
    return DispatchDecision(destination.id, cores, mem, gpus, env, params)


# ---------------------------------------------------------------- pipeline


def _run(
    config: ResolvedConfig,
    job: JobContext,
    strategy: Optional[RankStrategy],
    load: Optional[LoadSnapshot],
    trace: Optional[DispatchTrace],
) -> DispatchDecision:
    found = lookup(config, job)
    if trace is not None:
        trace.lookup = found
    combined = combine(found.tool, found.user, found.roles)
    if trace is not None:
        trace.combined = combined
    flat = flatten(combined, job)
    if trace is not None:
        trace.flattened = flat
        trace.candidates = [(d.id, skip_reason(flat, d)) for d in found.destinations]
        candidates = [d for d, (_, reason) in zip(found.destinations, trace.candidates) if reason is None]
    else:
        candidates = match(flat, found.destinations)
    if not candidates:
        raise NoCandidate()
    ordered = rank(flat, candidates, strategy, load)
    if trace is not None:
        trace.ranked = [
            (d.id, preference_score(flat.scheduling, d.tags), load.percent(d.id) if load is not None else None)
            for d in ordered
        ]
    decision = evaluate(flat, ordered[0], job)
    if trace is not None:
        trace.decision = decision
    return decision


def dispatch(
    config: ResolvedConfig,
    job: JobContext,
    strategy: Optional[RankStrategy] = None,
    load: Optional[LoadSnapshot] = None,
) -> DispatchDecision:
    """Run the whole pipeline and return the decision for the top-ranked destination.

    Raises :class:`DispatchError` (``Unschedulable``, ``NoCandidate`` or an
    expression failure) naming the stage that failed.
    """
    return _run(config, job, strategy, load, None)


def explain(
    config: ResolvedConfig,
    job: JobContext,
    strategy: Optional[RankStrategy] = None,
    load: Optional[LoadSnapshot] = None,
) -> DispatchTrace:
    """Like :func:`dispatch` but returns the per-stage trace; failures are recorded in ``trace.error``."""
    trace = DispatchTrace(job)
    try:
        _run(config, job, strategy, load, trace)
    except DispatchError as exc:
        exc.trace = trace
        trace.error = exc
    return trace
