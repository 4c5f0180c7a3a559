"""Ordering of candidate destinations.

Three built-in strategies:

* ``default``: most preferred tags first, declaration order on ties.
* ``least-loaded``: preference first, then lowest percent of cores allocated
  according to a :class:`LoadSnapshot`.
* ``random``: weighted sampling without replacement, weight = max(score, 0) + 1.

Any callable ``fn(flat, candidates, load) -> list`` can be passed wherever a
:class:`RankStrategy` is accepted.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import random
import urllib.error
import urllib.request
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional, Union

from .tags import EMPTY, preference_score

log = logging.getLogger(__name__)

DEFAULT_STALENESS_S = 300.0
MISSING_LOAD = 100.0


class Strategy(str, enum.Enum):
    DEFAULT = "default"
    LEAST_LOADED = "least-loaded"
    RANDOM_WEIGHTED = "random"


@dataclass(frozen=True)
class RankStrategy:
    kind: Strategy = Strategy.DEFAULT
    seed: int = 0

    @classmethod
    def parse(cls, name: str, seed: int = 0) -> "RankStrategy":
        return cls(Strategy(name), seed)

    @property
    def name(self) -> str:
        return self.kind.value


RankFunction = Callable[[Any, Sequence[Any], Optional["LoadSnapshot"]], list]


class LoadFetchError(Exception):
    """The load feed could not be read, parsed, or was too old."""


def _utcnow() -> datetime:
    return datetime.now(timezone.utc)


@dataclass(frozen=True)
class LoadSnapshot:
    entries: Mapping[str, float] = field(default_factory=dict)
    captured_at: datetime = field(default_factory=_utcnow)

    def __post_init__(self):
        for dest, value in self.entries.items():
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not 0 <= value <= 100:
                raise ValueError(f"percent_allocated for {dest!r} must be a number in [0, 100], got {value!r}")

    def percent(self, destination_id: str) -> float:
        return float(self.entries.get(destination_id, MISSING_LOAD))

    def to_dict(self) -> dict:
        return {"captured_at": self.captured_at.isoformat(), "load": dict(self.entries)}


def _tags(obj):
    return getattr(obj, "tags", EMPTY)


def _id(obj) -> str:
    return getattr(obj, "id", obj)


def rank_default(flat, candidates: Sequence) -> list:
    """Stable sort by preference score, highest first."""
    job = _tags(flat)
    return sorted(candidates, key=lambda d: -preference_score(job, _tags(d)))


def rank_least_loaded(flat, candidates: Sequence, load: LoadSnapshot) -> list:
    job = _tags(flat)
    return sorted(candidates, key=lambda d: (-preference_score(job, _tags(d)), load.percent(_id(d))))


def rank_random_weighted(candidates: Sequence, seed: int, flat=None) -> list:
    """Seeded weighted permutation; without ``flat`` every weight is 1."""
    job = _tags(flat) if flat is not None else None
    pool = list(candidates)
    weights = [max(preference_score(job, _tags(d)), 0) + 1 if job is not None else 1 for d in pool]
    rng = random.Random(seed)
    ordered = []
    while pool:
        total = sum(weights)
        pick = rng.random() * total
        index = len(pool) - 1
        for i, w in enumerate(weights):
            if pick < w:
                index = i
                break
            pick -= w
        ordered.append(pool.pop(index))
        weights.pop(index)
    return ordered


def rank(
    flat,
    candidates: Sequence,
    strategy: Union[RankStrategy, RankFunction, None] = None,
    load: Optional[LoadSnapshot] = None,
) -> list:
    """Order ``candidates`` for ``flat`` with the chosen strategy.

    ``least-loaded`` without a snapshot falls back to weighted random.
    """
    if strategy is None:
        strategy = RankStrategy()
    if callable(strategy) and not isinstance(strategy, RankStrategy):
        ordered = list(strategy(flat, list(candidates), load))
        if sorted(map(id, ordered)) != sorted(map(id, candidates)):
            raise ValueError("custom rank function must return a permutation of its candidates")
        return ordered
    if strategy.kind is Strategy.DEFAULT:
        return rank_default(flat, candidates)
    if strategy.kind is Strategy.LEAST_LOADED and load is not None:
        return rank_least_loaded(flat, candidates, load)
    return rank_random_weighted(candidates, strategy.seed, flat)


# ------------------------------------------------------------ load feed


def parse_timestamp(text: str) -> datetime:
    """RFC 3339 timestamp; naive values are taken as UTC."""
    value = text.strip()
    if value.endswith(("Z", "z")):
        value = value[:-1] + "+00:00"
    stamp = datetime.fromisoformat(value)
    if stamp.tzinfo is None:
        stamp = stamp.replace(tzinfo=timezone.utc)
    return stamp


def parse_load(data: Any, fetched_at: datetime) -> LoadSnapshot:
    """Build a snapshot from the decoded feed (bare or wrapped form)."""
    if not isinstance(data, dict):
        raise ValueError("load feed must be a JSON object")
    captured_at = fetched_at
    entries = data
    if isinstance(data.get("load"), dict):
        entries = data["load"]
        if data.get("captured_at") is not None:
            if not isinstance(data["captured_at"], str):
                raise ValueError("captured_at must be an RFC 3339 string")
            captured_at = parse_timestamp(data["captured_at"])
    for key, value in entries.items():
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ValueError(f"load for {key!r} is not a number")
    return LoadSnapshot({str(k): float(v) for k, v in entries.items()}, captured_at)


def fetch_load(
    source: str | Path,
    staleness_limit: float = DEFAULT_STALENESS_S,
    timeout: float = 5.0,
    now: Optional[datetime] = None,
) -> LoadSnapshot:
    """Read a load feed from a file or HTTP(S) URL.

    Any failure (I/O, JSON, range, or a snapshot older than
    ``staleness_limit`` seconds) raises :class:`LoadFetchError`; callers fall
    back to weighted-random ranking.
    """
    now = now or _utcnow()
    source = str(source)
    try:
        if source.startswith(("http://", "https://")):
            with urllib.request.urlopen(source, timeout=timeout) as response:
                raw = response.read().decode("utf-8")
        else:
            raw = Path(source).read_text(encoding="utf-8")
        snapshot = parse_load(json.loads(raw), now)
    except (OSError, urllib.error.URLError, ValueError, UnicodeDecodeError) as exc:
        raise LoadFetchError(f"cannot read load feed {source}: {exc}") from None
    age = (now - snapshot.captured_at).total_seconds()
    if age > staleness_limit:
        raise LoadFetchError(f"load feed {source} is stale ({age:.0f}s old, limit {staleness_limit:.0f}s)")
    return snapshot
