"""Scheduling tags: compatibility, merging, matching and preference scoring."""

from __future__ import annotations

import enum
from collections.abc import Iterable, Iterator, Mapping
from typing import Optional


class TagCategory(str, enum.Enum):
    REQUIRE = "require"
    PREFER = "prefer"
    ACCEPT = "accept"
    REJECT = "reject"

    @property
    def strength(self) -> int:
        return _STRENGTH[self]


_STRENGTH = {
    TagCategory.REQUIRE: 3,
    TagCategory.PREFER: 2,
    TagCategory.ACCEPT: 1,
    TagCategory.REJECT: 0,
}

CATEGORY_ORDER = (TagCategory.REQUIRE, TagCategory.PREFER, TagCategory.ACCEPT, TagCategory.REJECT)


class TagConflict(Exception):
    """Two tag sets make mutually exclusive claims on the listed tag names."""

    def __init__(self, names: Iterable[str]):
        self.names = tuple(names)
        quoted = ", ".join(repr(n) for n in self.names)
        super().__init__(f"incompatible tag {quoted}" if len(self.names) == 1 else f"incompatible tags {quoted}")


class TagSet(Mapping[str, TagCategory]):
    """Immutable mapping of tag name to category, in insertion order."""

    __slots__ = ("_entries", "_hash")

    def __init__(self, entries: Mapping[str, TagCategory] | Iterable[tuple[str, TagCategory]] = ()):
        items = entries.items() if isinstance(entries, Mapping) else entries
        self._entries = {str(name): TagCategory(cat) for name, cat in items}
        self._hash = None

    @classmethod
    def from_lists(cls, lists: Mapping[str | TagCategory, Iterable[str]]) -> "TagSet":
        """Build from ``{"require": [...], "prefer": [...], ...}``.

        A name listed under two categories is a ValueError.
        """
        entries: dict[str, TagCategory] = {}
        for key, names in lists.items():
            category = TagCategory(key)
            for name in names:
                name = str(name)
                if name in entries and entries[name] is not category:
                    raise ValueError(
                        f"tag {name!r} listed under both {entries[name].value!r} and {category.value!r}"
                    )
                entries[name] = category
        return cls(entries)

    def to_lists(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for category in CATEGORY_ORDER:
            names = [n for n, c in self._entries.items() if c is category]
            if names:
                out[category.value] = names
        return out

    def names(self, category: TagCategory) -> list[str]:
        return [n for n, c in self._entries.items() if c is category]

    def __getitem__(self, name: str) -> TagCategory:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __eq__(self, other: object) -> bool:
        if isinstance(other, Mapping):
            return dict(self._entries) == dict(other)
        return NotImplemented

    def __hash__(self) -> int:
        if self._hash is None:
            self._hash = hash(frozenset(self._entries.items()))
        return self._hash

    def __repr__(self) -> str:
        return f"TagSet({self.to_lists()!r})"


EMPTY = TagSet()


def pair_compatible(a: Optional[TagCategory], b: Optional[TagCategory]) -> bool:
    """Whether two entities holding a tag under ``a`` and ``b`` may match.

    ``None`` means the entity does not carry the tag at all.
    """
    if a is TagCategory.REJECT or b is TagCategory.REJECT:
        return a is None or b is None
    if a is None:
        return b is not TagCategory.REQUIRE
    if b is None:
        return a is not TagCategory.REQUIRE
    return True


def merge_tag_sets(stronger: Mapping[str, TagCategory], weaker: Mapping[str, TagCategory]) -> TagSet:
    """Combine the tags of two entities into one.

    Names held by one side are carried over. Names held by both must be
    compatible; the stronger claim wins (require > prefer > accept). Two
    rejects of the same name stay a reject. ``stronger`` is the
    higher-priority entity and its insertion order comes first.

    Raises :class:`TagConflict` listing every conflicting name.
    """
    merged: dict[str, TagCategory] = dict(stronger)
    conflicts = []
    for name, theirs in weaker.items():
        ours = merged.get(name)
        if ours is None:
            merged[name] = theirs
            continue
        if ours is theirs:
            continue
        if not pair_compatible(ours, theirs):
            conflicts.append(name)
            continue
        if theirs.strength > ours.strength:
            merged[name] = theirs
    if conflicts:
        raise TagConflict(conflicts)
    return TagSet(merged)


def match_tags(job: Mapping[str, TagCategory], destination: Mapping[str, TagCategory]) -> bool:
    """True iff every tag carried by either side is pairwise compatible."""
    for name, category in job.items():
        if not pair_compatible(category, destination.get(name)):
            return False
    for name, category in destination.items():
        if name not in job and not pair_compatible(None, category):
            return False
    return True


def mismatched_tags(job: Mapping[str, TagCategory], destination: Mapping[str, TagCategory]) -> list[str]:
    """Names that make :func:`match_tags` fail, for diagnostics."""
    bad = [n for n, c in job.items() if not pair_compatible(c, destination.get(n))]
    bad += [n for n, c in destination.items() if n not in job and not pair_compatible(None, c)]
    return bad


def _side_score(prefs: Mapping[str, TagCategory], other: Mapping[str, TagCategory]) -> int:
    score = 0
    for name, category in prefs.items():
        if category is not TagCategory.PREFER:
            continue
        theirs = other.get(name)
        if theirs is None:
            score -= 1
        elif theirs is not TagCategory.REJECT:
            score += 1
    return score


def preference_score(job: Mapping[str, TagCategory], destination: Mapping[str, TagCategory]) -> int:
    # +1 per preferred tag the other side carries, -1 per preferred tag it lacks; both directions
    return _side_score(job, destination) + _side_score(destination, job)
