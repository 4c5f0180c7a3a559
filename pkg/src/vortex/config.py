"""Loading, merging and inheritance resolution of scheduling configuration.

A configuration document has up to five top-level sections::

    global:
      default_inherits: default
    tools:        # keys are full-match regular expressions
      default: {...}
      toolshed.g2.bx.psu.edu/repos/iuc/hisat2/.*: {...}
    users: {...}  # regex keys
    roles: {...}  # regex keys
    destinations: # literal ids
      my_slurm_cluster: {...}

Several documents (local files or URLs) are merged in order, then each
entity's ``inherits`` chain is flattened into an effective definition.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import os
import re
import urllib.error
import urllib.request
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Optional

import yaml

from . import expr
from .expr import Expression
from .tags import CATEGORY_ORDER, TagCategory, TagConflict, TagSet, merge_tag_sets

log = logging.getLogger(__name__)

SECTIONS = ("tools", "users", "roles", "destinations")
KINDS = {"tools": "tool", "users": "user", "roles": "role", "destinations": "destination"}
TOP_LEVEL_KEYS = ("global",) + SECTIONS
RESOURCES = ("cores", "mem", "gpus")
BOUNDS = tuple(
    f"{prefix}_{res}" for prefix in ("min_accepted", "max_accepted", "max") for res in RESOURCES
)
TEMPLATE_MAPS = ("env", "params")

# identifiers an expression may reference, and their types
CONTEXT_TYPES = {
    "cores": "number",
    "mem": "number",
    "gpus": "number",
    "input_size": "number",
    "tool_id": "string",
    "user": "string",
    "roles": "list",
}
# a resource expression may only see the resources evaluated before it
RESOURCE_DEPENDENCIES = {
    "cores": frozenset({"mem", "gpus"}),
    "mem": frozenset({"gpus"}),
    "gpus": frozenset(),
}

CACHE_ENV_VAR = "VORTEX_CACHE_DIR"


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" or "warning"
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.severity}: {self.path}: {self.message}"

    @property
    def is_error(self) -> bool:
        return self.severity == "error"


class ConfigError(Exception):
    """A configuration could not be parsed, loaded or resolved."""

    def __init__(self, diagnostics: Sequence[Diagnostic] | str):
        if isinstance(diagnostics, str):
            diagnostics = [Diagnostic("error", "<config>", diagnostics)]
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(str(d) for d in self.diagnostics if d.is_error) or "configuration error")


class SourceError(ConfigError):
    """A configuration source could not be read or fetched."""


# ------------------------------------------------------------------ model


@dataclass(frozen=True)
class RuleDef:
    condition: Expression
    id: Optional[str] = None
    overrides: "EntityDef" = None  # type: ignore[assignment]

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"if": self.condition.source}
        if self.id is not None:
            out["id"] = self.id
        out.update(self.overrides.to_dict(include_id=False))
        return out


@dataclass(frozen=True)
class EntityDef:
    """Requirements or capacity of a tool, user, role or destination.

    ``scheduling`` keeps the declared tag lists per category so that a later
    document can replace one category without touching the others.
    """

    id: str
    kind: str
    cores: Optional[Expression] = None
    mem: Optional[Expression] = None
    gpus: Optional[Expression] = None
    env: Mapping[str, str] = field(default_factory=dict)
    params: Mapping[str, str] = field(default_factory=dict)
    scheduling: Mapping[TagCategory, tuple] = field(default_factory=dict)
    rules: tuple = ()
    inherits: Optional[str] = None
    min_accepted_cores: Optional[float] = None
    min_accepted_mem: Optional[float] = None
    min_accepted_gpus: Optional[float] = None
    max_accepted_cores: Optional[float] = None
    max_accepted_mem: Optional[float] = None
    max_accepted_gpus: Optional[float] = None
    max_cores: Optional[float] = None
    max_mem: Optional[float] = None
    max_gpus: Optional[float] = None
    resolved: bool = field(default=False, compare=False)

    @cached_property
    def tags(self) -> TagSet:
        return TagSet.from_lists(self.scheduling)

    def bound(self, name: str) -> Optional[float]:
        return getattr(self, name)

    def to_dict(self, include_id: bool = True) -> dict:
        """Plain-data rendering in the configuration file's own vocabulary."""
        out: dict[str, Any] = {}
        if include_id:
            out["id"] = self.id
        for res in RESOURCES:
            value = getattr(self, res)
            if value is not None:
                out[res] = _expr_to_data(value)
        for name in TEMPLATE_MAPS:
            mapping = getattr(self, name)
            if mapping:
                out[name] = dict(mapping)
        if self.scheduling:
            out["scheduling"] = {c.value: list(self.scheduling[c]) for c in CATEGORY_ORDER if c in self.scheduling}
        for name in BOUNDS:
            value = getattr(self, name)
            if value is not None:
                out[name] = _number_to_data(value)
        if self.inherits is not None:
            out["inherits"] = self.inherits
        if self.rules:
            out["rules"] = [r.to_dict() for r in self.rules]
        return out


def _number_to_data(value: float) -> float | int:
    return int(value) if float(value).is_integer() else value


def _expr_to_data(e: Expression) -> float | int | str:
    if isinstance(e.ast, expr.Literal) and isinstance(e.ast.value, float):
        return _number_to_data(e.ast.value)
    return e.source


@dataclass(frozen=True)
class GlobalSection:
    default_inherits: Optional[str] = None


@dataclass
class ConfigDoc:
    global_section: GlobalSection = field(default_factory=GlobalSection)
    tools: dict = field(default_factory=dict)
    users: dict = field(default_factory=dict)
    roles: dict = field(default_factory=dict)
    destinations: dict = field(default_factory=dict)
    source: Optional[str] = field(default=None, compare=False)
    diagnostics: list = field(default_factory=list, compare=False)

    @property
    def default_inherits(self) -> Optional[str]:
        return self.global_section.default_inherits

    def section(self, name: str) -> dict:
        return getattr(self, name)

    def entity_count(self) -> int:
        return sum(len(self.section(s)) for s in SECTIONS)


class ResolvedConfig:
    """Inheritance-resolved, read-only configuration.

    Safe to share between threads; a reload builds a new instance.
    """

    def __init__(
        self,
        default_inherits: Optional[str],
        sections: Mapping[str, Mapping[str, EntityDef]],
        diagnostics: Iterable[Diagnostic] = (),
    ):
        self.default_inherits = default_inherits
        self._sections = {name: dict(sections.get(name, {})) for name in SECTIONS}
        self.diagnostics = tuple(diagnostics)
        self._patterns = {name: _compile_patterns(self._sections[name]) for name in ("tools", "users", "roles")}

    @property
    def global_section(self) -> GlobalSection:
        return GlobalSection(self.default_inherits)

    @property
    def tools(self) -> Mapping[str, EntityDef]:
        return self._sections["tools"]

    @property
    def users(self) -> Mapping[str, EntityDef]:
        return self._sections["users"]

    @property
    def roles(self) -> Mapping[str, EntityDef]:
        return self._sections["roles"]

    @property
    def destinations(self) -> Mapping[str, EntityDef]:
        return self._sections["destinations"]

    def section(self, name: str) -> Mapping[str, EntityDef]:
        return self._sections[name]

    def patterns(self, section: str) -> list[tuple[Optional[re.Pattern], EntityDef]]:
        """Compiled id patterns of a regex-keyed section, in declaration order.

        Patterns that fail to compile map to None and never match.
        """
        return self._patterns[section]

    def with_destinations(self, ids: Iterable[str]) -> "ResolvedConfig":
        """A copy restricted to the given destinations, in their declared order."""
        wanted = set(ids)
        sections = dict(self._sections)
        sections["destinations"] = {k: v for k, v in self.destinations.items() if k in wanted}
        return ResolvedConfig(self.default_inherits, sections, self.diagnostics)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ResolvedConfig):
            return NotImplemented
        return self.default_inherits == other.default_inherits and all(
            list(self.section(s).items()) == list(other.section(s).items()) for s in SECTIONS
        )

    def __repr__(self) -> str:
        counts = ", ".join(f"{s}={len(self.section(s))}" for s in SECTIONS)
        return f"ResolvedConfig({counts})"


def _compile_patterns(entities: Mapping[str, EntityDef]) -> list:
    compiled = []
    for key, entity in entities.items():
        try:
            compiled.append((re.compile(key), entity))
        except re.error:
            compiled.append((None, entity))
    return compiled


# ---------------------------------------------------------------- parsing


class _UniqueKeyLoader(yaml.SafeLoader):
    pass


def _construct_mapping(loader: yaml.SafeLoader, node: yaml.MappingNode, deep: bool = False) -> dict:
    loader.flatten_mapping(node)
    seen = set()
    for key_node, _ in node.value:
        key = loader.construct_object(key_node, deep=deep)
        try:
            duplicate = key in seen
        except TypeError:
            continue
        if duplicate:
            raise yaml.constructor.ConstructorError(
                "while constructing a mapping", node.start_mark, f"found duplicate key {key!r}", key_node.start_mark
            )
        seen.add(key)
    return loader.construct_mapping(node, deep=deep)


_UniqueKeyLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


class _Collector:
    def __init__(self):
        self.diagnostics: list[Diagnostic] = []

    def error(self, path: str, message: str) -> None:
        self.diagnostics.append(Diagnostic("error", path, message))

    def warning(self, path: str, message: str) -> None:
        self.diagnostics.append(Diagnostic("warning", path, message))


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _parse_resource(value: Any, path: str, out: _Collector) -> Optional[Expression]:
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float, str)):
        out.error(path, f"expected a number or expression, got {type(value).__name__}")
        return None
    try:
        return expr.literal(value)
    except expr.ExprSyntaxError as exc:
        out.error(path, f"expression parse error: {exc}")
        return None


def _parse_templates(value: Any, path: str, out: _Collector) -> dict:
    if value is None:
        return {}
    if not isinstance(value, Mapping):
        out.error(path, f"expected a mapping of name to string, got {type(value).__name__}")
        return {}
    result = {}
    for name, template in value.items():
        item_path = f"{path}.{name}"
        if isinstance(template, bool):
            template = "true" if template else "false"
        elif _is_number(template):
            template = expr.render(float(template)) if float(template).is_integer() else str(template)
        elif template is None:
            template = ""
        elif not isinstance(template, str):
            out.error(item_path, f"expected a string, got {type(template).__name__}")
            continue
        try:
            expr.parse_template(template)
        except expr.ExprSyntaxError as exc:
            out.error(item_path, f"template parse error: {exc}")
            continue
        result[str(name)] = template
    return result


def _parse_scheduling(value: Any, path: str, out: _Collector) -> dict:
    if value is None:
        return {}
    if not isinstance(value, Mapping):
        out.error(path, f"expected a mapping of tag categories, got {type(value).__name__}")
        return {}
    lists: dict[TagCategory, tuple] = {}
    for key, names in value.items():
        try:
            category = TagCategory(key)
        except ValueError:
            out.error(f"{path}.{key}", "unknown tag category (expected require, prefer, accept or reject)")
            continue
        if names is None:
            names = []
        if isinstance(names, str) or not isinstance(names, list):
            out.error(f"{path}.{key}", "expected a list of tag names")
            continue
        lists[category] = tuple(str(n) for n in names)
    ordered = {c: lists[c] for c in CATEGORY_ORDER if c in lists}
    try:
        TagSet.from_lists(ordered)
    except ValueError as exc:
        out.error(path, str(exc))
    return ordered


def _parse_bound(value: Any, path: str, out: _Collector) -> Optional[float]:
    if value is None:
        return None
    if not _is_number(value):
        out.error(path, f"expected a number, got {type(value).__name__}")
        return None
    return float(value)


def _parse_fields(
    data: Mapping, entity_id: str, kind: str, path: str, out: _Collector, in_rule: bool = False
) -> dict:
    fields: dict[str, Any] = {}
    for key, value in data.items():
        key_path = f"{path}.{key}"
        if key in RESOURCES:
            fields[key] = _parse_resource(value, key_path, out)
        elif key in TEMPLATE_MAPS:
            fields[key] = _parse_templates(value, key_path, out)
        elif key == "scheduling":
            fields[key] = _parse_scheduling(value, key_path, out)
        elif key in BOUNDS:
            fields[key] = _parse_bound(value, key_path, out)
        elif key in ("rules", "inherits") and in_rule:
            out.error(key_path, f"'{key}' is not allowed inside a rule")
        elif key == "inherits":
            if value is not None and not isinstance(value, str):
                out.error(key_path, "expected an entity id")
            else:
                fields[key] = value
        elif key == "rules":
            fields[key] = _parse_rules(value, entity_id, kind, key_path, out)
        elif in_rule and key in ("if", "id"):
            continue
        else:
            out.warning(key_path, f"unknown field {key!r} ignored")
    return fields


def _parse_rules(value: Any, entity_id: str, kind: str, path: str, out: _Collector) -> tuple:
    if value is None:
        return ()
    if not isinstance(value, list):
        out.error(path, "expected a list of rules")
        return ()
    rules = []
    for index, item in enumerate(value):
        rule_path = f"{path}[{index}]"
        if not isinstance(item, Mapping):
            out.error(rule_path, "expected a mapping")
            continue
        if "if" not in item:
            out.error(rule_path, "rule has no 'if' condition")
            continue
        cond_value = item["if"]
        condition = None
        if isinstance(cond_value, bool):
            condition = expr.literal(cond_value)
        elif isinstance(cond_value, str):
            try:
                condition = expr.parse(cond_value)
            except expr.ExprSyntaxError as exc:
                out.error(f"{rule_path}.if", f"expression parse error: {exc}")
        else:
            out.error(f"{rule_path}.if", f"expected a boolean expression, got {type(cond_value).__name__}")
        rule_id = item.get("id")
        if rule_id is not None and not isinstance(rule_id, str):
            rule_id = str(rule_id)
        fields = _parse_fields(item, entity_id, kind, rule_path, out, in_rule=True)
        if condition is not None:
            overrides = EntityDef(id=rule_id or "", kind=kind, **fields)
            rules.append(RuleDef(condition, rule_id, overrides))
    return tuple(rules)


def _section_path(section: str, entity_id: str) -> str:
    return f"{section}[{entity_id}]"


def parse_document(text: str, source: Optional[str] = None) -> ConfigDoc:
    """Parse one YAML configuration document.

    Every expression and template is parsed here, so later stages never see
    a malformed one. Errors (YAML syntax, schema, expression syntax) raise
    :class:`ConfigError` with every problem found; warnings such as unknown
    fields are left on ``doc.diagnostics``.
    """
    where = source or "<document>"
    try:
        data = yaml.load(text, Loader=_UniqueKeyLoader) if text.strip() else None
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        location = f"{where}:{mark.line + 1}:{mark.column + 1}" if mark else where
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigError([Diagnostic("error", location, f"syntax error: {problem}")]) from None

    doc = ConfigDoc(source=source)
    if data is None:
        return doc
    out = _Collector()
    if not isinstance(data, Mapping):
        raise ConfigError([Diagnostic("error", where, "top level must be a mapping")])
    for key in data:
        if key not in TOP_LEVEL_KEYS:
            out.error(str(key), f"unknown top-level key {key!r}")

    global_data = data.get("global")
    if global_data is not None:
        if not isinstance(global_data, Mapping):
            out.error("global", "expected a mapping")
        else:
            default = global_data.get("default_inherits")
            if default is not None and not isinstance(default, str):
                out.error("global.default_inherits", "expected an entity id")
                default = None
            for key in global_data:
                if key != "default_inherits":
                    out.warning(f"global.{key}", f"unknown field {key!r} ignored")
            doc.global_section = GlobalSection(default)

    for section in SECTIONS:
        entries = data.get(section)
        if entries is None:
            continue
        if not isinstance(entries, Mapping):
            out.error(section, "expected a mapping of entity id to definition")
            continue
        kind = KINDS[section]
        target = doc.section(section)
        for raw_id, body in entries.items():
            entity_id = str(raw_id)
            path = _section_path(section, entity_id)
            if body is None:
                body = {}
            if not isinstance(body, Mapping):
                out.error(path, "expected a mapping")
                continue
            fields = _parse_fields(body, entity_id, kind, path, out)
            target[entity_id] = EntityDef(id=entity_id, kind=kind, **fields)

    if any(d.is_error for d in out.diagnostics):
        raise ConfigError(out.diagnostics)
    doc.diagnostics = out.diagnostics
    return doc


# ---------------------------------------------------------------- sources


def is_url(source: str) -> bool:
    return source.startswith(("http://", "https://"))


def default_cache_dir() -> Path:
    configured = os.environ.get(CACHE_ENV_VAR)
    if configured:
        return Path(configured)
    base = os.environ.get("XDG_CACHE_HOME") or os.path.join(os.path.expanduser("~"), ".cache")
    return Path(base) / "vortex"


def cache_path(url: str, cache_dir: Optional[os.PathLike] = None) -> Path:
    root = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    return root / (hashlib.sha256(url.encode("utf-8")).hexdigest() + ".yml")


def download(url: str, timeout: float = 10.0) -> str:
    with urllib.request.urlopen(url, timeout=timeout) as response:
        return response.read().decode("utf-8")


def store_cached(url: str, text: str, cache_dir: Optional[os.PathLike] = None) -> Optional[Path]:
    """Write ``text`` as the cached copy of ``url``; returns None if the cache is not writable."""
    cached = cache_path(url, cache_dir)
    try:
        cached.parent.mkdir(parents=True, exist_ok=True)
        tmp = cached.with_suffix(".tmp")
        tmp.write_text(text, encoding="utf-8")
        tmp.replace(cached)
    except OSError as exc:
        log.warning("could not write cache file %s: %s", cached, exc)
        return None
    return cached


def fetch_text(
    url: str, cache_dir: Optional[os.PathLike] = None, timeout: float = 10.0, store: bool = True
) -> tuple[str, bool]:
    """Download ``url``, refreshing the on-disk cache unless ``store`` is False.

    Returns ``(text, from_cache)``. When the remote is unreachable a cached
    copy is returned instead; with no cached copy :class:`SourceError` is raised.
    """
    try:
        text = download(url, timeout)
    except (urllib.error.URLError, OSError, ValueError, UnicodeDecodeError) as exc:
        cached = cache_path(url, cache_dir)
        if cached.is_file():
            log.warning("fetching %s failed (%s); using cached copy", url, exc)
            return cached.read_text(encoding="utf-8"), True
        raise SourceError([Diagnostic("error", url, f"fetch failed and no cached copy: {exc}")]) from None
    if store:
        store_cached(url, text, cache_dir)
    return text, False


def load_sources(
    sources: Sequence[str | os.PathLike], cache_dir: Optional[os.PathLike] = None, timeout: float = 10.0
) -> list[ConfigDoc]:
    """Read and parse each source (local path or HTTP(S) URL), in order."""
    docs = []
    for source in sources:
        source = os.fspath(source)
        if is_url(source):
            text, from_cache = fetch_text(source, cache_dir, timeout)
            doc = parse_document(text, source=source)
            if from_cache:
                doc.diagnostics.insert(0, Diagnostic("warning", source, "remote unreachable; using cached copy"))
        else:
            try:
                text = Path(source).read_text(encoding="utf-8")
            except (OSError, UnicodeDecodeError) as exc:
                raise SourceError([Diagnostic("error", source, f"cannot read file: {exc}")]) from None
            doc = parse_document(text, source=source)
        docs.append(doc)
    return docs


# ---------------------------------------------------------------- merging


def merge_rules(earlier: Sequence[RuleDef], later: Sequence[RuleDef]) -> tuple:
    """Concatenate rule lists; a later rule whose id matches an earlier one replaces it in place."""
    result = list(earlier)
    positions = {r.id: i for i, r in enumerate(result) if r.id is not None}
    for rule in later:
        pos = positions.pop(rule.id, None) if rule.id is not None else None
        if pos is None:
            result.append(rule)
        else:
            result[pos] = rule
    return tuple(result)


def _replace_categories(earlier: Mapping[TagCategory, tuple], later: Mapping[TagCategory, tuple]) -> dict:
    moved = {name for names in later.values() for name in names}
    merged = {}
    for category in CATEGORY_ORDER:
        if category in later:
            merged[category] = tuple(later[category])
        elif category in earlier:
            kept = tuple(n for n in earlier[category] if n not in moved)
            if kept or not earlier[category]:
                merged[category] = kept
    return merged


def _overlay_scalars(base: EntityDef, top: EntityDef) -> dict:
    out = {}
    for name in RESOURCES + BOUNDS:
        value = getattr(top, name)
        out[name] = value if value is not None else getattr(base, name)
    out["env"] = {**base.env, **top.env}
    out["params"] = {**base.params, **top.params}
    return out


def merge_entities(earlier: EntityDef, later: EntityDef) -> EntityDef:
    """Field-wise merge of the same entity declared in two documents."""
    fields = _overlay_scalars(earlier, later)
    fields["scheduling"] = _replace_categories(earlier.scheduling, later.scheduling)
    fields["rules"] = merge_rules(earlier.rules, later.rules)
    fields["inherits"] = later.inherits if later.inherits is not None else earlier.inherits
    return EntityDef(id=later.id, kind=later.kind, **fields)


def merge_documents(docs: Sequence[ConfigDoc]) -> ConfigDoc:
    """Merge documents in order; later ones override earlier ones."""
    if not docs:
        raise ValueError("merge_documents needs at least one document")
    if len(docs) == 1:
        return docs[0]
    merged = ConfigDoc(source=None)
    default = None
    for doc in docs:
        if doc.default_inherits is not None:
            default = doc.default_inherits
        for section in SECTIONS:
            target = merged.section(section)
            for key, entity in doc.section(section).items():
                target[key] = merge_entities(target[key], entity) if key in target else entity
        merged.diagnostics.extend(doc.diagnostics)
    merged.global_section = GlobalSection(default)
    merged.source = ", ".join(d.source for d in docs if d.source)
    return merged


# ------------------------------------------------------------ inheritance


def inherit(parent: EntityDef, child: EntityDef) -> EntityDef:
    """Effective definition of ``child`` on top of an already-resolved ``parent``."""
    fields = _overlay_scalars(parent, child)
    tags = merge_tag_sets(child.tags, parent.tags)
    fields["scheduling"] = {TagCategory(k): tuple(v) for k, v in tags.to_lists().items()}
    fields["rules"] = merge_rules(parent.rules, child.rules)
    return EntityDef(id=child.id, kind=child.kind, inherits=None, resolved=True, **fields)


def _finalize(entity: EntityDef) -> EntityDef:
    lists = {TagCategory(k): tuple(v) for k, v in entity.tags.to_lists().items()}
    return dataclasses.replace(entity, inherits=None, scheduling=lists, resolved=True)


def _resolve_section(section: str, entities: Mapping[str, EntityDef], default: Optional[str], out: _Collector) -> dict:
    done: dict[str, EntityDef] = {}
    failed: set[str] = set()

    def parent_of(key: str, entity: EntityDef) -> Optional[str]:
        if entity.resolved:
            return None
        if entity.inherits is not None:
            return entity.inherits
        if default is not None and key != default and default in entities:
            return default
        return None

    def resolve(key: str, stack: list[str]) -> Optional[EntityDef]:
        if key in done:
            return done[key]
        if key in failed:
            return None
        entity = entities[key]
        if key in stack:
            cycle = stack[stack.index(key):] + [key]
            out.error(_section_path(section, key), "inheritance cycle: " + " -> ".join(cycle))
            failed.update(cycle)
            return None
        parent_key = parent_of(key, entity)
        if parent_key is None:
            result = _finalize(entity)
        elif parent_key not in entities:
            out.error(f"{_section_path(section, key)}.inherits", f"inherits unknown {KINDS[section]} {parent_key!r}")
            failed.add(key)
            return None
        else:
            parent = resolve(parent_key, stack + [key])
            if parent is None:
                failed.add(key)
                return None
            try:
                result = inherit(parent, entity)
            except TagConflict as exc:
                out.error(f"{_section_path(section, key)}.scheduling", f"{exc} with inherited {parent_key!r}")
                failed.add(key)
                return None
        done[key] = result
        return result

    for key in entities:
        resolve(key, [])
    return {key: done[key] for key in entities if key in done}


def resolve_inheritance(doc: ConfigDoc | ResolvedConfig) -> ResolvedConfig:
    """Flatten every entity's ``inherits`` chain.

    Entities without ``inherits`` fall back to ``global.default_inherits`` when
    their section declares that id. Cycles and unknown parents raise
    :class:`ConfigError`.
    """
    out = _Collector()
    default = doc.default_inherits
    sections = {s: _resolve_section(s, doc.section(s), default, out) for s in SECTIONS}
    if out.diagnostics:
        raise ConfigError(out.diagnostics)
    return ResolvedConfig(default, sections, doc.diagnostics)


def load_config(
    sources: Sequence[str | os.PathLike], cache_dir: Optional[os.PathLike] = None, timeout: float = 10.0
) -> ResolvedConfig:
    """Load, merge and resolve ``sources`` in one step."""
    docs = load_sources(sources, cache_dir=cache_dir, timeout=timeout)
    if not docs:
        return ResolvedConfig(None, {})
    return resolve_inheritance(merge_documents(docs))


def config_from_text(*texts: str) -> ResolvedConfig:
    return resolve_inheritance(merge_documents([parse_document(t) for t in texts]))


# ------------------------------------------------------------- validation


def _check_expression(e: Optional[Expression], allowed: frozenset, path: str, out: _Collector) -> None:
    if e is None:
        return
    for name in sorted(e.identifiers()):
        if name not in allowed:
            out.error(path, f"expression {e.source!r} references {name!r}, which is not available here")


def _check_entity(section: str, entity: EntityDef, path: str, out: _Collector) -> None:
    kind = KINDS[section]
    context = frozenset(CONTEXT_TYPES)
    for res in RESOURCES:
        _check_expression(getattr(entity, res), context - RESOURCE_DEPENDENCIES[res], f"{path}.{res}", out)
    for name in TEMPLATE_MAPS:
        for key, template in getattr(entity, name).items():
            for ident in sorted(expr.parse_template(template).identifiers() - context):
                out.error(f"{path}.{name}.{key}", f"template references {ident!r}, which is not available")
    for name in BOUNDS:
        value = getattr(entity, name)
        if value is None:
            continue
        if kind != "destination":
            out.warning(f"{path}.{name}", f"destination-only field on {kind}")
        if value < 0:
            out.error(f"{path}.{name}", f"{name} must not be negative")
    for res in RESOURCES:
        low, high = getattr(entity, f"min_accepted_{res}"), getattr(entity, f"max_accepted_{res}")
        if low is not None and high is not None and low > high:
            out.error(path, f"min_accepted_{res} ({_number_to_data(low)}) exceeds max_accepted_{res} ({_number_to_data(high)})")


def validate(config: ResolvedConfig | ConfigDoc) -> list[Diagnostic]:
    """All invariant violations as diagnostics; an empty list means clean.

    Carried-over warnings from parsing (unknown fields, stale cache) are
    included first.
    """
    out = _Collector()
    out.diagnostics.extend(config.diagnostics)
    default = config.default_inherits
    if default is not None and not any(default in config.section(s) for s in SECTIONS):
        out.warning("global.default_inherits", f"no entity named {default!r} in any section")
    for section in SECTIONS:
        for key, entity in config.section(section).items():
            path = _section_path(section, key)
            if section != "destinations":
                try:
                    re.compile(key)
                except re.error as exc:
                    out.error(path, f"id pattern does not compile: {exc}")
            _check_entity(section, entity, path, out)
            seen_ids = set()
            for index, rule in enumerate(entity.rules):
                rule_path = f"{path}.rules[{index}]"
                if rule.id is not None:
                    if rule.id in seen_ids:
                        out.error(rule_path, f"duplicate rule id {rule.id!r}")
                    seen_ids.add(rule.id)
                _check_expression(rule.condition, frozenset(CONTEXT_TYPES), f"{rule_path}.if", out)
                kind = expr.static_type(rule.condition, CONTEXT_TYPES)
                if kind is not None and kind != "boolean":
                    out.error(f"{rule_path}.if", f"condition {rule.condition.source!r} is a {kind}, not a boolean")
                _check_entity(section, rule.overrides, rule_path, out)
    return out.diagnostics
