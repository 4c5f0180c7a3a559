"""Command-line frontend.

Exit codes: 0 success, 1 domain error (validation, unschedulable, no
candidate, config/trace mismatch), 2 usage or I/O error. Payloads go to
stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Optional, Sequence

import yaml

from . import __version__
from .config import (
    SECTIONS,
    ConfigError,
    SourceError,
    fetch_text,
    load_sources,
    merge_documents,
    parse_document,
    resolve_inheritance,
    store_cached,
    validate,
)
from .dispatch import DispatchError, DispatchTrace, JobContext, explain
from .rank import DEFAULT_STALENESS_S, LoadFetchError, RankStrategy, Strategy, fetch_load
from .sim import SimError, TraceError, compare_strategies, load_destinations, load_trace, run_simulation

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("vortex")


def _err(message: str) -> None:
    print(message, file=sys.stderr)


def _load_resolved(sources: Sequence[str], cache_dir: Optional[str] = None):
    """Returns (config, exit code); config is None on failure."""
    try:
        docs = load_sources(sources, cache_dir=cache_dir)
    except SourceError as exc:
        for diag in exc.diagnostics:
            _err(str(diag))
        return None, EXIT_USAGE
    except ConfigError as exc:
        for diag in exc.diagnostics:
            _err(str(diag))
        return None, EXIT_DOMAIN
    if not docs:
        _err("error: no configuration sources given")
        return None, EXIT_USAGE
    try:
        return resolve_inheritance(merge_documents(docs)), EXIT_OK
    except ConfigError as exc:
        for diag in exc.diagnostics:
            _err(str(diag))
        return None, EXIT_DOMAIN


# ------------------------------------------------------------------- lint


def cmd_lint(args: argparse.Namespace) -> int:
    config, code = _load_resolved(args.sources, args.cache_dir)
    if config is None:
        return code
    diagnostics = validate(config)
    for diag in diagnostics:
        _err(str(diag))
    return EXIT_DOMAIN if any(d.is_error for d in diagnostics) else EXIT_OK


# -------------------------------------------------------- explain/dispatch


def _job_from_args(args: argparse.Namespace) -> JobContext:
    roles = tuple(r.strip() for r in (args.roles or "").split(",") if r.strip())
    return JobContext(args.tool, args.user, roles, args.input_size_gb)


def _load_snapshot(args: argparse.Namespace):
    if not args.load_source:
        if args.rank == Strategy.LEAST_LOADED.value:
            _err("warning: --rank least-loaded without --load-source; using weighted random")
        return None
    try:
        return fetch_load(args.load_source, staleness_limit=args.staleness)
    except LoadFetchError as exc:
        _err(f"warning: {exc}; using weighted random")
        return None


def _prepare(args: argparse.Namespace):
    config, code = _load_resolved(args.sources, args.cache_dir)
    if config is None:
        return None, code
    try:
        job = _job_from_args(args)
    except ValueError as exc:
        _err(f"error: {exc}")
        return None, EXIT_USAGE
    strategy = RankStrategy(Strategy(args.rank), args.seed)
    return (config, job, strategy, _load_snapshot(args)), EXIT_OK


def render_trace(trace: DispatchTrace) -> str:
    data = trace.to_dict()
    blocks = []

    def block(title: str, body) -> None:
        text = yaml.safe_dump(body, sort_keys=False, default_flow_style=False).rstrip()
        blocks.append(f"== {title}\n{text}")

    block("job", data["job"])
    if data["lookup"] is not None:
        block("lookup", data["lookup"])
    if data["combine"] is not None:
        block("combine", data["combine"])
    if data["flatten"] is not None:
        block("flatten", data["flatten"])
    if trace.candidates:
        lines = [
            f"  {'accept' if reason is None else 'skip  '} {dest}" + (f": {reason}" if reason else "")
            for dest, reason in trace.candidates
        ]
        blocks.append("== match\n" + "\n".join(lines))
    if trace.ranked:
        lines = [
            f"  {i}. {dest} (score {score}" + (f", load {load:g}%" if load is not None else "") + ")"
            for i, (dest, score, load) in enumerate(trace.ranked, start=1)
        ]
        blocks.append("== rank\n" + "\n".join(lines))
    if data["evaluate"] is not None:
        block("evaluate", data["evaluate"])
    return "\n".join(blocks)


def cmd_explain(args: argparse.Namespace) -> int:
    prepared, code = _prepare(args)
    if prepared is None:
        return code
    trace = explain(*prepared)
    if args.json:
        print(json.dumps(trace.to_dict(), indent=2))
    else:
        print(render_trace(trace))
    if trace.error is not None:
        _err(f"error: {trace.error}")
        return EXIT_DOMAIN
    return EXIT_OK


def cmd_dispatch(args: argparse.Namespace) -> int:
    prepared, code = _prepare(args)
    if prepared is None:
        return code
    trace = explain(*prepared)
    if trace.error is not None:
        _err(json.dumps({"error": trace.error.message, "stage": trace.error.stage}))
        return EXIT_DOMAIN
    print(trace.decision.to_json())
    return EXIT_OK


# --------------------------------------------------------------- simulate


def cmd_simulate(args: argparse.Namespace) -> int:
    config, code = _load_resolved(args.config, args.cache_dir)
    if config is None:
        return code
    try:
        destinations = load_destinations(args.destinations)
        trace = load_trace(args.trace)
    except (OSError, json.JSONDecodeError, TraceError) as exc:
        _err(f"error: {exc}")
        return EXIT_USAGE
    except SimError as exc:
        _err(f"error: {exc}")
        return EXIT_DOMAIN
    ranks = args.rank or [Strategy.DEFAULT.value]
    try:
        if len(ranks) == 1:
            result = run_simulation(config, destinations, trace, RankStrategy(Strategy(ranks[0]), args.seed), args.seed)
        else:
            result = compare_strategies(config, destinations, trace, ranks, args.seed)
    except SimError as exc:
        _err(f"error: {exc}")
        return EXIT_DOMAIN
    payload = result.to_json() + "\n"
    if args.out:
        try:
            with open(args.out, "w", encoding="utf-8") as handle:
                handle.write(payload)
        except OSError as exc:
            _err(f"error: {exc}")
            return EXIT_USAGE
    else:
        sys.stdout.write(payload)
    return EXIT_OK


# --------------------------------------------------------------- fetch-db


def cmd_fetch_db(args: argparse.Namespace) -> int:
    try:
        text, from_cache = fetch_text(args.url, cache_dir=args.cache_dir, store=False)
    except SourceError as exc:
        for diag in exc.diagnostics:
            _err(str(diag))
        return EXIT_USAGE
    if from_cache:
        _err(f"warning: {args.url} unreachable; using cached copy")
    try:
        doc = parse_document(text, source=args.url)
        others = [s for s in SECTIONS if s != "tools" and doc.section(s)]
        if others:
            raise ConfigError(f"expected a tools-only document, found section(s): {', '.join(others)}")
        diagnostics = validate(resolve_inheritance(doc))
    except ConfigError as exc:
        _err(str(exc.diagnostics[0]))
        return EXIT_DOMAIN
    errors = [d for d in diagnostics if d.is_error]
    if errors:
        _err(str(errors[0]))
        return EXIT_DOMAIN
    for diag in diagnostics:
        _err(str(diag))
    if not from_cache:
        store_cached(args.url, text, args.cache_dir)
    print(len(doc.tools))
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _add_job_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("sources", nargs="+", help="configuration files or URLs, merged in order")
    parser.add_argument("--tool", required=True, help="tool id")
    parser.add_argument("--user", help="user name")
    parser.add_argument("--roles", default="", help="comma-separated role names")
    parser.add_argument("--input-size-gb", type=float, default=0.0, help="total input size in GB")
    parser.add_argument("--rank", choices=[s.value for s in Strategy], default=Strategy.DEFAULT.value)
    parser.add_argument("--load-source", help="load feed file or URL")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--staleness", type=float, default=DEFAULT_STALENESS_S, help="max load feed age (s)")
    parser.add_argument("--cache-dir", help="cache directory for remote sources")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vortex", description="Job right-sizing and meta-scheduling engine")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    lint = sub.add_parser("lint", help="load, merge, resolve and validate configuration")
    lint.add_argument("sources", nargs="+")
    lint.add_argument("--cache-dir")
    lint.set_defaults(func=cmd_lint)

    exp = sub.add_parser("explain", help="show every dispatch stage for one job")
    _add_job_flags(exp)
    exp.add_argument("--json", action="store_true", help="machine-readable output")
    exp.set_defaults(func=cmd_explain)

    disp = sub.add_parser("dispatch", help="print the dispatch decision for one job")
    _add_job_flags(disp)
    disp.set_defaults(func=cmd_dispatch)

    sim = sub.add_parser("simulate", help="replay a job trace and report queue waits")
    sim.add_argument("--config", action="append", required=True, help="configuration source (repeatable)")
    sim.add_argument("--destinations", required=True, help="JSON list of destination capacities")
    sim.add_argument("--trace", required=True, help="line-delimited JSON job trace")
    sim.add_argument(
        "--rank", action="append", choices=[s.value for s in Strategy], help="strategy; repeat to compare"
    )
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", help="write metrics JSON here instead of stdout")
    sim.add_argument("--cache-dir")
    sim.set_defaults(func=cmd_simulate)

    fetch = sub.add_parser("fetch-db", help="download, validate and cache a shared tool database")
    fetch.add_argument("url")
    fetch.add_argument("--cache-dir")
    fetch.set_defaults(func=cmd_fetch_db)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
