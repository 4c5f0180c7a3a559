import json
import random

import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from vortex.config import config_from_text, load_config
from vortex.rank import RankStrategy, Strategy
from vortex.sim import (
    BackgroundSegment,
    SimDestination,
    SimError,
    TraceError,
    TraceJob,
    compare_strategies,
    load_destinations,
    load_trace,
    run_simulation,
    write_trace,
)

from conftest import FIXTURES

SKEWED = FIXTURES / "skewed"
DEFAULT = RankStrategy(Strategy.DEFAULT)

ONE_SITE = config_from_text(
    "tools:\n  four: {cores: 4, mem: 8}\n  one: {cores: 1, mem: 1}\n  huge: {cores: 64, mem: 8}\n"
    "destinations:\n  site: {}\n"
)


def site(cores=4, mem=64.0, background=()):
    return SimDestination("site", cores, mem, 0, background)


class TestLoadTrace:
    def test_sorted_by_arrival(self, tmp_path):
        path = tmp_path / "t.jsonl"
        path.write_text(
            '{"arrival_s": 5, "tool_id": "a", "service_s": 1}\n\n'
            '{"arrival_s": 1, "tool_id": "b", "service_s": 2, "roles": ["x"], "input_gb": 0.5}\n'
        )
        jobs = load_trace(path)
        assert [j.tool_id for j in jobs] == ["b", "a"]
        assert jobs[0].roles == ("x",)

    @pytest.mark.parametrize(
        "line",
        [
            "not json",
            '{"tool_id": "a", "service_s": 1}',
            '{"arrival_s": 1, "tool_id": "a", "service_s": 0}',
            '{"arrival_s": -1, "tool_id": "a", "service_s": 1}',
            '{"arrival_s": 1, "tool_id": "a", "service_s": 1, "roles": "x"}',
        ],
    )
    def test_bad_lines_report_line_number(self, tmp_path, line):
        path = tmp_path / "t.jsonl"
        path.write_text('{"arrival_s": 0, "tool_id": "a", "service_s": 1}\n' + line + "\n")
        with pytest.raises(TraceError) as info:
            load_trace(path)
        assert info.value.line == 2

    def test_round_trip(self, tmp_path):
        jobs = [TraceJob(0, "a", 1.5), TraceJob(2, "b", 3, "u", ("r",), 0.25)]
        write_trace(tmp_path / "t.jsonl", jobs)
        assert load_trace(tmp_path / "t.jsonl") == jobs


class TestDestinations:
    def test_skewed_fixture(self):
        dests = load_destinations(SKEWED / "destinations.json")
        assert [d.id for d in dests] == ["busy_site", "quiet_site"]
        assert dests[0].background_load[0].cores_occupied == 12.8

    def test_background_above_capacity_rejected(self):
        with pytest.raises(ValueError):
            SimDestination("x", 4, 8, 0, (BackgroundSegment(0, 10, 3), BackgroundSegment(5, 10, 2)))

    def test_unknown_destination_rejected(self):
        with pytest.raises(SimError):
            run_simulation(ONE_SITE, [SimDestination("elsewhere", 4, 8)], [], DEFAULT)


class TestRun:
    def test_uncontended_job_never_waits(self):
        m = run_simulation(ONE_SITE, [site()], [TraceJob(0, "one", 10)], DEFAULT)
        assert (m.jobs_completed, m.mean_wait_s) == (1, 0.0)

    def test_two_full_width_jobs_queue(self):
        trace = [TraceJob(0, "four", 100), TraceJob(0, "four", 100)]
        m = run_simulation(ONE_SITE, [site()], trace, DEFAULT)
        assert sorted(o.wait_s for o in m.outcomes) == [0, 100]
        assert m.mean_wait_s == 50
        assert m.per_destination["site"].utilization_fraction == pytest.approx(1.0)

    def test_completion_frees_cores_before_arrival_at_same_instant(self):
        trace = [TraceJob(0, "four", 10), TraceJob(10, "four", 10)]
        m = run_simulation(ONE_SITE, [site()], trace, DEFAULT)
        assert [o.wait_s for o in m.outcomes] == [0, 0]

    def test_head_of_line_blocks(self):
        trace = [TraceJob(0, "four", 10), TraceJob(1, "four", 10), TraceJob(2, "one", 1)]
        m = run_simulation(ONE_SITE, [site()], trace, DEFAULT)
        assert [o.start_s for o in m.outcomes] == [0, 10, 20]

    def test_oversized_job_is_unschedulable(self):
        m = run_simulation(ONE_SITE, [site()], [TraceJob(0, "huge", 10)], DEFAULT)
        assert (m.jobs_unschedulable, m.jobs_completed) == (1, 0)

    def test_dispatch_failure_is_unschedulable(self):
        config = load_config([FIXTURES / "no_candidate.yml"])
        dests = [SimDestination("site_a", 4, 8), SimDestination("site_b", 4, 8)]
        m = run_simulation(config, dests, [TraceJob(0, "picky_tool", 1)], DEFAULT)
        assert m.jobs_unschedulable == 1
        assert "match" in m.outcomes[0].unschedulable_reason

    def test_background_delays_jobs(self):
        background = (BackgroundSegment(0, 50, 4),)
        m = run_simulation(ONE_SITE, [site(background=background)], [TraceJob(0, "one", 1)], DEFAULT)
        assert m.outcomes[0].start_s == 50

    def test_empty_trace(self):
        m = run_simulation(ONE_SITE, [site()], [], DEFAULT)
        assert (m.jobs_completed, m.mean_wait_s, m.p95_wait_s) == (0, 0.0, 0.0)

    def test_metrics_json_shape(self):
        m = run_simulation(ONE_SITE, [site()], [TraceJob(0, "one", 1)], DEFAULT)
        data = json.loads(m.to_json())
        assert set(data) == {
            "jobs_completed",
            "jobs_unschedulable",
            "jobs_still_queued",
            "mean_wait_s",
            "p50_wait_s",
            "p95_wait_s",
            "per_destination",
        }
        assert set(data["per_destination"]["site"]) == {"jobs", "mean_wait_s", "utilization_fraction"}


@pytest.fixture(scope="module")
def comparison():
    config = load_config([SKEWED / "config.yml"])
    return compare_strategies(
        config,
        load_destinations(SKEWED / "destinations.json"),
        load_trace(SKEWED / "trace.jsonl"),
        ["default", "least-loaded", "random"],
        seed=42,
    )


class TestSkewed:
    def test_least_loaded_beats_random_and_default(self, comparison):
        ll, rnd, default = (comparison[k].mean_wait_s for k in ("least-loaded", "random", "default"))
        assert ll < rnd
        assert ll <= 0.9 * default

    def test_default_sends_everything_to_first_site(self, comparison):
        assert comparison["default"].per_destination["busy_site"].jobs == 500

    def test_relative_delta_baseline_is_first(self, comparison):
        delta = comparison.relative_wait_delta()
        assert comparison.baseline == "default"
        assert delta["default"] == 0
        assert delta["least-loaded"] < -0.1


class TestCompare:
    def test_single_strategy(self):
        c = compare_strategies(ONE_SITE, [site()], [TraceJob(0, "one", 1)], [Strategy.DEFAULT])
        assert list(c) == ["default"]
        assert c.to_dict()["relative_mean_wait_delta"] == {"default": 0.0}

    def test_empty_trace(self):
        c = compare_strategies(ONE_SITE, [site()], [], ["default", "random"])
        assert all(m.jobs_completed == 0 for m in c.values())


# ------------------------------------------------------------- properties

_MULTI = config_from_text(
    yaml.safe_dump(
        {
            "tools": {
                "a": {"cores": 1, "mem": 2},
                "b": {"cores": 2, "mem": 4},
                "c": {"cores": 4, "mem": 16},
                "d": {"cores": 9, "mem": 1},
            },
            "destinations": {"x": {}, "y": {"max_accepted_cores": 2}, "z": {}},
        }
    )
)


@st.composite
def scenarios(draw):
    n = draw(st.integers(min_value=0, max_value=40))
    rng = random.Random(draw(st.integers(min_value=0, max_value=10**6)))
    t = 0.0
    jobs = []
    for _ in range(n):
        t += rng.expovariate(0.5)
        jobs.append(TraceJob(round(t, 2), rng.choice("abcd"), round(rng.uniform(0.5, 20), 2)))
    dests = [
        SimDestination("x", 8, 32, 0, (BackgroundSegment(5, 30, draw(st.integers(0, 8))),)),
        SimDestination("y", 4, 16),
        SimDestination("z", 6, 12, 0, (BackgroundSegment(0, 10, 3),)),
    ]
    kind = draw(st.sampled_from(list(Strategy)))
    return jobs, dests, RankStrategy(kind, 0)


class TestProperties:
    @given(scenarios(), st.integers(min_value=0, max_value=1000))
    @settings(max_examples=60, deadline=None)
    def test_conservation(self, scenario, seed):
        jobs, dests, strategy = scenario
        m = run_simulation(_MULTI, dests, jobs, strategy, seed)
        assert m.jobs_completed + m.jobs_unschedulable + m.jobs_still_queued == len(jobs)

    @given(scenarios())
    @settings(max_examples=60, deadline=None)
    def test_capacity_never_exceeded(self, scenario):
        jobs, dests, strategy = scenario

        def observer(now, states):
            for state in states.values():
                assert state.free_cores >= -1e-9
                assert state.free_mem >= -1e-9
                assert state.occupied_cores <= state.spec.total_cores + 1e-9

        run_simulation(_MULTI, dests, jobs, strategy, 3, observer=observer)

    @given(scenarios(), st.integers(min_value=0, max_value=1000))
    @settings(max_examples=40, deadline=None)
    def test_deterministic(self, scenario, seed):
        jobs, dests, strategy = scenario
        first = run_simulation(_MULTI, dests, jobs, strategy, seed)
        second = run_simulation(_MULTI, dests, jobs, strategy, seed)
        assert first.to_json() == second.to_json()
        assert first.outcomes == second.outcomes

    @given(scenarios())
    @settings(max_examples=60, deadline=None)
    def test_fifo_per_destination(self, scenario):
        jobs, dests, strategy = scenario
        m = run_simulation(_MULTI, dests, jobs, strategy, 5)
        started = [o for o in m.outcomes if o.start_s is not None]
        for dest in dests:
            mine = sorted((o for o in started if o.destination_id == dest.id), key=lambda o: o.enqueue_seq)
            starts = [o.start_s for o in mine]
            assert starts == sorted(starts)

    @given(scenarios())
    @settings(max_examples=40, deadline=None)
    def test_no_background_no_contention_means_no_wait(self, scenario):
        jobs, _, strategy = scenario
        spread = [TraceJob(i * 100.0, j.tool_id, min(j.service_s, 50)) for i, j in enumerate(jobs) if j.tool_id != "d"]
        dests = [SimDestination("x", 8, 32), SimDestination("y", 4, 16), SimDestination("z", 6, 12)]
        m = run_simulation(_MULTI, dests, spread, strategy, 1)
        assert m.mean_wait_s == 0
