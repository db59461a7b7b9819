import json
import math

import pytest

from oracles import expected_applies, nearest_rank as np_nearest_rank
from walreplay.harness.checkers import check_recovery_ranges, dummy_effectiveness
from walreplay.harness.metrics import DelayRecord, Metrics, Summary, nearest_rank
from walreplay.harness.scenario import (NONDET, FaultEvent, FaultKind, FaultSchedule, Scenario,
                                        ScenarioParseError, ScheduleError, Workload, bundled,
                                        bundled_names, parse_scenario)
from walreplay.harness.sim import (fault_free_bound, replay_counterexample, run_scenario,
                                   write_counterexample, write_trace)


# -- scenario files -----------------------------------------------------------

GOOD = """\
# comment line
entries: 12
targets: 2
batch_size: 1
dummy_interval: off
mode: flush
event: 10 target_down 1
event: nondet target_up 1   # trailing comment
"""


def test_parse_scenario():
    sc = parse_scenario(GOOD)
    assert (sc.workload.entries, sc.targets, sc.max_batch_size, sc.dummy_interval) == (12, 2, 1, None)
    assert sc.mode.value == "flush"
    assert sc.schedule.events == (FaultEvent(10, FaultKind.TARGET_DOWN, 1),
                                  FaultEvent(NONDET, FaultKind.TARGET_UP, 1))


def test_to_text_round_trips():
    sc = parse_scenario(GOOD)
    again = parse_scenario(sc.to_text())
    assert again.with_(name=sc.name) == sc


@pytest.mark.parametrize("text, lineno, field", [
    ("entries: many\n", 1, "entries"),
    ("entries: 3\nbogus: 1\n", 2, "bogus"),
    ("entries: 3\nentries: 4\n", 2, "entries"),
    ("targets: 2\nevent: 5 target_up 1\n", 2, "event"),
    ("targets: 2\nevent: 5 explode 1\n", 2, "event"),
    ("no colon here\n", 1, None),
])
def test_parse_errors_name_line_and_field(text, lineno, field):
    with pytest.raises(ScenarioParseError) as err:
        parse_scenario(text, source="x.scn")
    assert err.value.lineno == lineno and err.value.field == field
    assert str(err.value).startswith(f"x.scn:{lineno}:")


def test_schedule_must_end_with_everyone_up():
    with pytest.raises(ScheduleError):
        FaultSchedule((FaultEvent(1, FaultKind.TARGET_DOWN, 1),)).validate([1])
    with pytest.raises(ScheduleError):
        FaultSchedule((FaultEvent(1, FaultKind.TARGET_DOWN, 1),
                       FaultEvent(2, FaultKind.TARGET_DOWN, 1))).validate([1])


def test_bundled_scenarios_pass():
    names = bundled_names()
    assert "crash-one-target" in names
    for name in names:
        res = run_scenario(bundled(name), seed=0)
        assert res.ok, (name, res.verdict())


# -- run_scenario ---------------------------------------------------------------

def test_fault_free_baseline():
    sc = Scenario(targets=3, dummy_interval=10, workload=Workload(entries=100))
    res = run_scenario(sc, seed=0)
    assert res.ok
    assert res.final["persisted"] == {1: 100, 2: 100, 3: 100}
    assert res.steps <= fault_free_bound(100, 3, 10)


def test_every_target_applies_exactly_its_entries():
    sc = Scenario(targets=4, max_batch_size=3, workload=Workload(entries=40, membership="random"),
                  schedule=FaultSchedule((FaultEvent(50, FaultKind.TARGET_DOWN, 3),
                                          FaultEvent(NONDET, FaultKind.TARGET_UP, 3))))
    res = run_scenario(sc, seed=9)
    assert res.ok
    entries = [set(ev["targets"]) for ev in res.trace if ev["ev"] == "append"]
    for t in sc.target_ids:
        applied = [ev["index"] for ev in res.trace
                   if ev["ev"] == "apply" and ev["target"] == t and not ev["dummy"]]
        assert applied == expected_applies(entries, t, 0)


def test_crash_shows_recovery_range_in_trace():
    res = run_scenario(bundled("crash-one-target"), seed=1)
    assert res.ok
    fetchers = [ev for ev in res.trace if ev["ev"] == "fetcher" and ev["kind"] == "recovery"]
    assert fetchers and fetchers[0]["target"] == 2
    assert check_recovery_ranges(res.trace).ok


def test_replayer_restart_starts_at_min_plus_one():
    res = run_scenario(bundled("replayer-restart"), seed=0)
    assert res.ok
    restarts = [ev for ev in res.trace if ev["ev"] == "restart"][1:]
    assert restarts
    for ev in restarts:
        acks = {int(t): a for t, a in ev["last_acks"].items() if int(t) in ev["reachable"]}
        assert ev["start_index"] == min(acks.values()) + 1


def test_same_seed_same_trace():
    sc = bundled("double-crash")
    a = run_scenario(sc, seed=5)
    b = run_scenario(sc, seed=5)
    assert a.trace == b.trace
    c = run_scenario(sc, seed=6)
    assert c.trace != a.trace


def test_trace_file_is_json_lines(tmp_path):
    res = run_scenario(bundled("fault-free"), seed=0)
    p = tmp_path / "t.jsonl"
    write_trace(res.trace, p)
    lines = p.read_text().splitlines()
    assert len(lines) == len(res.trace)
    assert json.loads(lines[0])["ev"] == "init"


def test_mutant_run_fails_and_counterexample_replays(tmp_path):
    sc = bundled("crash-one-target").with_(mutant="no-fc-transition")
    res = next(r for r in (run_scenario(sc, seed=s) for s in range(20)) if not r.ok)
    p = tmp_path / "cex.json"
    write_counterexample(res, p)
    again = replay_counterexample(p)
    assert not again.ok and again.prop == res.prop
    assert again.trace == res.trace


def test_events_after_the_workload_still_fire():
    sc = Scenario(targets=1, workload=Workload(entries=3),
                  schedule=FaultSchedule((FaultEvent(100000, FaultKind.TARGET_DOWN, 1),
                                          FaultEvent(100001, FaultKind.TARGET_UP, 1))))
    assert run_scenario(sc, seed=0).ok  # time jumps forward, events still fire


def test_metrics_rows_are_ordered():
    res = run_scenario(bundled("crash-one-target"), seed=2)
    assert len(res.metrics) > 0
    assert res.metrics.disordered() == []


# -- metrics -----------------------------------------------------------------

@pytest.mark.parametrize("values", [[5], [3, 1, 2], list(range(1, 101)), [7, 7, 1, 9, 4, 4, 10, 2]])
@pytest.mark.parametrize("p", [0, 1, 50, 90, 99, 100])
def test_nearest_rank_matches_numpy(values, p):
    assert nearest_rank(sorted(values), p) == np_nearest_rank(values, p)


def test_nearest_rank_examples():
    v = list(range(1, 11))
    assert nearest_rank(v, 50) == 5
    assert nearest_rank(v, 90) == 9
    assert nearest_rank(v, 99) == 10


def test_summary_of_empty_sample():
    s = Summary.of([])
    assert s.count == 0 and math.isnan(s.median)


def test_delay_record():
    r = DelayRecord(1, 2, commit_time=10, dispatch_time=15, apply_time=40)
    assert (r.apply_delay, r.replayer_delay, r.ordered()) == (30, 25, True)
    assert not DelayRecord(1, 2, 10, 5, 40).ordered()


def test_metrics_csv(tmp_path):
    m = Metrics([(1, 1, 0, 2, 5), (2, 1, 1, 3, 9)])
    m.write_csv(tmp_path / "r.csv")
    m.write_summary_csv(tmp_path / "s.csv")
    rows = (tmp_path / "r.csv").read_text().splitlines()
    assert rows[0].startswith("index,target") and len(rows) == 3
    assert "replayer_delay" in (tmp_path / "s.csv").read_text()
    assert "median" in m.table()


# -- dummy probe --------------------------------------------------------------

def test_dummy_probe_small():
    rep = dummy_effectiveness(interval=5, dispatches=100, seed=1)
    assert rep.samples == 20
    assert rep.ok, (rep.worst_lag, rep.restart_start, rep.log_head)


def test_without_dummies_the_idle_target_lags():
    sc = Scenario(targets=2, workload=Workload(entries=50, idle_targets=(2,)))
    res = run_scenario(sc, seed=0)
    assert res.ok
    assert res.final["last_acks"][2] == 0
