"""Seeded scenario runs: workload, fault schedule and a random scheduler over System.

Everything random comes from two ``random.Random`` streams derived from
the seed (one for the workload, one for scheduling), so a run and its
trace are a pure function of (scenario, seed).

Liveness is checked as a bounded drain. Once the last fault has fired and
the producer is done, the run must reach full delivery within
``DRAIN_FACTOR`` times ``fault_free_bound`` further steps.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from typing import Optional

from ..log import LogService
from .metrics import Metrics
from .scenario import NONDET, FaultKind, Scenario, parse_scenario
from .system import System, SystemConfig, Violation

DRAIN_FACTOR = 10


def fault_free_bound(entries: int, targets: int, dummy_interval: Optional[int]) -> int:
    """Upper bound on scheduler steps for a fault-free run to deliver everything.

    Per entry: the append and the dispatch tail. Per (entry, target) pair
    at batch size 1: route, both halves of sendNext, readNext, delivery,
    ack read, the write tag and the consumer's sendNext (two steps), the
    read tag. Dummies cost the same per target as an entry.
    """
    per_pair = 10
    dummies = entries // dummy_interval + 1 if dummy_interval else 0
    return 2 + entries * (2 + per_pair * targets) + dummies * per_pair * targets


@dataclass
class RunResult:
    scenario: Scenario
    seed: int
    ok: bool
    steps: int
    violation: Optional[Violation]
    metrics: Metrics
    trace: Optional[list]
    drain_budget: int
    drain_steps: int
    faults_fired: int
    final: dict = field(default_factory=dict)

    @property
    def prop(self) -> Optional[str]:
        return None if self.violation is None else self.violation.prop

    def verdict(self) -> str:
        if self.ok:
            return "PASS"
        return f"FAIL {self.violation.prop}: {self.violation.detail}"

    def counterexample(self) -> dict:
        return {"prop": self.prop, "detail": None if self.violation is None else self.violation.detail,
                "seed": self.seed, "scenario": self.scenario.to_text(), "steps": self.steps,
                "final_state": self.final, "trace": self.trace or []}


def system_config(sc: Scenario) -> SystemConfig:
    return SystemConfig(targets=sc.target_ids, max_batch_size=sc.max_batch_size,
                        dummy_interval=sc.dummy_interval, ack_batching=sc.ack_batching,
                        mode=sc.mode, mutant=sc.mutant)


def _members(sc: Scenario, rng: random.Random) -> list:
    pool = [t for t in sc.target_ids if t not in sc.workload.idle_targets]
    if sc.workload.membership == "all":
        return pool
    k = rng.randint(1, len(pool))
    return sorted(rng.sample(pool, k))


def _possible(s: System, ev) -> bool:
    if ev.kind is FaultKind.TARGET_DOWN:
        return s.can_crash(ev.target)
    if ev.kind is FaultKind.TARGET_UP:
        return s.can_up(ev.target)
    return True


def _fire(s: System, ev) -> None:
    s._emit(ev="fault", kind=ev.kind.value, target=ev.target, at=str(ev.at))
    if ev.kind is FaultKind.TARGET_DOWN:
        s.step(f"crash{ev.target}")
    elif ev.kind is FaultKind.TARGET_UP:
        s.step(f"up{ev.target}")
    else:
        s.step("restart")


def run_scenario(sc: Scenario, seed: int = 0, trace: bool = True, observer=None) -> RunResult:
    """Run one scenario to quiescence and check it.

    ``observer(system, action)`` is called after every step, for callers
    that sample state along the way.
    """
    sc.schedule.validate(sc.target_ids)
    wl_rng = random.Random(f"{seed}/workload")
    rng = random.Random(f"{seed}/schedule")
    events = list(sc.schedule.events)
    tr: Optional[list] = [] if trace else None
    s = System(system_config(sc), log=LogService(clock=lambda: 0), trace=tr, record_metrics=True)
    budget = DRAIN_FACTOR * fault_free_bound(sc.workload.entries, sc.targets, sc.dummy_interval)
    appended = fired = 0
    drain_start: Optional[int] = None
    violation: Optional[Violation] = None
    nbytes = sc.workload.payload_bytes

    try:
        while True:
            ev = events[0] if events else None
            possible = ev is not None and _possible(s, ev)
            if possible and ev.at != NONDET and s.step_no >= ev.at:
                events.pop(0)
                _fire(s, ev)
                fired += 1
                if observer:
                    observer(s, "fault")
                continue
            acts = s.enabled()
            if appended < sc.workload.entries:
                acts.append("append")
            if possible and ev.at == NONDET:
                acts.append("fault")
            if not acts:
                if possible:
                    # nothing else can happen before the event's time: jump ahead to it
                    s.step_no = max(s.step_no, ev.at)
                    continue
                break
            if drain_start is None and not events and appended == sc.workload.entries:
                drain_start = s.step_no
            if drain_start is not None and s.step_no - drain_start > budget:
                raise Violation("liveness", f"not drained within {budget} steps after the last fault")
            a = rng.choice(acts)
            if a == "append":
                appended += 1
                ids = _members(sc, wl_rng)
                s.produce(ids, {t: bytes([appended % 256]) * nbytes for t in ids})
            elif a == "fault":
                events.pop(0)
                _fire(s, ev)
                fired += 1
            else:
                s.step(a)
            if observer:
                observer(s, a)
        if events:
            raise Violation("stuck-schedule", f"event {events[0].to_line()!r} never became possible")
        s.check_delivered()
        s.check_quiescent()
    except Violation as v:
        violation = v

    if drain_start is None:
        drain_start = s.step_no
    final = s.dispatcher.snapshot()
    final["persisted"] = {t: tg.persisted_index for t, tg in s.targets.items()}
    s._emit(ev="end", verdict="pass" if violation is None else violation.prop)
    return RunResult(sc, seed, violation is None, s.step_no, violation,
                     Metrics(s.records, unit="steps"), tr, budget, s.step_no - drain_start,
                     fired, final)


def write_trace(trace: list, path, header: Optional[dict] = None) -> None:
    with open(path, "w") as fp:
        if header is not None:
            fp.write(json.dumps(header, sort_keys=True) + "\n")
        for ev in trace:
            fp.write(json.dumps(ev, sort_keys=True) + "\n")


def trace_header(sc: Scenario, seed: int) -> dict:
    return {"ev": "header", "seed": seed, "scenario": sc.to_text()}


def write_counterexample(result: RunResult, path) -> None:
    with open(path, "w") as fp:
        json.dump(result.counterexample(), fp, sort_keys=True, indent=1)


def replay_counterexample(path) -> RunResult:
    with open(path) as fp:
        cex = json.load(fp)
    return run_scenario(parse_scenario(cex["scenario"], source=str(path)), cex["seed"])

