"""Checks that work from a recorded trace (or from sampled state), not from the code under test.

``check_recovery_ranges`` rebuilds each target's persisted index from
``apply`` events and the dispatcher's current index from ``dispatched``
and ``restart`` events, then demands that every reconnect opens exactly
the recovery range [persisted + 1, current_index], or none when nothing
was missed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .scenario import Scenario, Workload
from .sim import RunResult, run_scenario


@dataclass
class RangeReport:
    ups: int = 0
    fetchers: int = 0
    problems: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.problems


def check_recovery_ranges(trace: list) -> RangeReport:
    rep = RangeReport()
    persisted: dict = {}
    current = 0
    for i, ev in enumerate(trace):
        kind = ev["ev"]
        if kind == "init":
            persisted = {int(t): p for t, p in ev["persisted"].items()}
        elif kind == "apply":
            persisted[ev["target"]] = ev["index"]
        elif kind == "dispatched":
            current = ev["index"]
        elif kind == "restart":
            current = ev["start_index"] - 1
        elif kind == "up":
            rep.ups += 1
            t = ev["target"]
            want = (persisted[t] + 1, current) if persisted[t] < current else None
            nxt = trace[i + 1] if i + 1 < len(trace) else {}
            got = None
            if nxt.get("ev") == "fetcher" and nxt.get("kind") == "recovery":
                if nxt["target"] != t or nxt["step"] != ev["step"]:
                    rep.problems.append(f"step {ev['step']}: recovery fetcher for the wrong target/step: {nxt}")
                    continue
                got = (nxt["start"], nxt["end"])
                rep.fetchers += 1
            if got != want:
                rep.problems.append(f"step {ev['step']}: target {t} up with persisted {persisted[t]}, "
                                    f"current_index {current}: expected range {want}, trace has {got}")
    return rep


@dataclass
class DummyReport:
    interval: int
    dispatches: int
    samples: int
    worst_lag: int                   # max over samples of current_index - last_acks[idle]
    restart_start: Optional[int]
    log_head: int
    run: Optional[RunResult] = None

    @property
    def lag_ok(self) -> bool:
        return self.samples > 0 and self.worst_lag <= 2 * self.interval

    @property
    def restart_ok(self) -> bool:
        return self.restart_start is not None and self.log_head - (self.restart_start - 1) <= 2 * self.interval

    @property
    def ok(self) -> bool:
        return self.lag_ok and self.restart_ok and self.run is not None and self.run.ok


def dummy_effectiveness(interval: int = 10, dispatches: int = 1000, targets: int = 3,
                        seed: int = 0, batch_size: int = 4) -> DummyReport:
    """One target is never a member of any entry. Sample its ack lag at every dummy check.

    Right after the ``dispatches``-th normal dispatch the replayer is
    restarted, and the restart's start index is compared with the log head.
    """
    idle = targets
    sc = Scenario(name="dummy-effectiveness", targets=targets, max_batch_size=batch_size,
                  dummy_interval=interval,
                  workload=Workload(entries=dispatches, membership="all", idle_targets=(idle,)))
    state = {"samples": 0, "worst": 0, "restart": None, "head": 0, "seen": 0}

    def observe(s, action):
        if state["restart"] is not None:
            return
        d = s.dispatcher
        if d.normal_dispatches == state["seen"]:
            return
        state["seen"] = d.normal_dispatches
        if d.normal_dispatches % interval == 0:
            state["samples"] += 1
            state["worst"] = max(state["worst"], d.current_index - d.last_acks[idle])
        if d.normal_dispatches == dispatches:
            state["head"] = len(s.log)
            s.step("restart")
            state["restart"] = s.dispatcher.current_index + 1

    run = run_scenario(sc, seed=seed, trace=False, observer=observe)
    return DummyReport(interval, dispatches, state["samples"], state["worst"], state["restart"],
                       state["head"], run)
