"""Randomized scenario fuzzing.

Each case is generated from a single integer (its case seed), which also
seeds the run, so ``run_case(n)`` reproduces case ``n`` exactly.
"""

from __future__ import annotations

import random
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from ..transport import TransportMode
from .scenario import NONDET, FaultEvent, FaultKind, FaultSchedule, Scenario, Workload
from .sim import RunResult, fault_free_bound, run_scenario

BATCH_SIZES = (1, 4, 16)
ACK_BATCHING = (1, 4)
DUMMY_INTERVALS = (1, 5, 10)


@dataclass(frozen=True)
class FuzzBounds:
    max_entries: int = 50
    max_targets: int = 4
    max_faults: int = 3
    nondet_share: float = 0.3


def random_scenario(case: int, bounds: FuzzBounds = FuzzBounds(), mutant: Optional[str] = None) -> Scenario:
    rng = random.Random(f"{case}/scenario")
    entries = rng.randint(1, bounds.max_entries)
    targets = rng.randint(1, bounds.max_targets)
    batch = rng.choice(BATCH_SIZES)
    acks = rng.choice(ACK_BATCHING)
    interval = rng.choice(DUMMY_INTERVALS)
    horizon = fault_free_bound(entries, targets, interval) // 2

    nfaults = rng.randint(0, bounds.max_faults)
    down: list = []
    events: list = []
    t = 0

    def when():
        nonlocal t
        if rng.random() < bounds.nondet_share:
            return NONDET
        t += rng.randint(0, max(1, horizon // 4))
        return t

    for _ in range(nfaults):
        # occasionally bring a failed target back before the next fault
        while down and rng.random() < 0.5:
            events.append(FaultEvent(when(), FaultKind.TARGET_UP, down.pop(rng.randrange(len(down)))))
        up = [x for x in range(1, targets + 1) if x not in down]
        if up and rng.random() < 0.75:
            x = rng.choice(up)
            down.append(x)
            events.append(FaultEvent(when(), FaultKind.TARGET_DOWN, x))
        else:
            events.append(FaultEvent(when(), FaultKind.REPLAYER_RESTART))
    while down:
        events.append(FaultEvent(when(), FaultKind.TARGET_UP, down.pop(rng.randrange(len(down)))))

    return Scenario(
        name=f"fuzz-case-{case}", targets=targets, max_batch_size=batch, ack_batching=acks,
        dummy_interval=interval, mode=rng.choice([TransportMode.FAIL, TransportMode.FLUSH]),
        mutant=mutant,
        workload=Workload(entries=entries, membership=rng.choice(["all", "random"]), payload_bytes=4),
        schedule=FaultSchedule(tuple(events)))


def case_seeds(seed: int, iterations: int) -> list:
    rng = random.Random(seed)
    return [rng.getrandbits(48) for _ in range(iterations)]


def run_case(case: int, bounds: FuzzBounds = FuzzBounds(), mutant: Optional[str] = None,
             trace: bool = True) -> RunResult:
    return run_scenario(random_scenario(case, bounds, mutant), seed=case, trace=trace)


@dataclass
class FuzzReport:
    seed: int
    iterations: int
    mutant: Optional[str]
    seconds: float = 0.0
    failures: list = field(default_factory=list)   # (case, prop, detail)
    steps: int = 0
    faults: int = 0

    @property
    def ok(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        verdict = "PASS" if self.ok else f"FAIL ({len(self.failures)} failing cases)"
        return (f"{verdict} iterations={self.iterations} seed={self.seed} mutant={self.mutant or '-'} "
                f"faults={self.faults} steps={self.steps} time={self.seconds:.1f}s")


def fuzz(iterations: int, seed: int = 0, bounds: FuzzBounds = FuzzBounds(),
         mutant: Optional[str] = None, stop_after: Optional[int] = None,
         report: Optional[Callable[[str], None]] = None) -> FuzzReport:
    """Run ``iterations`` random cases; ``stop_after`` ends early after that many failures."""
    out = FuzzReport(seed, 0, mutant)
    t0 = time.perf_counter()
    for case in case_seeds(seed, iterations):
        r = run_case(case, bounds, mutant, trace=False)
        out.iterations += 1
        out.steps += r.steps
        out.faults += r.faults_fired
        if not r.ok:
            out.failures.append((case, r.violation.prop, r.violation.detail))
            if report is not None:
                report(f"FAIL case={case} {r.violation.prop}: {r.violation.detail} "
                       f"(replay: walreplay fuzz --case {case}"
                       + (f" --mutant {mutant})" if mutant else ")"))
            if stop_after is not None and len(out.failures) >= stop_after:
                break
    out.seconds = time.perf_counter() - t0
    return out
