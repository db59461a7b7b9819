"""Exhaustive interleaving explorer over the simulated system.

Breadth-first over every enabled action of every reachable state, so the
first violation found has minimal depth. States are copied with
``System.clone`` and deduplicated by the 64-bit hash of their canonical
fingerprint (ints and tuples only, so the hash does not depend on
PYTHONHASHSEED).

With ``goal`` set, the search looks for one particular property: paths that
violate anything else first are counted and cut, and the search goes on.

Checked at every step: delivery order at each target (no duplicate, no
skipped member entry), transport contract, legal queue transitions, no
last_acks regression and the structural queue invariants. Checked at every
terminal state: every entry delivered and acknowledged (nothing stuck).
"""

from __future__ import annotations

import gc
import json
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Optional

from ..log import LogService
from ..transport import TransportMode
from .system import System, SystemConfig, Violation

# largest configurations the explorer accepts without force=True
MAX_MESSAGES = 5
MAX_FAILURES = 2
MAX_TARGETS = 3


class BoundsExceeded(ValueError):
    pass


@dataclass(frozen=True)
class ExplorerConfig:
    nmessages: int = 3
    nfailures: int = 0
    initial_last_acks: Optional[tuple] = None
    targets: int = 1
    max_batch_size: int = 2
    ack_batching: int = 1
    mode: str = "fail"
    mutant: Optional[str] = None
    check_invariants: bool = True
    max_states: int = 3_000_000
    goal: Optional[str] = None

    def __post_init__(self):
        if self.nmessages < 1:
            raise ValueError("nmessages must be >= 1")
        if self.nfailures < 0:
            raise ValueError("nfailures must be >= 0")
        TransportMode(self.mode)
        if self.initial_last_acks is not None:
            bad = [x for x in self.initial_last_acks if not 0 <= x <= self.nmessages]
            if bad:
                raise ValueError(f"initial last_ack values {bad} outside [0, {self.nmessages}]")

    @property
    def starts(self) -> tuple:
        if self.initial_last_acks is None:
            return tuple(range(self.nmessages + 1))
        return tuple(self.initial_last_acks)

    def check_bounds(self) -> None:
        if (self.nmessages > MAX_MESSAGES or self.nfailures > MAX_FAILURES
                or self.targets > MAX_TARGETS):
            raise BoundsExceeded(
                f"bounds (messages={self.nmessages}, failures={self.nfailures}, targets={self.targets}) "
                f"exceed ({MAX_MESSAGES}, {MAX_FAILURES}, {MAX_TARGETS}); pass force to run anyway")

    def system_config(self) -> SystemConfig:
        return SystemConfig(targets=tuple(range(1, self.targets + 1)),
                            max_batch_size=self.max_batch_size, ack_batching=self.ack_batching,
                            mode=TransportMode(self.mode), mutant=self.mutant)


@dataclass
class Counterexample:
    prop: str
    detail: str
    initial_last_ack: int
    choices: list
    config: dict
    trace: list = field(default_factory=list)
    final_state: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Counterexample":
        return cls(**json.loads(text))


@dataclass
class ExploreResult:
    config: ExplorerConfig
    ok: bool
    states_explored: int
    distinct_states: int
    transitions: int
    terminal_states: int
    max_depth: int
    seconds: float
    truncated: bool = False
    counterexample: Optional[Counterexample] = None
    pruned: dict = field(default_factory=dict)

    def summary(self) -> str:
        c = self.config
        verdict = "PASS" if self.ok else f"FAIL ({self.counterexample.prop})" if self.counterexample else "INCOMPLETE"
        extra = f" goal={c.goal} pruned={sum(self.pruned.values())}" if c.goal else ""
        return (f"{verdict} nmessages={c.nmessages} nfailures={c.nfailures} mode={c.mode} "
                f"mutant={c.mutant or '-'} states={self.distinct_states} transitions={self.transitions} "
                f"terminal={self.terminal_states} depth={self.max_depth} time={self.seconds:.1f}s{extra}")


def initial_system(config: ExplorerConfig, last_ack: int, trace: Optional[list] = None) -> System:
    log = LogService(clock=lambda: 0)
    ids = range(1, config.targets + 1)
    for _ in range(config.nmessages):
        log.append(ids, commit_time=0)
    persisted = {t: last_ack for t in ids}
    return System(config.system_config(), log=log, initial_persisted=persisted, trace=trace)


def actions(s: System, nfailures: int) -> list:
    acts = s.enabled()
    for t in s.config.targets:
        if s.failures < nfailures and s.can_crash(t):
            acts.append(f"crash{t}")
        if s.can_up(t):
            acts.append(f"up{t}")
    return acts


def _digest(s: System) -> int:
    return hash(s.fingerprint())


def _checked_step(s: System, action: str, check_invariants: bool) -> None:
    s.step(action)
    if check_invariants:
        s.check_invariants()


def explore(config: ExplorerConfig, force: bool = False, progress=None) -> ExploreResult:
    """Without ``goal``, a passing result means every reachable state was checked.

    With ``goal``, ``ok`` is False only if a ``goal`` violation was found.
    """
    if not force:
        config.check_bounds()
    # millions of live states make every full collection a heap walk; clones hold no cycles
    enabled = gc.isenabled()
    gc.disable()
    try:
        return _explore(config, progress)
    finally:
        if enabled:
            gc.enable()


def _explore(config: ExplorerConfig, progress) -> ExploreResult:
    t0 = time.perf_counter()
    parents: dict = {}
    frontier: deque = deque()
    for x in config.starts:
        s = initial_system(config, x)
        d = _digest(s)
        if d not in parents:
            parents[d] = (None, f"init:{x}")
            frontier.append((d, s, 0))

    transitions = terminal = max_depth = explored = 0
    pruned: dict = {}
    truncated = False

    def fail(digest, extra, v: Violation) -> ExploreResult:
        path = _path(parents, digest) + extra
        cex = replay_counterexample(config, path, v)
        return ExploreResult(config, False, explored, len(parents), transitions, terminal,
                             max_depth, time.perf_counter() - t0, counterexample=cex, pruned=pruned)

    def off_goal(v: Violation) -> bool:
        if config.goal is None or v.prop == config.goal:
            return False
        pruned[v.prop] = pruned.get(v.prop, 0) + 1
        return True

    while frontier:
        digest, s, depth = frontier.popleft()
        explored += 1
        max_depth = max(max_depth, depth)
        acts = actions(s, config.nfailures)
        if not acts:
            terminal += 1
            try:
                s.check_delivered()
            except Violation as v:
                if not off_goal(v):
                    return fail(digest, [], v)
            continue
        last = len(acts) - 1
        for i, a in enumerate(acts):
            # the parent is not needed after its last child, so that child reuses it
            child = s if i == last else s.clone()
            transitions += 1
            try:
                _checked_step(child, a, config.check_invariants)
            except Violation as v:
                if off_goal(v):
                    continue
                return fail(digest, [a], v)
            d = _digest(child)
            if d in parents:
                continue
            parents[d] = (digest, a)
            frontier.append((d, child, depth + 1))
        if len(parents) >= config.max_states:
            truncated = True
            break
        if progress is not None and explored % 50_000 == 0:
            progress(explored, len(parents), depth)

    ok = not truncated
    return ExploreResult(config, ok, explored, len(parents), transitions, terminal,
                         max_depth, time.perf_counter() - t0, truncated=truncated, pruned=pruned)


def _path(parents: dict, digest) -> list:
    out = []
    while digest is not None:
        parent, action = parents[digest]
        out.append(action)
        digest = parent
    return out[::-1]


def replay(config: ExplorerConfig, choices: list, trace: Optional[list] = None) -> System:
    """Re-run a choice sequence from its initial state. Raises the Violation it reaches, if any."""
    if not choices or not choices[0].startswith("init:"):
        raise ValueError("choice sequence must start with init:<last_ack>")
    s = initial_system(config, int(choices[0][5:]), trace=trace)
    for a in choices[1:]:
        if a not in actions(s, config.nfailures):
            raise ValueError(f"replay diverged: {a!r} not enabled at step {s.step_no}")
        _checked_step(s, a, config.check_invariants)
    if not actions(s, config.nfailures):
        s.check_delivered()
    return s


def replay_counterexample(config: ExplorerConfig, choices: list, expected: Violation) -> Counterexample:
    trace: list = []
    snapshot = {}
    try:
        s = replay(config, choices, trace=trace)
        snapshot = s.dispatcher.snapshot()
        raise AssertionError(f"counterexample did not reproduce: {expected}")
    except Violation as v:
        if v.prop != expected.prop:
            raise AssertionError(f"replay hit {v.prop}, explorer saw {expected.prop}") from v
    cfg = asdict(config)
    return Counterexample(expected.prop, expected.detail, int(choices[0][5:]), list(choices),
                          cfg, trace, snapshot)


def replay_file(path) -> Violation:
    """Load a counterexample file and reproduce its violation; returns it."""
    with open(path) as fp:
        cex = Counterexample.from_json(fp.read())
    cfg = dict(cex.config)
    if cfg.get("initial_last_acks") is not None:
        cfg["initial_last_acks"] = tuple(cfg["initial_last_acks"])
    config = ExplorerConfig(**cfg)
    try:
        replay(config, cex.choices)
    except Violation as v:
        return v
    raise AssertionError("counterexample no longer reproduces")
