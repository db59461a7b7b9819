"""Fault schedules, workloads and the plain-text scenario file format.

A scenario file is a list of ``key: value`` lines. ``#`` starts a comment.
Every key except ``event`` may appear at most once::

    # one shard crashes mid-stream and comes back
    entries: 40
    targets: 3
    batch_size: 4
    ack_batching: 1
    dummy_interval: 5
    mode: fail
    membership: all
    payload_bytes: 16
    event: 30 target_down 2
    event: nondet target_up 2
    event: 120 replayer_restart

Events are ``<step|nondet> <kind> [target]`` and fire in file order. A
timed event fires at the first scheduler step at or after its time where
it is possible (a reconnect waits for the failure to be detected, for
instance). A ``nondet`` event is offered to the scheduler as one more
enabled action, so the seed decides when it happens.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Optional, Union

from ..transport import TransportMode

NONDET = "nondet"


class FaultKind(enum.Enum):
    TARGET_DOWN = "target_down"
    TARGET_UP = "target_up"
    REPLAYER_RESTART = "replayer_restart"


@dataclass(frozen=True)
class FaultEvent:
    at: Union[int, str]  # scheduler step, or NONDET
    kind: FaultKind
    target: Optional[int] = None

    def to_line(self) -> str:
        tail = "" if self.target is None else f" {self.target}"
        return f"event: {self.at} {self.kind.value}{tail}"


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class FaultSchedule:
    events: tuple = ()
    nfailures: Optional[int] = None

    def validate(self, targets) -> None:
        """Down/up must alternate per target, starting with down and ending up."""
        targets = set(targets)
        down: set = set()
        failures = 0
        for i, ev in enumerate(self.events, 1):
            if ev.at != NONDET and (not isinstance(ev.at, int) or ev.at < 0):
                raise ScheduleError(f"event {i}: time must be a step >= 0 or {NONDET!r}")
            if ev.kind is FaultKind.REPLAYER_RESTART:
                if ev.target is not None:
                    raise ScheduleError(f"event {i}: replayer_restart takes no target")
                failures += 1
                continue
            if ev.target not in targets:
                raise ScheduleError(f"event {i}: unknown target {ev.target!r}")
            if ev.kind is FaultKind.TARGET_DOWN:
                if ev.target in down:
                    raise ScheduleError(f"event {i}: target {ev.target} is already down")
                down.add(ev.target)
                failures += 1
            else:
                if ev.target not in down:
                    raise ScheduleError(f"event {i}: target {ev.target} is not down")
                down.discard(ev.target)
        if down:
            raise ScheduleError(f"targets {sorted(down)} never come back up")
        if self.nfailures is not None and failures > self.nfailures:
            raise ScheduleError(f"{failures} failures exceed the bound {self.nfailures}")

    @property
    def failures(self) -> int:
        return sum(ev.kind is not FaultKind.TARGET_UP for ev in self.events)


@dataclass(frozen=True)
class Workload:
    entries: int = 20
    membership: str = "all"   # "all", or "random": each entry goes to a random non-empty subset
    payload_bytes: int = 8
    idle_targets: tuple = ()  # targets that never appear in an entry

    def __post_init__(self):
        if self.entries < 0:
            raise ValueError("entries must be >= 0")
        if self.membership not in ("all", "random"):
            raise ValueError("membership must be 'all' or 'random'")
        if self.payload_bytes < 0:
            raise ValueError("payload_bytes must be >= 0")


@dataclass(frozen=True)
class Scenario:
    name: str = "scenario"
    targets: int = 3
    max_batch_size: int = 4
    ack_batching: int = 1
    dummy_interval: Optional[int] = None
    mode: TransportMode = TransportMode.FAIL
    mutant: Optional[str] = None
    workload: Workload = field(default_factory=Workload)
    schedule: FaultSchedule = field(default_factory=FaultSchedule)

    def __post_init__(self):
        if self.targets < 1:
            raise ValueError("targets must be >= 1")
        if self.max_batch_size < 1 or self.ack_batching < 1:
            raise ValueError("batch_size and ack_batching must be >= 1")
        if self.dummy_interval is not None and self.dummy_interval < 1:
            raise ValueError("dummy_interval must be >= 1")
        object.__setattr__(self, "mode", TransportMode(self.mode))
        bad = set(self.workload.idle_targets) - set(self.target_ids)
        if bad:
            raise ValueError(f"idle targets {sorted(bad)} outside 1..{self.targets}")
        if len(self.workload.idle_targets) >= self.targets and self.workload.entries:
            raise ValueError("at least one target must receive entries")

    @property
    def target_ids(self) -> tuple:
        return tuple(range(1, self.targets + 1))

    def with_(self, **kw) -> "Scenario":
        return replace(self, **kw)

    def to_text(self) -> str:
        w = self.workload
        lines = [f"# {self.name}",
                 f"entries: {w.entries}",
                 f"targets: {self.targets}",
                 f"batch_size: {self.max_batch_size}",
                 f"ack_batching: {self.ack_batching}",
                 f"dummy_interval: {self.dummy_interval if self.dummy_interval else 'off'}",
                 f"mode: {self.mode.value}",
                 f"membership: {w.membership}",
                 f"payload_bytes: {w.payload_bytes}"]
        if w.idle_targets:
            lines.append("idle_targets: " + " ".join(map(str, w.idle_targets)))
        if self.mutant:
            lines.append(f"mutant: {self.mutant}")
        lines += [ev.to_line() for ev in self.schedule.events]
        return "\n".join(lines) + "\n"


class ScenarioParseError(ValueError):
    def __init__(self, source: str, lineno: Optional[int], fieldname: Optional[str], message: str):
        where = source if lineno is None else f"{source}:{lineno}"
        what = f" field '{fieldname}':" if fieldname else ""
        super().__init__(f"{where}:{what} {message}")
        self.lineno = lineno
        self.field = fieldname


def _int(value: str, minimum: int = 0) -> int:
    try:
        n = int(value)
    except ValueError:
        raise ValueError(f"expected an integer, got {value!r}") from None
    if n < minimum:
        raise ValueError(f"must be >= {minimum}, got {n}")
    return n


def _optional_int(value: str) -> Optional[int]:
    return None if value in ("off", "none") else _int(value, 1)


def _event(value: str) -> FaultEvent:
    parts = value.split()
    if len(parts) not in (2, 3):
        raise ValueError("expected '<step|nondet> <kind> [target]'")
    at = parts[0] if parts[0] == NONDET else _int(parts[0])
    try:
        kind = FaultKind(parts[1])
    except ValueError:
        raise ValueError(f"unknown event kind {parts[1]!r}; "
                         f"choose from {[k.value for k in FaultKind]}") from None
    target = _int(parts[2], 1) if len(parts) == 3 else None
    if kind is not FaultKind.REPLAYER_RESTART and target is None:
        raise ValueError(f"{kind.value} needs a target id")
    return FaultEvent(at, kind, target)


_FIELDS = {
    "name": str,
    "entries": _int,
    "targets": lambda v: _int(v, 1),
    "batch_size": lambda v: _int(v, 1),
    "ack_batching": lambda v: _int(v, 1),
    "dummy_interval": _optional_int,
    "mode": lambda v: TransportMode(v).value,
    "membership": str,
    "payload_bytes": _int,
    "idle_targets": lambda v: tuple(_int(x, 1) for x in v.replace(",", " ").split()),
    "mutant": str,
    "nfailures": _int,
}


def parse_scenario(text: str, source: str = "<scenario>") -> Scenario:
    values: dict = {}
    seen_at: dict = {}
    events: list = []
    event_lines: list = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise ScenarioParseError(source, lineno, None, "expected 'key: value'")
        key, value = (s.strip() for s in line.split(":", 1))
        if key == "event":
            try:
                events.append(_event(value))
            except ValueError as e:
                raise ScenarioParseError(source, lineno, key, str(e)) from None
            event_lines.append(lineno)
            continue
        if key not in _FIELDS:
            raise ScenarioParseError(source, lineno, key, f"unknown field; known: {sorted(_FIELDS) + ['event']}")
        if key in values:
            raise ScenarioParseError(source, lineno, key, f"repeated (first set on line {seen_at[key]})")
        try:
            values[key] = _FIELDS[key](value)
        except ValueError as e:
            raise ScenarioParseError(source, lineno, key, str(e)) from None
        seen_at[key] = lineno

    def build(fieldname, fn):
        try:
            return fn()
        except ValueError as e:
            raise ScenarioParseError(source, seen_at.get(fieldname), fieldname, str(e)) from None

    workload = build("membership", lambda: Workload(
        entries=values.get("entries", Workload.entries),
        membership=values.get("membership", "all"),
        payload_bytes=values.get("payload_bytes", Workload.payload_bytes),
        idle_targets=values.get("idle_targets", ())))
    schedule = FaultSchedule(tuple(events), values.get("nfailures"))
    scenario = build("targets", lambda: Scenario(
        name=values.get("name", source),
        targets=values.get("targets", 3),
        max_batch_size=values.get("batch_size", 4),
        ack_batching=values.get("ack_batching", 1),
        dummy_interval=values.get("dummy_interval"),
        mode=TransportMode(values.get("mode", "fail")),
        mutant=values.get("mutant"),
        workload=workload,
        schedule=schedule))
    try:
        schedule.validate(scenario.target_ids)
    except ScheduleError as e:
        # point at the offending event line when the message names one
        lineno = None
        msg = str(e)
        if msg.startswith("event "):
            k = int(msg.split()[1].rstrip(":"))
            lineno = event_lines[k - 1]
        raise ScenarioParseError(source, lineno, "event", msg) from None
    if scenario.mutant is not None:
        from .system import MUTANTS
        if scenario.mutant not in MUTANTS:
            raise ScenarioParseError(source, seen_at["mutant"], "mutant",
                                     f"unknown mutant; choose from {sorted(m for m in MUTANTS if m)}")
    return scenario


def load_scenario(path) -> Scenario:
    with open(path) as fp:
        return parse_scenario(fp.read(), source=str(path))


def bundled_names() -> list:
    pkg = resources.files("walreplay") / "scenarios"
    return sorted(p.name[:-len(".scn")] for p in pkg.iterdir() if p.name.endswith(".scn"))


def bundled(name: str) -> Scenario:
    """Load one of the scenarios shipped with the package, by name."""
    path = resources.files("walreplay") / "scenarios" / f"{name}.scn"
    if not path.is_file():
        raise FileNotFoundError(f"no bundled scenario {name!r}; have {bundled_names()}")
    return parse_scenario(path.read_text(), source=name)
