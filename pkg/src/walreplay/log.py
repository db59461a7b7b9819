"""Append-only log service, log entries and the two fetcher kinds."""

from __future__ import annotations

import enum
import json
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional


class NotYetAvailable(LookupError):
    """Raised when reading an index past the end of the log."""


@dataclass(frozen=True)
class LogEntry:
    index: int
    target_ids: frozenset
    payloads: Mapping[int, bytes] = field(default_factory=dict, compare=False)
    commit_time: int = 0
    is_dummy: bool = False

    def __post_init__(self):
        if self.index < 1:
            raise ValueError(f"log index must be >= 1, got {self.index}")
        if not self.target_ids:
            raise ValueError("log entry needs at least one target")
        if self.is_dummy:
            if len(self.target_ids) != 1 or any(self.payloads.values()):
                raise ValueError("dummy entries carry one target and no payload")
        elif set(self.payloads) - set(self.target_ids):
            raise ValueError("payloads keyed by ids outside target_ids")

    def message_for(self, target_id) -> "Message":
        return Message(self.index, self.payloads.get(target_id, b""), self.is_dummy)


@dataclass(frozen=True)
class Message:
    """What actually travels to one target: the global index plus its partial mutation."""

    index: int
    payload: bytes = b""
    is_dummy: bool = False

    @classmethod
    def dummy(cls, index: int) -> "Message":
        return cls(index, b"", True)

    def key(self) -> int:
        """Compact identity for state fingerprints (dummies negative)."""
        return -self.index if self.is_dummy else self.index


class LogService:
    """In-memory durable log.

    Entries are immutable once appended and indexes are dense starting at 1.
    ``clock`` stamps commit times; ``append_latency`` returns seconds to block
    after stamping (simulated fsync plus replication), ``None`` for no delay.
    """

    def __init__(self, clock: Callable[[], int] = time.monotonic_ns,
                 append_latency: Optional[Callable[[], float]] = None):
        self.entries: list[LogEntry] = []
        self.clock = clock
        self.append_latency = append_latency
        self._cond = threading.Condition()

    def __len__(self):
        return len(self.entries)

    def __getstate__(self):
        state = self.__dict__.copy()
        state.pop("_cond")
        state["clock"] = None
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._cond = threading.Condition()

    def append(self, target_ids: Iterable, payloads: Optional[Mapping] = None,
               commit_time: Optional[int] = None) -> int:
        target_ids = frozenset(target_ids)
        payloads = dict(payloads or {})
        if set(payloads) != set(target_ids) and payloads:
            raise ValueError("payloads must be keyed exactly by target_ids")
        if commit_time is None:
            commit_time = self.clock()
        if self.append_latency is not None:
            time.sleep(self.append_latency())
        with self._cond:
            index = len(self.entries) + 1
            self.entries.append(LogEntry(index, target_ids, payloads, commit_time))
            self._cond.notify_all()
        return index

    def read(self, index: int) -> LogEntry:
        if index < 1:
            raise IndexError(f"log index must be >= 1, got {index}")
        if index > len(self.entries):
            raise NotYetAvailable(index)
        return self.entries[index - 1]

    def wait_read(self, index: int, timeout: Optional[float] = None) -> LogEntry:
        """Blocking read for threaded fetchers; raises NotYetAvailable on timeout."""
        with self._cond:
            if not self._cond.wait_for(lambda: len(self.entries) >= index, timeout):
                raise NotYetAvailable(index)
        return self.entries[index - 1]

    def dump(self, fp) -> None:
        for e in self.entries:
            rec = {
                "index": e.index,
                "target_ids": sorted(e.target_ids),
                "payload_sizes": {str(t): len(p) for t, p in sorted(e.payloads.items())},
                "commit_time": e.commit_time,
            }
            fp.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def load(cls, fp) -> "LogService":
        """Rebuild a log from dump() output; payloads are zero-filled to their recorded sizes."""
        log = cls()
        for lineno, line in enumerate(fp, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec["index"] != len(log) + 1:
                raise ValueError(f"line {lineno}: expected index {len(log) + 1}, got {rec['index']}")
            payloads = {int(t): bytes(n) for t, n in rec["payload_sizes"].items()}
            log.append(rec["target_ids"], payloads, commit_time=rec["commit_time"])
        return log


class FetcherKind(enum.Enum):
    NORMAL = "normal"
    RECOVERY = "recovery"


@dataclass(frozen=True)
class FetcherSpec:
    kind: FetcherKind
    start_index: int
    end_index: Optional[int] = None
    term: int = 0
    target_id: Optional[int] = None

    def __post_init__(self):
        if self.start_index < 1:
            raise ValueError("start_index must be >= 1")
        if self.kind is FetcherKind.NORMAL:
            if self.end_index is not None:
                raise ValueError("normal fetchers are unbounded")
        else:
            if self.end_index is None or self.end_index < self.start_index - 1:
                raise ValueError("recovery fetchers need end_index >= start_index - 1")
            if self.term < 1 or self.target_id is None:
                raise ValueError("recovery fetchers need a term and a target")

    @classmethod
    def normal(cls, start_index: int) -> "FetcherSpec":
        return cls(FetcherKind.NORMAL, start_index)

    @classmethod
    def recovery(cls, target_id, start_index: int, end_index: int, term: int) -> "FetcherSpec":
        return cls(FetcherKind.RECOVERY, start_index, end_index, term, target_id)

    @property
    def is_normal(self) -> bool:
        return self.kind is FetcherKind.NORMAL

    def indexes(self) -> range:
        if self.end_index is None:
            raise ValueError("unbounded fetcher has no finite range")
        return range(self.start_index, self.end_index + 1)


def run_fetcher(spec: FetcherSpec, log: LogService, dispatcher,
                stop: Optional[threading.Event] = None, poll: float = 0.05) -> None:
    """Drive one fetcher on the calling thread.

    Normal fetchers run until ``stop`` is set, blocking on the log for new
    entries. Recovery fetchers dispatch their bounded range to their single
    target and then signal fetching-completed on its queue.
    """
    if spec.is_normal:
        index = spec.start_index
        while stop is None or not stop.is_set():
            try:
                entry = log.wait_read(index, timeout=poll)
            except NotYetAvailable:
                continue
            dispatcher.dispatch(entry, True, 0)
            index += 1
        return

    for index in spec.indexes():
        if stop is not None and stop.is_set():
            return
        entry = log.wait_read(index)
        if spec.target_id in entry.target_ids:
            dispatcher.dispatch(entry, False, spec.term, only=spec.target_id)
    dispatcher.fetching_completed(spec.target_id, spec.term)
