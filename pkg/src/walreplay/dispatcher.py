"""Routing of log entries into target queues, stream writes/reads and ack bookkeeping.

Every protocol step exists in two granularities. The fine-grained methods
(``route``, ``send_begin``/``send_end``, ``read_next``, ``complete_dispatch``,
``on_write_tag``) are what the simulator interleaves one at a time; the
composite methods (``dispatch``, ``send_next``, ``handle_tag``) string them
together under real locks for threaded use.
"""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

from .log import LogEntry, Message
from .target_queue import Batch, QueueState, TargetQueue, null_lock
from .transport import Ack, CompletionTag, TagKind


class Status(enum.Enum):
    READY = "ready"
    NOT_READY = "not-ready"


@dataclass
class StreamHandle:
    target_id: int
    epoch: int = 1
    write_status: Status = Status.READY
    read_status: Status = Status.READY
    pending_response: Optional[Ack] = None
    connected: bool = True

    def clone(self) -> "StreamHandle":
        return StreamHandle(self.target_id, self.epoch, self.write_status, self.read_status,
                            self.pending_response, self.connected)

    def fingerprint(self):
        return (self.epoch, self.write_status is Status.READY, self.read_status is Status.READY,
                None if self.pending_response is None else self.pending_response.index,
                self.connected)


class Dispatcher:
    def __init__(self, target_ids: Iterable[int], transport, max_batch_size: int = 16,
                 dummy_interval: Optional[int] = None, lock_factory=threading.Lock,
                 check_term: bool = True, fc_transition: bool = True,
                 clock: Optional[Callable[[], int]] = None):
        if max_batch_size < 1:
            raise ValueError("max_batch_size must be >= 1")
        if dummy_interval is not None and dummy_interval < 1:
            raise ValueError("dummy interval must be >= 1")
        ids = sorted(target_ids)
        self.transport = transport
        self.max_batch_size = max_batch_size
        self.dummy_interval = dummy_interval
        self._ids = tuple(ids)
        self.queues = {i: TargetQueue(i, lock_factory, check_term, fc_transition) for i in ids}
        self.streams = {i: StreamHandle(i, transport.epoch(i)) for i in ids}
        self.last_acks = {i: 0 for i in ids}
        self.current_index = 0
        self.normal_dispatches = 0
        self.dummies_sent = 0
        self.clock = clock
        # time of the latest accepted push per (index, target), dummies excluded; read at apply time
        self.dispatch_times: dict = {}
        self.lock_d = lock_factory()
        self.lock_s = {i: lock_factory() for i in ids}
        self.lock_r = {i: lock_factory() for i in ids}

    # -- fine-grained steps ------------------------------------------------

    def route(self, entry: LogEntry, target_id, is_normal: bool, term: int) -> bool:
        """One iteration of the dispatch loop body, minus the send/read calls.

        Returns True when the guard passed and the caller must follow with
        sendNext and readNext for ``target_id``.
        """
        if not self.last_acks[target_id] < entry.index:
            return False
        # stamped before the push: once queued, another thread may send and apply it
        stamp = self.clock() if self.clock is not None else None
        if self.queues[target_id].push(entry.message_for(target_id), is_normal, term):
            if stamp is not None:
                self.dispatch_times[(entry.index, target_id)] = stamp
        return True

    def complete_dispatch(self, entry: LogEntry, is_normal: bool) -> list:
        """Tail of dispatch: advance current_index and emit dummies.

        Returns the targets that received a dummy (they need a sendNext and a readNext).
        """
        if not is_normal:
            return []
        self.current_index = entry.index
        self.normal_dispatches += 1
        if self.dummy_interval is None or self.normal_dispatches % self.dummy_interval:
            return []
        return self.emit_dummies()

    def emit_dummies(self) -> list:
        """Push a payload-free message at current_index to every lagging target in state N."""
        ci, interval = self.current_index, self.dummy_interval
        lagging = []
        for tid, q in self.queues.items():
            if not self.last_acks[tid] < ci - interval:
                continue
            if q.state is not QueueState.N or q.last_normal_index >= ci:
                continue
            if q.push(Message.dummy(ci), True, q.current_term):
                self.dummies_sent += 1
                lagging.append(tid)
        return lagging

    def send_begin(self, target_id) -> Optional[Batch]:
        """First half of sendNext: status check and batch formation."""
        if self.streams[target_id].write_status is not Status.READY:
            return None
        batch = self.queues[target_id].next_batch(self.max_batch_size)
        return batch if batch else None

    def send_end(self, target_id, batch: Batch) -> bool:
        """Second half of sendNext: the (unlocked) suspended check, then the write."""
        if self.queues[target_id].state is QueueState.S:
            return False
        stream = self.streams[target_id]
        self.transport.write(target_id, batch, CompletionTag(target_id, TagKind.WRITE, stream.epoch))
        stream.write_status = Status.NOT_READY
        return True

    def read_next(self, target_id) -> bool:
        stream = self.streams[target_id]
        if stream.read_status is not Status.READY:
            return False
        self.transport.read(target_id, stream, CompletionTag(target_id, TagKind.READ, stream.epoch))
        stream.read_status = Status.NOT_READY
        return True

    def is_current(self, tag: CompletionTag) -> bool:
        return tag.ok and tag.epoch == self.streams[tag.target_id].epoch

    def on_write_tag(self, tag: CompletionTag) -> bool:
        """Write completion minus the trailing sendNext. Returns True if a sendNext must follow.

        Failed and stale-epoch tags are dropped; the health checker owns failures.
        """
        if not self.is_current(tag):
            return False
        self.queues[tag.target_id].pop_batch()
        self.streams[tag.target_id].write_status = Status.READY
        return True

    def on_read_tag(self, tag: CompletionTag) -> Optional[int]:
        """Read completion including the re-armed read. Returns the acked index, if any."""
        if not self.is_current(tag):
            return None
        tid = tag.target_id
        stream = self.streams[tid]
        ack, stream.pending_response = stream.pending_response, None
        self.last_acks[tid] = ack.index
        self.queues[tid].erase(ack.index)
        stream.read_status = Status.READY
        self.read_next(tid)
        return ack.index

    def fetching_completed(self, target_id, term: int) -> None:
        if self.queues[target_id].fetching_completed(term):
            self.send_next(target_id)

    # -- composite operations (threaded runtime) ---------------------------

    def dispatch(self, entry: LogEntry, is_normal: bool = True, term: int = 0,
                 only=None) -> None:
        ids = sorted(entry.target_ids) if only is None else [only]
        with self.lock_d:
            for tid in ids:
                if tid in entry.target_ids and self.route(entry, tid, is_normal, term):
                    self.send_next(tid)
                    self.read_next_locked(tid)
            for tid in self.complete_dispatch(entry, is_normal):
                # a never-routed target has no read armed; without one the dummy's ack is never seen
                self.send_next(tid)
                self.read_next_locked(tid)

    def send_next(self, target_id) -> None:
        with self.lock_s[target_id]:
            batch = self.send_begin(target_id)
            if batch is not None:
                self.send_end(target_id, batch)

    def read_next_locked(self, target_id) -> None:
        with self.lock_r[target_id]:
            self.read_next(target_id)

    def handle_tag(self, tag: CompletionTag) -> None:
        """Completion-queue consumer body for one tag."""
        tid = tag.target_id
        if tag.kind is TagKind.WRITE:
            with self.lock_s[tid]:
                again = self.on_write_tag(tag)
            if again:
                self.send_next(tid)
        else:
            with self.lock_r[tid]:
                self.on_read_tag(tag)

    # -- inspection ---------------------------------------------------------

    def snapshot(self) -> dict:
        return {
            "current_index": self.current_index,
            "last_acks": dict(self.last_acks),
            "queues": {t: q.snapshot() for t, q in self.queues.items()},
        }

    def clone(self, transport) -> "Dispatcher":
        """Copy for state-space search (lock-free dispatchers only), rebound to ``transport``."""
        c = object.__new__(Dispatcher)
        c.__dict__.update(self.__dict__)
        c.transport = transport
        c.queues = {t: q.clone() for t, q in self.queues.items()}
        c.streams = {t: h.clone() for t, h in self.streams.items()}
        c.last_acks = dict(self.last_acks)
        c.dispatch_times = dict(self.dispatch_times)
        return c

    def fingerprint(self):
        ids, queues, streams, acks = self._ids, self.queues, self.streams, self.last_acks
        return (self.current_index,
                tuple([acks[i] for i in ids]),
                tuple([queues[i].fingerprint() for i in ids]),
                tuple([streams[i].fingerprint() for i in ids]),
                self.normal_dispatches % self.dummy_interval if self.dummy_interval else 0)


def sim_dispatcher(target_ids, transport, **kw) -> Dispatcher:
    return Dispatcher(target_ids, transport, lock_factory=null_lock, **kw)
