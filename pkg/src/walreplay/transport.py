"""Asynchronous FIFO streaming with a completion queue, simulated.

The real system sits on an RPC stack that surfaces finished reads and writes
as tags on a completion queue. This module provides the same contract in a
single-threaded, fault-injectable form, plus the simulated target shard.

Contract a transport must honor (the threaded one in ``bench`` does too):
per-stream FIFO in both directions, at most one outstanding write and one
outstanding read per stream, every armed operation completes to exactly one
tag on a single consumer queue, and nothing crosses a connection epoch.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, replace
from typing import Callable, Optional

from .log import Message
from .target_queue import Batch


class TagKind(enum.IntEnum):
    WRITE = 0
    READ = 1


class ContractViolation(AssertionError):
    """Caller broke the one-outstanding-operation rule."""


class DeliveryViolation(AssertionError):
    """A target saw a duplicate, out-of-order or skipped index."""


class TargetUnavailable(RuntimeError):
    pass


_ID_BITS = 31


@dataclass(frozen=True)
class CompletionTag:
    target_id: int
    kind: TagKind
    epoch: int = 0
    ok: bool = True

    def encode(self) -> int:
        """Pack (epoch, target id, kind) into one integer. ``ok`` travels beside it."""
        if not 0 <= self.target_id < 1 << _ID_BITS:
            raise ValueError(f"target id {self.target_id} does not fit in a tag")
        return (self.epoch << (_ID_BITS + 1)) | (self.target_id << 1) | int(self.kind)

    @classmethod
    def decode(cls, value: int, ok: bool = True) -> "CompletionTag":
        kind = TagKind(value & 1)
        target_id = (value >> 1) & ((1 << _ID_BITS) - 1)
        return cls(target_id, kind, value >> (_ID_BITS + 1), ok)

    def failed(self) -> "CompletionTag":
        return replace(self, ok=False)

    def key(self):
        return (self.target_id, int(self.kind), self.epoch, self.ok)


@dataclass(frozen=True)
class Ack:
    index: int


class CompletionQueue:
    """FIFO of completion tags. ``next`` returns None when empty (the simulator never blocks)."""

    def __init__(self):
        self._q: deque = deque()

    def __len__(self):
        return len(self._q)

    def put(self, tag: CompletionTag) -> None:
        self._q.append(tag)

    def next(self) -> Optional[CompletionTag]:
        return self._q.popleft() if self._q else None

    def peek(self) -> Optional[CompletionTag]:
        return self._q[0] if self._q else None

    def flush(self, target_id: int, epoch: int) -> int:
        """Drop every tag of one stream epoch; returns how many were dropped."""
        keep = deque(t for t in self._q if not (t.target_id == target_id and t.epoch == epoch))
        dropped = len(self._q) - len(keep)
        self._q = keep
        return dropped

    def clear(self) -> None:
        self._q.clear()

    def clone(self) -> "CompletionQueue":
        c = CompletionQueue()
        c._q = deque(self._q)
        return c

    def fingerprint(self):
        return tuple(t.key() for t in self._q)


class SimTarget:
    """A storage shard: applies messages and durably stores the last consumed index atomically."""

    def __init__(self, target_id: int, persisted_index: int = 0, ack_batching: int = 1):
        if ack_batching < 1:
            raise ValueError("ack_batching must be >= 1")
        self.target_id = target_id
        self.epoch = 0
        self.persisted_index = persisted_index
        self.applied: list = []
        self.alive = True
        self.ack_batching = ack_batching

    def apply(self, msg: Message) -> None:
        if msg.index <= self.persisted_index:
            raise DeliveryViolation(
                f"target {self.target_id}: index {msg.index} after {self.persisted_index}")
        # one atomic step: mutation and index together
        if not msg.is_dummy:
            self.applied.append((msg.index, msg.payload))
        self.persisted_index = msg.index

    def consume(self, batch: Batch,
                check: Optional[Callable[["SimTarget", Message], None]] = None,
                on_apply: Optional[Callable[["SimTarget", Message], None]] = None) -> list:
        if not self.alive:
            raise TargetUnavailable(self.target_id)
        acks = []
        n = len(batch.messages)
        for j, msg in enumerate(batch.messages, 1):
            if check is not None:
                check(self, msg)
            self.apply(msg)
            if on_apply is not None:
                on_apply(self, msg)
            if j % self.ack_batching == 0 or j == n:
                acks.append(Ack(self.persisted_index))
        return acks

    def get_last_ack(self) -> int:
        if not self.alive:
            raise TargetUnavailable(self.target_id)
        return self.persisted_index

    def crash(self) -> None:
        self.alive = False

    def restart(self) -> None:
        self.alive = True

    def clone(self) -> "SimTarget":
        c = object.__new__(SimTarget)
        c.__dict__.update(self.__dict__)
        c.applied = list(self.applied)
        return c

    def fingerprint(self):
        # with per-apply order checking, the applied list is fixed by the start and persisted index
        return (self.alive, self.persisted_index, self.epoch, len(self.applied))


class StreamChannel:
    """One connection epoch of a bidirectional stream to a target."""

    def __init__(self, target_id: int, epoch: int):
        self.target_id = target_id
        self.epoch = epoch
        self.in_flight: deque = deque()
        self.acks: deque = deque()
        self.read_slot = None
        self.read_tag: Optional[CompletionTag] = None
        self.writes_outstanding = 0
        self.broken = False

    def clone(self, read_slot) -> "StreamChannel":
        c = object.__new__(StreamChannel)
        c.__dict__.update(self.__dict__)
        c.in_flight = deque(self.in_flight)
        c.acks = deque(self.acks)
        c.read_slot = read_slot if self.read_slot is not None else None
        return c

    def fingerprint(self):
        return (self.epoch, self.broken, self.writes_outstanding,
                tuple(map(Batch.key, self.in_flight)),
                tuple(a.index for a in self.acks),
                None if self.read_tag is None else self.read_tag.key())


class TransportMode(enum.Enum):
    FAIL = "fail"    # broken operations surface as ok=False tags
    FLUSH = "flush"  # broken operations vanish; the stream's tags are cleaned out on teardown


class SimTransport:
    """Single-threaded transport over simulated channels, driven step by step by the harness."""

    def __init__(self, targets: dict, mode: TransportMode = TransportMode.FAIL,
                 trace: Optional[list] = None):
        self.targets = targets
        self.mode = TransportMode(mode)
        self.cq = CompletionQueue()
        self.channels = {tid: StreamChannel(tid, 1) for tid in targets}
        self._ids = tuple(sorted(targets))
        for tid, t in targets.items():
            t.epoch = 1
            if not t.alive:
                self.channels[tid].broken = True
        self.trace = trace
        self.failed_tags = 0
        self.flushed_tags = 0

    def _emit(self, **ev) -> None:
        if self.trace is not None:
            self.trace.append(ev)

    def epoch(self, target_id) -> int:
        return self.channels[target_id].epoch

    def write(self, target_id, batch: Batch, tag: CompletionTag) -> None:
        ch = self.channels[target_id]
        if tag.epoch != ch.epoch:
            raise ContractViolation(f"write tagged for epoch {tag.epoch} on epoch {ch.epoch}")
        if ch.writes_outstanding:
            raise ContractViolation(f"second outstanding write on stream {target_id}")
        ch.writes_outstanding += 1
        if ch.broken:
            self._emit(ev="write", target=target_id, epoch=ch.epoch, indexes=batch.indexes, ok=False)
            if self.mode is TransportMode.FAIL:
                self.cq.put(tag.failed())
            return
        ch.in_flight.append(batch)
        self._emit(ev="write", target=target_id, epoch=ch.epoch, indexes=batch.indexes, ok=True)
        # the write tag only says the stream can take another write, not that it arrived
        self.cq.put(tag)

    def read(self, target_id, slot, tag: CompletionTag) -> None:
        ch = self.channels[target_id]
        if tag.epoch != ch.epoch:
            raise ContractViolation(f"read tagged for epoch {tag.epoch} on epoch {ch.epoch}")
        if ch.read_tag is not None:
            raise ContractViolation(f"second outstanding read on stream {target_id}")
        if ch.broken:
            if self.mode is TransportMode.FAIL:
                self.cq.put(tag.failed())
            else:
                ch.read_tag, ch.read_slot = tag, slot
            return
        ch.read_tag, ch.read_slot = tag, slot

    def can_deliver(self, target_id) -> bool:
        ch = self.channels[target_id]
        return bool(ch.in_flight) and not ch.broken and self.targets[target_id].alive

    def deliver(self, target_id, check=None, on_apply=None) -> Batch:
        """Hand the oldest in-flight batch to the target; its acks queue up on the stream."""
        ch = self.channels[target_id]
        batch = ch.in_flight.popleft()
        acks = self.targets[target_id].consume(batch, check, on_apply)
        ch.acks.extend(acks)
        self._emit(ev="deliver", target=target_id, epoch=ch.epoch, indexes=batch.indexes,
                   acks=[a.index for a in acks])
        return batch

    def can_complete_read(self, target_id) -> bool:
        ch = self.channels[target_id]
        return ch.read_tag is not None and bool(ch.acks) and not ch.broken

    def complete_read(self, target_id) -> None:
        ch = self.channels[target_id]
        ack = ch.acks.popleft()
        ch.read_slot.pending_response = ack
        tag, ch.read_tag, ch.read_slot = ch.read_tag, None, None
        self._emit(ev="ack", target=target_id, epoch=ch.epoch, index=ack.index)
        self.cq.put(tag)

    def next(self) -> Optional[CompletionTag]:
        tag = self.cq.next()
        if tag is None:
            return None
        ch = self.channels[tag.target_id]
        if tag.epoch == ch.epoch and tag.kind is TagKind.WRITE:
            ch.writes_outstanding -= 1
        if not tag.ok:
            self.failed_tags += 1
        return tag

    def crash(self, target_id) -> None:
        """Target process dies: undelivered batches and unread acks are gone."""
        self.targets[target_id].crash()
        ch = self.channels[target_id]
        ch.broken = True
        ch.in_flight.clear()
        ch.acks.clear()
        if ch.read_tag is not None and self.mode is TransportMode.FAIL:
            self.cq.put(ch.read_tag.failed())
            ch.read_tag = ch.read_slot = None
        self._emit(ev="crash", target=target_id, epoch=ch.epoch)

    def end_epoch(self, target_id) -> None:
        """Replayer side tears the stream down after detecting the failure."""
        ch = self.channels[target_id]
        ch.broken = True
        ch.in_flight.clear()
        ch.acks.clear()
        if self.mode is TransportMode.FLUSH:
            self.flushed_tags += self.cq.flush(target_id, ch.epoch)
            ch.read_tag = ch.read_slot = None
            ch.writes_outstanding = 0
        elif ch.read_tag is not None:
            self.cq.put(ch.read_tag.failed())
            ch.read_tag = ch.read_slot = None

    def reconnect(self, target_id) -> int:
        """Open a fresh epoch to a (re)started target; returns the new epoch."""
        old = self.channels[target_id]
        target = self.targets[target_id]
        target.restart()
        ch = StreamChannel(target_id, old.epoch + 1)
        self.channels[target_id] = ch
        target.epoch = ch.epoch
        self._emit(ev="connect", target=target_id, epoch=ch.epoch)
        return ch.epoch

    def reset(self) -> None:
        """Replayer process restart: every stream and the completion queue start over."""
        self.cq.clear()
        for tid, old in list(self.channels.items()):
            ch = StreamChannel(tid, old.epoch + 1)
            ch.broken = not self.targets[tid].alive
            self.channels[tid] = ch
            self.targets[tid].epoch = ch.epoch

    def get_last_ack(self, target_id) -> int:
        return self.targets[target_id].get_last_ack()

    def clone(self, targets: dict, slots: dict) -> "SimTransport":
        """Copy for state-space search. ``slots`` maps target id to the copied read slot."""
        c = object.__new__(SimTransport)
        c.__dict__.update(self.__dict__)
        c.targets = targets
        c.cq = self.cq.clone()
        c.channels = {t: ch.clone(slots.get(t)) for t, ch in self.channels.items()}
        return c

    def fingerprint(self):
        ids, channels, targets = self._ids, self.channels, self.targets
        return (self.cq.fingerprint(),
                tuple([channels[t].fingerprint() for t in ids]),
                tuple([targets[t].fingerprint() for t in ids]))
