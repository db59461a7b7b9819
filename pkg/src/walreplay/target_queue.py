"""Per-target dual queue with the N / RF / FC / S state machine and batching."""

from __future__ import annotations

import enum
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from .log import Message


class QueueState(enum.Enum):
    N = "N"     # normal: target up, no recovery in progress
    RF = "RF"   # recovery fetching: missed entries still being fetched
    FC = "FC"   # fetching completed: missed entries fetched, not all sent
    S = "S"     # suspended: target down / disconnected


LEGAL_TRANSITIONS = frozenset({
    (QueueState.N, QueueState.S),
    (QueueState.RF, QueueState.S),
    (QueueState.FC, QueueState.S),
    (QueueState.S, QueueState.RF),
    (QueueState.S, QueueState.N),
    (QueueState.RF, QueueState.FC),
    (QueueState.RF, QueueState.N),
    (QueueState.FC, QueueState.N),
})


_STATE_CODE = {QueueState.N: 0, QueueState.RF: 1, QueueState.FC: 2, QueueState.S: 3}


class IllegalTransition(AssertionError):
    pass


@dataclass
class Batch:
    messages: list = field(default_factory=list)

    def __len__(self):
        return len(self.messages)

    def __bool__(self):
        return bool(self.messages)

    def add(self, msg: Message) -> None:
        # ordering is deliberately not enforced here; the target-side oracle catches it
        self.messages.append(msg)

    @property
    def last_index(self) -> int:
        return self.messages[-1].index

    @property
    def indexes(self) -> list:
        return [m.index for m in self.messages]

    def key(self):
        return tuple(map(Message.key, self.messages))


class NullLock:
    """Stand-in for a mutex when the caller already serializes everything."""

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


NULL_LOCK = NullLock()


def null_lock() -> NullLock:
    return NULL_LOCK


class TargetQueue:
    """Normal + catchup queues for one target.

    ``push``, ``suspend``, ``next_batch`` (and ``restart``/``fetching_completed``)
    share one lock; ``pop_batch`` and ``erase`` share a second one guarding
    ``popped``. ``front``/``pop`` assume the first lock is already held.

    ``check_term`` and ``fc_transition`` exist only so the verification
    harness can run deliberately broken variants.
    """

    def __init__(self, target_id, lock_factory=threading.Lock,
                 check_term: bool = True, fc_transition: bool = True):
        self.target_id = target_id
        self.state = QueueState.N
        self.normal: deque = deque()
        self.catchup: deque = deque()
        self.current_term = 1
        self.popped: dict = {}
        self.current_batch: Optional[Batch] = None
        self.last_normal_index = 0
        self.dropped_suspended = 0
        self.dropped_stale = 0
        self.check_term = check_term
        self.fc_transition = fc_transition
        self.transitions: dict = {}
        self._lock_factory = lock_factory
        self._lq = lock_factory()
        self._lp = lock_factory()

    def __getstate__(self):
        state = self.__dict__.copy()
        if self._lock_factory not in (NullLock, null_lock):
            raise TypeError("only lock-free (simulated) queues can be copied")
        return state

    def _set_state(self, new: QueueState) -> None:
        old = self.state
        if old is new:
            return
        if (old, new) not in LEGAL_TRANSITIONS:
            raise IllegalTransition(f"queue {self.target_id}: {old.value} -> {new.value}")
        self.state = new
        key = (old.value, new.value)
        self.transitions[key] = self.transitions.get(key, 0) + 1

    def push(self, msg: Message, is_normal: bool, term: int = 0) -> bool:
        """Returns True if the message landed in one of the queues."""
        with self._lq:
            if self.state is QueueState.S:
                self.dropped_suspended += 1
                return False
            if is_normal:
                self.normal.append(msg)
                self.last_normal_index = max(self.last_normal_index, msg.index)
                return True
            if term == self.current_term or not self.check_term:
                self.catchup.append(msg)
                return True
            self.dropped_stale += 1
            return False

    def front(self) -> Optional[Message]:
        st = self.state
        if st in (QueueState.RF, QueueState.FC) and self.catchup:
            return self.catchup[0]
        if st is QueueState.FC and self.fc_transition:
            # catchup drained: the target rejoins the main stream
            self._set_state(QueueState.N)
            return self.normal[0] if self.normal else None
        if st is QueueState.N and self.normal:
            return self.normal[0]
        return None

    def pop(self) -> None:
        st = self.state
        if st in (QueueState.RF, QueueState.FC) and self.catchup:
            self.catchup.popleft()
            if st is QueueState.FC and not self.catchup and self.fc_transition:
                self._set_state(QueueState.N)
        elif st is QueueState.N and self.normal:
            self.normal.popleft()

    def suspend(self) -> None:
        with self._lq:
            self._set_state(QueueState.S)
            self.normal.clear()
            self.catchup.clear()
            with self._lp:
                self.popped.clear()
            self.current_batch = None

    def restart(self) -> int:
        """Target came back: bump the term and enter RF. Returns the new term."""
        with self._lq:
            self.current_term += 1
            self._set_state(QueueState.RF)
            return self.current_term

    def mark_caught_up(self) -> None:
        """Restarted target missed nothing: RF straight to N."""
        with self._lq:
            if self.state is QueueState.RF:
                self._set_state(QueueState.N)

    def fetching_completed(self, term: int) -> bool:
        """Recovery fetcher finished. Returns True if a send should be triggered."""
        with self._lq:
            if self.state is not QueueState.RF:
                return False
            if self.check_term and term != self.current_term:
                return False
            if not self.catchup:
                self._set_state(QueueState.N)
            else:
                self._set_state(QueueState.FC)
            return True

    def next_batch(self, max_size: int) -> Batch:
        with self._lq:
            batch = Batch()
            self.current_batch = batch
            f = self.front()
            while len(batch) < max_size and f is not None:
                batch.add(f)
                self.pop()
                f = self.front()
            return batch

    def pop_batch(self) -> None:
        with self._lp:
            batch = self.current_batch
            if not batch:
                return
            self.popped[batch.last_index] = batch
            self.current_batch = None

    def erase(self, index: int) -> None:
        with self._lp:
            self.popped.pop(index, None)

    def snapshot(self) -> dict:
        return {
            "state": self.state.value,
            "normal": len(self.normal),
            "catchup": len(self.catchup),
            "current_term": self.current_term,
            "popped": sorted(self.popped),
        }

    def clone(self) -> "TargetQueue":
        """Copy for state-space search; batches are never mutated once formed, so they are shared."""
        c = object.__new__(TargetQueue)
        c.__dict__.update(self.__dict__)
        c.normal = deque(self.normal)
        c.catchup = deque(self.catchup)
        c.popped = dict(self.popped)
        c.transitions = dict(self.transitions)
        return c

    def fingerprint(self):
        return (
            _STATE_CODE[self.state],
            tuple(map(Message.key, self.normal)),
            tuple(map(Message.key, self.catchup)),
            self.current_term,
            tuple(map(Batch.key, self.popped.values())),
            None if self.current_batch is None else self.current_batch.key(),
            self.last_normal_index,
        )
