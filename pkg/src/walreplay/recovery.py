"""Replayer restart, target down/up handling and dummy-entry configuration."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

from .dispatcher import Dispatcher, Status
from .log import FetcherSpec
from .target_queue import QueueState
from .transport import TargetUnavailable


@dataclass(frozen=True)
class RecoveryConfig:
    dummy_interval: Optional[int] = None
    max_batch_size: int = 16

    def __post_init__(self):
        if self.dummy_interval is not None and self.dummy_interval < 1:
            raise ValueError("dummy_interval must be >= 1")
        if self.max_batch_size < 1:
            raise ValueError("max_batch_size must be >= 1")


class HealthKind(enum.Enum):
    DOWN = "down"
    UP = "up"


@dataclass(frozen=True)
class HealthEvent:
    target_id: int
    kind: HealthKind
    time: int = 0


def restart_start_index(last_acks: dict) -> int:
    return min(last_acks.values()) + 1


def on_replayer_restart(d: Dispatcher) -> FetcherSpec:
    """Fresh dispatcher learns every reachable target's durable index and picks the main start.

    ``d`` must be newly constructed (queues empty in N, streams ready).
    Unreachable targets are suspended and left out of the minimum; they
    recover through the ordinary target-up path once they return.
    """
    reachable = {}
    for tid in d.queues:
        try:
            reachable[tid] = d.transport.get_last_ack(tid)
        except TargetUnavailable:
            d.queues[tid].suspend()
            d.streams[tid].connected = False
    d.last_acks.update(reachable)
    # with nobody reachable any start is safe (every target recovers through
    # its reconnect path); the log's beginning is the one that needs no log knowledge
    start = restart_start_index(reachable) if reachable else 1
    for tid in d.queues:
        if tid not in reachable:
            # never filter entries for a target whose progress is unknown
            d.last_acks[tid] = 0
    d.current_index = start - 1
    return FetcherSpec.normal(start)


def on_target_down(d: Dispatcher, target_id) -> bool:
    """Health checker saw a crash/disconnect. Returns False if already suspended."""
    q = d.queues[target_id]
    if q.state is QueueState.S:
        return False
    q.suspend()
    d.streams[target_id].connected = False
    d.transport.end_epoch(target_id)
    return True


def on_target_up(d: Dispatcher, target_id) -> Optional[FetcherSpec]:
    """Target reconnected. Caller holds the dispatch region (and the target's send/read regions).

    Returns the recovery fetcher to start, or None when nothing was missed.
    """
    epoch = d.transport.reconnect(target_id)
    q = d.queues[target_id]
    term = q.restart()
    stream = d.streams[target_id]
    stream.epoch = epoch
    stream.connected = True
    stream.pending_response = None
    stream.write_status = Status.READY
    stream.read_status = Status.READY
    d.last_acks[target_id] = d.transport.get_last_ack(target_id)
    d.read_next(target_id)
    if d.last_acks[target_id] < d.current_index:
        return FetcherSpec.recovery(target_id, d.last_acks[target_id] + 1, d.current_index, term)
    q.mark_caught_up()
    return None


def maybe_emit_dummies(d: Dispatcher) -> list:
    """Dummy pass; normally triggered from complete_dispatch every dummy_interval dispatches."""
    if d.dummy_interval is None:
        return []
    return d.emit_dummies()
