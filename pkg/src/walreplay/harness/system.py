"""The whole replay pipeline as a steppable state machine.

Each logical thread (main fetcher, recovery fetchers, completion-queue
consumer, network delivery per stream, health checker, fault injector) is
a task whose next step is one atomic action. Actions are cut at the
mutual-exclusion boundaries of the protocol: one dispatch-loop iteration,
each half of sendNext (batch formation, then the suspended check and
write), readNext, the dispatch tail, fetchingCompleted, one completion tag,
one stream delivery, one ack read, crash, failure detection, reconnect.

Locks are modeled as owner fields; an action that would block is simply
not enabled. The state holds no callables or OS objects, so it can be
pickled for the explorer and fingerprinted for deduplication.
"""

from __future__ import annotations

import bisect
import functools
from dataclasses import dataclass
from typing import Optional

from ..dispatcher import Dispatcher, sim_dispatcher
from ..log import FetcherSpec, LogEntry, LogService, Message
from ..recovery import on_replayer_restart, on_target_down, on_target_up
from ..target_queue import IllegalTransition, QueueState
from ..transport import (ContractViolation, DeliveryViolation, SimTarget, SimTransport,
                         TagKind, TransportMode)

MUTANTS = {
    None: "reference protocol",
    "no-term": "recovery pushes and fetchingCompleted ignore the target term",
    "no-fc-transition": "a drained catchup queue never hands over to the normal queue",
    "unlocked-restart": "target reconnect does not wait for an in-progress sendNext",
}


class Violation(Exception):
    def __init__(self, prop: str, detail: str):
        super().__init__(f"{prop}: {detail}")
        self.prop = prop
        self.detail = detail


@dataclass(frozen=True)
class SystemConfig:
    targets: tuple = (1,)
    max_batch_size: int = 4
    dummy_interval: Optional[int] = None
    ack_batching: int = 1
    mode: TransportMode = TransportMode.FAIL
    mutant: Optional[str] = None

    def __post_init__(self):
        if self.mutant not in MUTANTS:
            raise ValueError(f"unknown mutant {self.mutant!r}; choose from {sorted(m for m in MUTANTS if m)}")
        object.__setattr__(self, "mode", TransportMode(self.mode))
        object.__setattr__(self, "targets", tuple(sorted(self.targets)))


class DeliveryOracle:
    """Independent expectation of what each target may apply next, computed from the log alone."""

    def __init__(self, targets):
        self.members = {t: [] for t in targets}

    def observe_append(self, entry: LogEntry) -> None:
        for t in entry.target_ids:
            self.members[t].append(entry.index)

    def next_expected(self, target_id, after: int) -> Optional[int]:
        idx = self.members[target_id]
        k = bisect.bisect_right(idx, after)
        return idx[k] if k < len(idx) else None

    def check(self, target: SimTarget, msg: Message) -> None:
        p, k = target.persisted_index, msg.index
        if k <= p:
            raise Violation("duplicate-delivery",
                            f"target {target.target_id} got index {k} with {p} already persisted")
        nxt = self.next_expected(target.target_id, p)
        if msg.is_dummy:
            if nxt is not None and nxt <= k:
                raise Violation("skipped-entry",
                                f"target {target.target_id} dummy {k} jumps over entry {nxt}")
            return
        if nxt != k:
            if k in self.members[target.target_id]:
                raise Violation("skipped-entry",
                                f"target {target.target_id} got {k}, expected {nxt} (after {p})")
            raise Violation("misrouted", f"target {target.target_id} got foreign index {k}")

    def expected_indexes(self, target_id, after: int = 0) -> list:
        idx = self.members[target_id]
        return idx[bisect.bisect_right(idx, after):]


class Fetcher:
    __slots__ = ("name", "normal", "target", "next_index", "end_index", "term", "ops", "entry",
                 "holds_d")

    def __init__(self, name, spec: FetcherSpec):
        self.name = name
        self.normal = spec.is_normal
        self.target = spec.target_id
        self.next_index = spec.start_index
        self.end_index = spec.end_index
        self.term = spec.term
        self.ops: list = []
        self.entry: Optional[LogEntry] = None
        self.holds_d = False

    def __getstate__(self):
        return tuple(getattr(self, s) for s in self.__slots__)

    def __setstate__(self, state):
        for s, v in zip(self.__slots__, state):
            setattr(self, s, v)

    def clone(self) -> "Fetcher":
        c = object.__new__(Fetcher)
        c.name, c.normal, c.target = self.name, self.normal, self.target
        c.next_index, c.end_index, c.term = self.next_index, self.end_index, self.term
        c.ops, c.entry, c.holds_d = list(self.ops), self.entry, self.holds_d
        return c

    def fingerprint(self):
        return (self.target or 0, self.term, self.next_index, self.holds_d, _ops_key(self.ops))


# fingerprints hold only ints, bools, None and tuples so that hash() is stable across processes
_OP_CODE = {"route": 0, "send": 1, "send_end": 2, "read": 3, "complete": 4, "fc": 5}


def _ops_key(ops):
    out = []
    for op in ops:
        code = _OP_CODE[op[0]]
        if code == 2:
            out.append((2, op[1], op[2].key()))
        else:
            out.append((code,) + op[1:])
    return tuple(out)


def _lock_key(lock):
    return 0 if lock == "d" else lock[1]


@functools.lru_cache(maxsize=None)
def _owner_key(owner):
    if owner == "cq":
        return (-1, 0)
    if owner == "main":
        return (0, 0)
    t, term = owner[3:].split(".")
    return (int(t), int(term))


class System:
    """Replayer + transport + targets under cooperative scheduling."""

    def __init__(self, config: SystemConfig, log: Optional[LogService] = None,
                 initial_persisted: Optional[dict] = None, trace: Optional[list] = None,
                 record_metrics: bool = False):
        self.config = config
        self.log = log if log is not None else LogService(clock=lambda: 0)
        self.oracle = DeliveryOracle(config.targets)
        for e in self.log.entries:
            self.oracle.observe_append(e)
        initial_persisted = initial_persisted or {}
        self.initial_persisted = {t: initial_persisted.get(t, 0) for t in config.targets}
        self._fixed_key = tuple(self.initial_persisted[t] for t in config.targets)
        self.targets = {t: SimTarget(t, self.initial_persisted[t], config.ack_batching)
                        for t in config.targets}
        self.trace = trace
        self.step_no = 0
        self.transport = SimTransport(self.targets, config.mode, trace=trace)
        self.health = {t: True for t in config.targets}
        self.failures = 0
        self.restarts = 0
        self.record_metrics = record_metrics
        # (index, target, commit, dispatch, apply) per applied non-dummy message
        self.records: list = []
        self._emit(ev="init", persisted={str(t): p for t, p in self.initial_persisted.items()})
        self._boot(initial=True)

    # -- construction / restart ------------------------------------------

    def _new_dispatcher(self) -> Dispatcher:
        c = self.config
        return sim_dispatcher(
            c.targets, self.transport, max_batch_size=c.max_batch_size,
            dummy_interval=c.dummy_interval,
            check_term=c.mutant != "no-term",
            fc_transition=c.mutant != "no-fc-transition",
            clock=self.now if self.record_metrics else None)

    def now(self) -> int:
        return self.step_no

    def _boot(self, initial: bool) -> None:
        if not initial:
            self.transport.reset()
        self.dispatcher = self._new_dispatcher()
        spec = on_replayer_restart(self.dispatcher)
        for t, q in self.dispatcher.queues.items():
            self.health[t] = q.state is not QueueState.S
        self.fetchers = {"main": Fetcher("main", spec)}
        self.consumer_ops: list = []
        self.locks: dict = {}
        self._emit(ev="restart", start_index=spec.start_index,
                   last_acks={str(t): a for t, a in sorted(self.dispatcher.last_acks.items())},
                   reachable=sorted(t for t in self.health if self.health[t]))
        self._emit(ev="fetcher", kind="normal", start=spec.start_index, end=None, target=None, term=0)

    def _emit(self, **ev) -> None:
        if self.trace is not None:
            ev["step"] = self.step_no
            self.trace.append(ev)

    # -- workload -----------------------------------------------------------

    def produce(self, target_ids, payloads=None) -> int:
        """The producer's action: one scheduler step that appends one entry."""
        self.step_no += 1
        return self.append(target_ids, payloads)

    def append(self, target_ids, payloads=None) -> int:
        idx = self.log.append(target_ids, payloads, commit_time=self.step_no)
        self.oracle.observe_append(self.log.entries[-1])
        self._emit(ev="append", index=idx, targets=sorted(target_ids))
        return idx

    # -- lock helpers --------------------------------------------------------

    def _free(self, lock, owner) -> bool:
        holder = self.locks.get(lock)
        return holder is None or holder == owner

    def _take(self, lock, owner) -> None:
        self.locks[lock] = owner

    def _drop(self, lock) -> None:
        self.locks.pop(lock, None)

    # -- enabled actions -----------------------------------------------------

    def _fetcher_peek(self, f: Fetcher):
        if f.ops:
            return f.ops[0]
        if f.normal:
            if f.next_index > len(self.log):
                return None
            return ("route",)
        # recovery: skip entries the target is not in
        i = f.next_index
        while i <= f.end_index and f.target not in self.log.entries[i - 1].target_ids:
            i += 1
        return ("route",) if i <= f.end_index else ("fc",)

    def _op_enabled(self, op, owner) -> bool:
        kind = op[0]
        if kind == "route":
            return self._free("d", owner)
        if kind == "send":
            return self._free(("s", op[1]), owner)
        return True

    def enabled(self) -> list:
        acts = []
        for name, f in self.fetchers.items():
            op = self._fetcher_peek(f)
            if op is not None and self._op_enabled(op, name):
                acts.append(name)
        if self.consumer_ops:
            if self._op_enabled(self.consumer_ops[0], "cq"):
                acts.append("cq")
        else:
            tag = self.transport.cq.peek()
            if tag is not None and (tag.kind is TagKind.READ or self._free(("s", tag.target_id), "cq")):
                acts.append("cq")
        tr = self.transport
        for t in self.config.targets:
            if tr.can_deliver(t):
                acts.append(f"net{t}")
            if tr.can_complete_read(t):
                acts.append(f"ack{t}")
            if not self.targets[t].alive and self.health[t]:
                acts.append(f"detect{t}")
        return acts

    def can_crash(self, t) -> bool:
        return self.targets[t].alive and self.health[t]

    def can_up(self, t) -> bool:
        if self.health[t]:
            return False
        if not self._free("d", "up"):
            return False
        if self.config.mutant == "unlocked-restart":
            return True
        return self._free(("s", t), "up")

    # -- stepping -----------------------------------------------------------

    def step(self, action: str) -> None:
        """Execute one enabled action. Safety violations surface as Violation."""
        self.step_no += 1
        before = dict(self.dispatcher.last_acks)
        mark = len(self.trace) if self.trace is not None else 0
        try:
            self._dispatch_action(action)
        except Violation:
            raise
        except DeliveryViolation as e:
            raise Violation("duplicate-delivery", str(e)) from e
        except ContractViolation as e:
            raise Violation("contract", str(e)) from e
        except IllegalTransition as e:
            raise Violation("illegal-transition", str(e)) from e
        finally:
            if self.trace is not None:
                for ev in self.trace[mark:]:
                    ev.setdefault("step", self.step_no)
        for t, a in self.dispatcher.last_acks.items():
            if a < before.get(t, 0) and not action.startswith(("restart",)):
                raise Violation("ack-regression", f"last_acks[{t}] went {before[t]} -> {a}")

    def _dispatch_action(self, action: str) -> None:
        if action in self.fetchers:
            # fetchers are shared between clones; copy the one about to change
            f = self.fetchers[action] = self.fetchers[action].clone()
            self._step_fetcher(f)
        elif action == "cq":
            self._step_consumer()
        elif action.startswith("net"):
            t = int(action[3:])
            self.transport.deliver(t, check=self.oracle.check, on_apply=self._on_apply)
        elif action.startswith("ack"):
            self.transport.complete_read(int(action[3:]))
        elif action.startswith("detect"):
            self.detect_down(int(action[6:]))
        elif action.startswith("crash"):
            self.crash(int(action[5:]))
        elif action.startswith("up"):
            self.up(int(action[2:]))
        elif action == "restart":
            self.replayer_restart()
        elif action == "append":
            raise ValueError("append is driven by the scheduler, not step()")
        else:
            raise ValueError(f"unknown action {action!r}")

    def _on_apply(self, target: SimTarget, msg: Message) -> None:
        if self.record_metrics and not msg.is_dummy:
            t = target.target_id
            self.records.append((msg.index, t, self.log.entries[msg.index - 1].commit_time,
                                 self.dispatcher.dispatch_times.get((msg.index, t)), self.step_no))
        self._emit(ev="apply", target=target.target_id, index=msg.index, dummy=msg.is_dummy)

    def _run_op(self, op, owner, ops: list) -> None:
        d = self.dispatcher
        kind = op[0]
        if kind == "send":
            t = op[1]
            batch = d.send_begin(t)
            if batch is not None:
                self._take(("s", t), owner)
                ops.insert(0, ("send_end", t, batch))
        elif kind == "send_end":
            _, t, batch = op
            d.send_end(t, batch)
            self._drop(("s", t))
        elif kind == "read":
            d.read_next(op[1])
        else:
            raise AssertionError(f"unexpected op {op!r}")

    def _step_fetcher(self, f: Fetcher) -> None:
        d = self.dispatcher
        if not f.ops:
            if f.normal:
                f.entry = self.log.read(f.next_index)
                ids = sorted(f.entry.target_ids)
            else:
                while (f.next_index <= f.end_index
                       and f.target not in self.log.entries[f.next_index - 1].target_ids):
                    f.next_index += 1
                if f.next_index > f.end_index:
                    f.ops = [("fc",)]
                    f.entry = None
                else:
                    f.entry = self.log.read(f.next_index)
                    ids = [f.target]
            if f.entry is not None:
                f.ops = [("route", t) for t in ids] + [("complete",)]
        op = f.ops.pop(0)
        kind = op[0]
        if kind == "route":
            if not f.holds_d:
                self._take("d", f.name)
                f.holds_d = True
            if d.route(f.entry, op[1], f.normal, f.term):
                f.ops[0:0] = [("send", op[1]), ("read", op[1])]
        elif kind == "complete":
            if f.normal:
                self._emit(ev="dispatched", index=f.entry.index)
            for t in d.complete_dispatch(f.entry, f.normal):
                self._emit(ev="dummy", target=t, index=d.current_index)
                f.ops += [("send", t), ("read", t)]
        elif kind == "fc":
            q = d.queues[f.target]
            if q.fetching_completed(f.term):
                self._emit(ev="fetching_completed", target=f.target, term=f.term, state=q.state.value)
                f.ops.append(("send", f.target))
                f.entry = None
                return
            self._emit(ev="fetching_completed", target=f.target, term=f.term, state="stale")
            del self.fetchers[f.name]
            return
        else:
            self._run_op(op, f.name, f.ops)
        if not f.ops:
            if f.entry is None:
                # trailing sendNext after fetchingCompleted
                del self.fetchers[f.name]
                return
            if f.holds_d:
                self._drop("d")
                f.holds_d = False
            f.next_index += 1
            f.entry = None

    def _step_consumer(self) -> None:
        d = self.dispatcher
        if self.consumer_ops:
            self._run_op(self.consumer_ops.pop(0), "cq", self.consumer_ops)
            return
        tag = self.transport.next()
        if tag.kind is TagKind.WRITE:
            if d.on_write_tag(tag):
                self.consumer_ops.append(("send", tag.target_id))
        else:
            acked = d.on_read_tag(tag)
            if acked is not None:
                self._emit(ev="ack_read", target=tag.target_id, index=acked)

    # -- faults -------------------------------------------------------------

    def crash(self, t) -> None:
        if not self.can_crash(t):
            raise ValueError(f"target {t} cannot crash now")
        self.failures += 1
        self.transport.crash(t)

    def detect_down(self, t) -> None:
        on_target_down(self.dispatcher, t)
        self.health[t] = False
        self._emit(ev="down", target=t)

    def up(self, t) -> None:
        if not self.can_up(t):
            raise ValueError(f"target {t} cannot come up now")
        d = self.dispatcher
        persisted = self.targets[t].persisted_index
        ci = d.current_index
        spec = on_target_up(d, t)
        self.health[t] = True
        self._emit(ev="up", target=t, term=d.queues[t].current_term, current_index=ci,
                   persisted=persisted)
        if spec is not None:
            name = f"rec{t}.{spec.term}"
            self.fetchers[name] = Fetcher(name, spec)
            self._emit(ev="fetcher", kind="recovery", target=t, start=spec.start_index,
                       end=spec.end_index, term=spec.term)

    def replayer_restart(self) -> None:
        self.restarts += 1
        self._boot(initial=False)

    # -- end-of-run checks ---------------------------------------------------

    def busy(self) -> bool:
        return bool(self.locks) or any(f.ops for f in self.fetchers.values()) or bool(self.consumer_ops)

    def check_delivered(self) -> None:
        """Liveness at quiescence: every entry reached every member target and was acked."""
        if self.busy():
            raise Violation("deadlock", f"tasks blocked holding {sorted(map(str, self.locks))}")
        for t in self.config.targets:
            target = self.targets[t]
            want = self.oracle.expected_indexes(t, self.initial_persisted[t])
            got = [i for i, _ in target.applied]
            if got != want:
                missing = sorted(set(want) - set(got))
                raise Violation("liveness", f"target {t} missing {missing[:8]} (applied {len(got)}/{len(want)})")
            if not target.alive or not self.health[t]:
                raise Violation("liveness", f"target {t} still down at end of run")
            if self.dispatcher.last_acks[t] != target.persisted_index:
                raise Violation("liveness", f"last_acks[{t}]={self.dispatcher.last_acks[t]} "
                                            f"but target persisted {target.persisted_index}")

    def check_quiescent(self) -> None:
        """Stronger end state for fault-free drains: queues empty, nothing retained."""
        for t, q in self.dispatcher.queues.items():
            if q.state is not QueueState.N or q.normal or q.catchup or q.popped:
                raise Violation("quiescence", f"queue {t} not drained: {q.snapshot()}")

    def check_invariants(self) -> None:
        for t, q in self.dispatcher.queues.items():
            if q.state is QueueState.S and (q.normal or q.catchup or q.popped):
                raise Violation("invariant", f"suspended queue {t} holds messages")
            if q.catchup and q.state not in (QueueState.RF, QueueState.FC):
                raise Violation("invariant", f"queue {t} has catchup entries in state {q.state.value}")
            keys = list(q.popped)
            if keys != sorted(keys) or len(set(keys)) != len(keys):
                raise Violation("invariant", f"queue {t} popped keys out of order: {keys}")
        if self.dispatcher.current_index > len(self.log):
            raise Violation("invariant", "current_index beyond log head")

    # -- state identity --------------------------------------------------------

    def fingerprint(self):
        return (
            self.dispatcher.fingerprint(),
            self.transport.fingerprint(),
            tuple([f.fingerprint() for f in self.fetchers.values()]),
            _ops_key(self.consumer_ops),
            tuple(sorted([(_lock_key(k), _owner_key(v)) for k, v in self.locks.items()])),
            tuple(self.health.values()),
            self._fixed_key,
            self.failures,
        )

    def __getstate__(self):
        state = self.__dict__.copy()
        state["trace"] = None
        return state

    def clone(self) -> "System":
        """Independent copy for state-space search.

        The log, oracle and config are shared (the explorer never appends),
        as are messages and formed batches, which are never mutated. The
        trace is not carried over.
        """
        c = object.__new__(System)
        c.__dict__.update(self.__dict__)
        c.trace = None
        c.targets = {t: tg.clone() for t, tg in self.targets.items()}
        d = self.dispatcher.clone(None)
        c.transport = self.transport.clone(c.targets, d.streams)
        c.transport.trace = None
        d.transport = c.transport
        if d.clock is not None:
            d.clock = c.now
        c.dispatcher = d
        c.fetchers = dict(self.fetchers)
        c.consumer_ops = list(self.consumer_ops)
        c.locks = dict(self.locks)
        c.health = dict(self.health)
        c.records = list(self.records)
        return c
