"""Wall-clock benchmark on real threads.

One producer (the caller's thread) appends transactions to the log, the
main fetcher thread dispatches them, a consumer thread drains the
completion queue, and one thread per target applies what arrives on its
stream. Times are ``time.monotonic_ns``.

Each entry is a transaction of ``payload_kb`` key-values of 1 KB. Every
key-value lands on one target (seeded), so an entry's target set is the
set of targets that own at least one of its key-values.
"""

from __future__ import annotations

import queue
import random
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Optional

from .dispatcher import Dispatcher
from .harness.metrics import Metrics
from .log import FetcherSpec, LogService, run_fetcher
from .target_queue import Batch
from .transport import Ack, CompletionTag, ContractViolation, SimTarget, TagKind

KV_BYTES = 1024


@dataclass(frozen=True)
class BenchConfig:
    targets: int = 4
    payload_kb: int = 1
    entries: int = 10_000
    batch_size: int = 16
    dummy_interval: Optional[int] = None
    append_latency_us: float = 200.0   # simulated fsync + replication per append
    append_jitter_us: float = 50.0
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.targets <= 64:
            raise ValueError("targets must be in 1..64")
        if self.payload_kb < 0:
            raise ValueError("payload_kb must be >= 0 (whole 1 KB key-values)")
        if self.entries < 1:
            raise ValueError("entries must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.append_latency_us < 0 or self.append_jitter_us < 0:
            raise ValueError("append latency parameters must be >= 0")


class _Channel:
    def __init__(self, epoch: int):
        self.epoch = epoch
        self.lock = threading.Lock()
        self.inbox: queue.SimpleQueue = queue.SimpleQueue()
        self.acks: deque = deque()
        self.read_tag: Optional[CompletionTag] = None
        self.read_slot = None
        self.writing = False


class ThreadedTransport:
    """Real-thread transport with the contract of the simulated one (no fault injection)."""

    def __init__(self, targets: dict):
        self.targets = targets
        self.cq: queue.SimpleQueue = queue.SimpleQueue()
        self.channels = {t: _Channel(1) for t in targets}

    def epoch(self, target_id) -> int:
        return self.channels[target_id].epoch

    def write(self, target_id, batch: Batch, tag: CompletionTag) -> None:
        ch = self.channels[target_id]
        with ch.lock:
            if ch.writing:
                raise ContractViolation(f"second outstanding write on stream {target_id}")
            ch.writing = True
        ch.inbox.put(batch)
        self.cq.put(tag)

    def read(self, target_id, slot, tag: CompletionTag) -> None:
        ch = self.channels[target_id]
        with ch.lock:
            if ch.read_tag is not None:
                raise ContractViolation(f"second outstanding read on stream {target_id}")
            if ch.acks:
                slot.pending_response = ch.acks.popleft()
                self.cq.put(tag)
            else:
                ch.read_tag, ch.read_slot = tag, slot

    def ack(self, target_id, ack: Ack) -> None:
        ch = self.channels[target_id]
        with ch.lock:
            if ch.read_tag is None:
                ch.acks.append(ack)
                return
            ch.read_slot.pending_response = ack
            tag, ch.read_tag, ch.read_slot = ch.read_tag, None, None
        self.cq.put(tag)

    def next(self, timeout: Optional[float] = None) -> Optional[CompletionTag]:
        try:
            tag = self.cq.get(timeout=timeout)
        except queue.Empty:
            return None
        if tag.kind is TagKind.WRITE:
            ch = self.channels[tag.target_id]
            with ch.lock:
                ch.writing = False
        return tag

    def get_last_ack(self, target_id) -> int:
        return self.targets[target_id].get_last_ack()


@dataclass
class BenchResult:
    config: BenchConfig
    metrics: Metrics
    seconds: float
    entries_per_second: float
    complete: bool

    def table(self) -> str:
        return self.metrics.table(scale=1e-6, unit="ms")


def make_workload(cfg: BenchConfig) -> list:
    """(target_ids, payloads) per entry, from the config's seed."""
    rng = random.Random(cfg.seed)
    out = []
    for i in range(cfg.entries):
        owners: dict = {}
        for _ in range(cfg.payload_kb):
            t = rng.randint(1, cfg.targets)
            owners[t] = owners.get(t, 0) + 1
        if not owners:  # empty transaction still has to reach someone
            owners[rng.randint(1, cfg.targets)] = 0
        out.append((sorted(owners), {t: bytes([i % 251]) * (n * KV_BYTES) for t, n in owners.items()}))
    return out


def run_bench(cfg: BenchConfig, timeout: float = 300.0) -> BenchResult:
    ids = list(range(1, cfg.targets + 1))
    rng = random.Random(cfg.seed + 1)
    lat, jit = cfg.append_latency_us * 1e-6, cfg.append_jitter_us * 1e-6
    log = LogService(clock=time.monotonic_ns,
                     append_latency=(lambda: max(0.0, rng.uniform(lat - jit, lat + jit))) if lat else None)
    targets = {t: SimTarget(t) for t in ids}
    transport = ThreadedTransport(targets)
    d = Dispatcher(ids, transport, max_batch_size=cfg.batch_size,
                   dummy_interval=cfg.dummy_interval, clock=time.monotonic_ns)
    apply_times: dict = {}
    stop = threading.Event()
    errors: list = []

    def guarded(fn):
        def run():
            try:
                fn()
            except BaseException as e:  # surface thread failures to the caller
                errors.append(e)
                stop.set()
        return run

    def consumer():
        while not stop.is_set():
            tag = transport.next(timeout=0.05)
            if tag is not None:
                d.handle_tag(tag)

    def target_loop(t):
        target, ch = targets[t], transport.channels[t]

        def on_apply(_target, msg):
            if not msg.is_dummy:
                apply_times[(msg.index, t)] = time.monotonic_ns()

        def run():
            while not stop.is_set():
                try:
                    batch = ch.inbox.get(timeout=0.05)
                except queue.Empty:
                    continue
                for ack in target.consume(batch, on_apply=on_apply):
                    transport.ack(t, ack)
        return run

    threads = [threading.Thread(target=guarded(consumer), name="cq", daemon=True)]
    threads += [threading.Thread(target=guarded(target_loop(t)), name=f"target-{t}", daemon=True)
                for t in ids]
    threads.append(threading.Thread(
        target=guarded(lambda: run_fetcher(FetcherSpec.normal(1), log, d, stop, poll=0.01)),
        name="main-fetcher", daemon=True))
    for th in threads:
        th.start()

    workload = make_workload(cfg)
    expected = {t: 0 for t in ids}
    for tids, _ in workload:
        for t in tids:
            expected[t] += 1
    t0 = time.perf_counter()
    for tids, payloads in workload:
        log.append(tids, payloads)
    deadline = time.monotonic() + timeout
    complete = False
    while time.monotonic() < deadline and not errors:
        if all(len(targets[t].applied) >= expected[t] for t in ids):
            complete = True
            break
        time.sleep(0.005)
    seconds = time.perf_counter() - t0
    stop.set()
    for th in threads:
        th.join(timeout=2)
    if errors:
        raise errors[0]

    records = []
    for e in log.entries:
        for t in sorted(e.target_ids):
            key = (e.index, t)
            if key in apply_times:
                records.append((e.index, t, e.commit_time, d.dispatch_times.get(key), apply_times[key]))
    return BenchResult(cfg, Metrics(records, unit="ns"), seconds, cfg.entries / seconds, complete)
