from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from oracles import acks_of_batch, batch_from_rules, nearest_rank as np_nearest_rank
from walreplay.harness.fuzz import random_scenario, run_case
from walreplay.harness.metrics import nearest_rank
from walreplay.harness.scenario import (NONDET, FaultEvent, FaultKind, FaultSchedule, Scenario,
                                        Workload, parse_scenario)
from walreplay.harness.sim import run_scenario
from walreplay.log import Message
from walreplay.target_queue import Batch, QueueState, TargetQueue, null_lock
from walreplay.transport import CompletionTag, SimTarget, TagKind

slow = settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])

OPS = st.lists(st.one_of(
    st.just(("normal",)),
    st.tuples(st.just("catchup"), st.integers(-1, 0)),
    st.just(("suspend",)),
    st.tuples(st.just("up"), st.booleans()),
    st.tuples(st.just("fc"), st.integers(-1, 0)),
    st.tuples(st.just("batch"), st.integers(1, 5)),
    st.just(("ack",)),
), max_size=60)


@settings(max_examples=300, deadline=None)
@given(OPS)
def test_queue_operation_sequences(ops):
    q = TargetQueue(1, lock_factory=null_lock)
    nxt = 1
    sent: set = set()
    prev_term = q.current_term
    for op in ops:
        name = op[0]
        if name == "normal":
            q.push(Message(nxt), True)
            nxt += 1
        elif name == "catchup":
            # a live recovery fetcher only exists while its queue is in RF;
            # older fetchers can push in any state
            if op[1] == 0 and q.state is not QueueState.RF:
                continue
            q.push(Message(nxt), False, q.current_term + op[1])
            nxt += 1
        elif name == "suspend":
            q.suspend()
        elif name == "up" and q.state is QueueState.S:
            q.restart()
            if op[1]:
                q.mark_caught_up()
        elif name == "fc":
            q.fetching_completed(q.current_term + op[1])
        elif name == "batch":
            want = batch_from_rules(q.state.value, [m.index for m in q.catchup],
                                    [m.index for m in q.normal], op[1])
            b = q.next_batch(op[1])
            got = (b.indexes, q.state.value, [m.index for m in q.catchup], [m.index for m in q.normal])
            assert got == want
            assert not sent & set(b.indexes)
            sent |= set(b.indexes)
            q.pop_batch()
        elif name == "ack" and q.popped:
            q.erase(next(iter(q.popped)))
        # state invariants, after every operation
        assert q.current_term >= prev_term
        prev_term = q.current_term
        if q.state is QueueState.S:
            assert not q.normal and not q.catchup and not q.popped
        if q.catchup:
            assert q.state in (QueueState.RF, QueueState.FC)
        assert list(q.popped) == sorted(q.popped)
    for old, new in q.transitions:
        assert (QueueState(old), QueueState(new)) in {
            (QueueState.N, QueueState.S), (QueueState.RF, QueueState.S), (QueueState.FC, QueueState.S),
            (QueueState.S, QueueState.RF), (QueueState.S, QueueState.N), (QueueState.RF, QueueState.FC),
            (QueueState.RF, QueueState.N), (QueueState.FC, QueueState.N)}


@given(st.integers(0, 2**31 - 1), st.sampled_from(list(TagKind)), st.integers(0, 2**20))
def test_tag_round_trip(tid, kind, epoch):
    tag = CompletionTag(tid, kind, epoch)
    assert CompletionTag.decode(tag.encode()) == tag


@given(st.lists(st.integers(-10**6, 10**6), min_size=1, max_size=200), st.integers(0, 100))
def test_nearest_rank_property(values, p):
    assert nearest_rank(sorted(values), p) == np_nearest_rank(values, p)


@given(st.integers(0, 20), st.integers(1, 30), st.integers(1, 6))
def test_consume_acks(persisted, n, k):
    t = SimTarget(1, persisted_index=persisted, ack_batching=k)
    idx = list(range(persisted + 1, persisted + n + 1))
    acks = t.consume(Batch([Message(i) for i in idx]))
    assert [a.index for a in acks] == acks_of_batch(idx, k)
    assert t.persisted_index == idx[-1]
    assert [i for i, _ in t.applied] == idx


@st.composite
def scenarios(draw):
    n = draw(st.integers(1, 4))
    events = []
    for t in draw(st.lists(st.integers(1, n), max_size=3)):
        at = draw(st.one_of(st.just(NONDET), st.integers(0, 200)))
        events += [FaultEvent(at, FaultKind.TARGET_DOWN, t), FaultEvent(NONDET, FaultKind.TARGET_UP, t)]
    if draw(st.booleans()):
        events.append(FaultEvent(draw(st.integers(0, 200)), FaultKind.REPLAYER_RESTART))
    return Scenario(name="gen", targets=n,
                    max_batch_size=draw(st.sampled_from([1, 4, 16])),
                    ack_batching=draw(st.sampled_from([1, 4])),
                    dummy_interval=draw(st.sampled_from([None, 1, 5, 10])),
                    mode=draw(st.sampled_from(["fail", "flush"])),
                    workload=Workload(entries=draw(st.integers(0, 30)),
                                      membership=draw(st.sampled_from(["all", "random"]))),
                    schedule=FaultSchedule(tuple(events)))


@settings(max_examples=200, deadline=None)
@given(scenarios())
def test_scenario_text_round_trip(sc):
    assert parse_scenario(sc.to_text()).with_(name="gen") == sc


@slow
@given(scenarios(), st.integers(0, 1000))
def test_random_scenarios_hold_and_repeat(sc, seed):
    sc.schedule.validate(sc.target_ids)  # each down is followed by its up
    a = run_scenario(sc, seed=seed)
    assert a.ok, a.verdict()
    assert run_scenario(sc, seed=seed).trace == a.trace


@slow
@given(st.integers(0, 2**63 - 1))
def test_fuzz_cases_hold(case):
    r = run_case(case)
    assert r.ok, (case, r.verdict())
    assert random_scenario(case) == random_scenario(case)
