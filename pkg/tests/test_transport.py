import pytest

from oracles import acks_of_batch, member_indexes
from walreplay.harness.system import DeliveryOracle, Violation
from walreplay.log import LogService, Message
from walreplay.target_queue import Batch
from walreplay.transport import (CompletionQueue, CompletionTag, ContractViolation,
                                 DeliveryViolation, SimTarget, SimTransport, TagKind,
                                 TargetUnavailable, TransportMode)


def batch(*indexes, dummy=()):
    return Batch([Message(i, b"", i in dummy) for i in indexes])


def transport(mode=TransportMode.FAIL, persisted=0):
    return SimTransport({1: SimTarget(1, persisted)}, mode)


def wtag(tr, kind=TagKind.WRITE):
    return CompletionTag(1, kind, tr.epoch(1))


def test_tag_encodes_to_one_integer():
    tag = CompletionTag(17, TagKind.READ, epoch=3)
    v = tag.encode()
    assert isinstance(v, int)
    assert CompletionTag.decode(v) == tag


def test_write_to_live_target_surfaces_tag_then_delivers():
    tr = transport()
    tr.write(1, batch(1), wtag(tr))
    tag = tr.next()
    assert (tag.target_id, tag.kind, tag.ok) == (1, TagKind.WRITE, True)
    assert tr.targets[1].persisted_index == 0  # not yet arrived
    tr.deliver(1)
    assert [i for i, _ in tr.targets[1].applied] == [1]


def test_write_then_crash_before_delivery_never_applies():
    tr = transport()
    tr.write(1, batch(1), wtag(tr))
    tr.crash(1)
    assert not tr.can_deliver(1)
    tr.end_epoch(1)
    tr.reconnect(1)
    assert not tr.can_deliver(1)
    assert tr.targets[1].applied == []


def test_write_on_broken_stream_surfaces_failure_in_fail_mode():
    tr = transport()
    tr.crash(1)
    tr.write(1, batch(1), wtag(tr))
    tag = tr.next()
    assert not tag.ok and tr.failed_tags == 1


def test_second_outstanding_write_is_a_contract_violation():
    tr = transport()
    tr.write(1, batch(1), wtag(tr))
    with pytest.raises(ContractViolation):
        tr.write(1, batch(2), wtag(tr))


def test_second_outstanding_read_is_a_contract_violation():
    tr = transport()
    tr.read(1, object(), wtag(tr, TagKind.READ))
    with pytest.raises(ContractViolation):
        tr.read(1, object(), wtag(tr, TagKind.READ))


class Slot:
    pending_response = None


def test_read_returns_next_ack():
    tr = transport(persisted=4)
    slot = Slot()
    tr.read(1, slot, wtag(tr, TagKind.READ))
    tr.write(1, batch(5), wtag(tr))
    tr.deliver(1)
    assert tr.can_complete_read(1)
    tr.complete_read(1)
    assert slot.pending_response.index == 5
    kinds = [tr.next().kind for _ in range(2)]
    assert kinds == [TagKind.WRITE, TagKind.READ]


def test_read_with_ack_already_queued_completes_next_step():
    tr = transport()
    tr.write(1, batch(1), wtag(tr))
    tr.deliver(1)
    slot = Slot()
    tr.read(1, slot, wtag(tr, TagKind.READ))
    assert tr.can_complete_read(1)


def test_epoch_end_while_read_armed_fails_the_read():
    tr = transport()
    tr.read(1, Slot(), wtag(tr, TagKind.READ))
    tr.end_epoch(1)
    tag = tr.next()
    assert tag.kind is TagKind.READ and not tag.ok


def test_flush_mode_clears_pending_tags():
    tr = transport(TransportMode.FLUSH)
    tr.write(1, batch(1), wtag(tr))
    tr.read(1, Slot(), wtag(tr, TagKind.READ))
    tr.crash(1)
    tr.end_epoch(1)
    assert tr.next() is None and tr.flushed_tags == 1


def test_consume_acks_once_per_sequence():
    t = SimTarget(1, persisted_index=4, ack_batching=4)
    acks = t.consume(batch(5, 6))
    assert t.persisted_index == 6
    assert [a.index for a in acks] == [6]


def test_default_acks_every_message():
    t = SimTarget(1, persisted_index=4)
    assert [a.index for a in t.consume(batch(5, 6))] == [5, 6]


@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_ack_batching(k):
    t = SimTarget(1, ack_batching=k)
    idx = list(range(1, 8))
    acks = t.consume(batch(*idx))
    assert [a.index for a in acks] == acks_of_batch(idx, k)


def test_duplicate_is_a_delivery_violation():
    t = SimTarget(1, persisted_index=4)
    with pytest.raises(DeliveryViolation):
        t.consume(batch(4))


def test_gap_is_caught_by_the_log_oracle():
    log = LogService()
    for _ in range(6):
        log.append({1})
    oracle = DeliveryOracle([1])
    for e in log.entries:
        oracle.observe_append(e)
    t = SimTarget(1, persisted_index=4)
    assert oracle.next_expected(1, 4) == member_indexes([{1}] * 6, 1)[4] == 5
    with pytest.raises(Violation) as err:
        t.consume(batch(6), check=oracle.check)
    assert err.value.prop == "skipped-entry"


def test_gap_over_a_foreign_entry_is_fine():
    log = LogService()
    log.append({1})
    log.append({2})
    log.append({1})
    oracle = DeliveryOracle([1, 2])
    for e in log.entries:
        oracle.observe_append(e)
    t = SimTarget(1, persisted_index=1)
    t.consume(batch(3), check=oracle.check)
    assert t.persisted_index == 3


def test_get_last_ack_fresh_target():
    assert SimTarget(1).get_last_ack() == 0


def test_get_last_ack_survives_crash():
    t = SimTarget(1)
    t.consume(batch(*range(1, 10)))
    t.crash()
    with pytest.raises(TargetUnavailable):
        t.get_last_ack()
    t.restart()
    assert t.get_last_ack() == 9
    assert [i for i, _ in t.applied] == list(range(1, 10))


def test_get_last_ack_after_dummy():
    t = SimTarget(1, persisted_index=3)
    t.consume(batch(12, dummy={12}))
    assert t.get_last_ack() == 12
    assert t.applied == []


def test_completion_queue_fifo_and_flush():
    cq = CompletionQueue()
    tags = [CompletionTag(1, TagKind.WRITE, 1), CompletionTag(2, TagKind.READ, 1),
            CompletionTag(1, TagKind.READ, 1)]
    for t in tags:
        cq.put(t)
    assert cq.flush(1, 1) == 2
    assert cq.next() == tags[1] and cq.next() is None


def test_reconnect_opens_new_epoch():
    tr = transport()
    tr.write(1, batch(1), wtag(tr))
    tr.deliver(1)
    tr.crash(1)
    tr.end_epoch(1)
    e = tr.reconnect(1)
    assert e == 2 and tr.targets[1].epoch == 2
    assert not tr.channels[1].acks  # the old epoch's ack stays behind
