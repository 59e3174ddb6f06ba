import pytest

from trigsim.cluster import Cluster, SimConfig
from trigsim.coordination import (
    AmLayout,
    ArgsTooLarge,
    DisseminationSchedule,
    Mailbox,
    MailboxFull,
    barrier_round_targets,
    decode_body,
    encode_body,
)
from trigsim.device import AmPollDispatch, AmRecv, AmSend, BarrierAll, Compute
from trigsim.oracles import barrier_safety
from trigsim.simcore import ms


def covers_all(p):
    """Brute-force oracle: after R rounds every rank has (transitively) heard from every rank."""
    sched = DisseminationSchedule(p)
    known = [{r} for r in range(p)]
    for rnd in range(sched.rounds):
        new = [set(k) for k in known]
        for r in range(p):
            to, _ = sched.targets(r, rnd)
            new[to] |= known[r]
        known = new
    return all(len(k) == p for k in known)


def test_round_targets_example():
    assert barrier_round_targets(8, 0, 0) == (1, 7)


@pytest.mark.parametrize("p", [2, 3, 5, 6, 7, 8, 12, 17, 64, 100])
def test_schedule_covers_all(p):
    assert covers_all(p)


def test_round_counts():
    assert DisseminationSchedule(64).rounds == 6
    assert DisseminationSchedule(1).rounds == 0
    with pytest.raises(ValueError):
        barrier_round_targets(1, 0, 0)


def test_send_and_wait_are_inverse():
    for p in (5, 8):
        for r in range(DisseminationSchedule(p).rounds):
            for rank in range(p):
                to, _ = barrier_round_targets(p, rank, r)
                assert barrier_round_targets(p, to, r)[1] == rank


@pytest.mark.parametrize("backend", ["ofi", "ib"])
def test_p4_barrier_signal_count(backend):
    cfg = SimConfig(backend=backend, ranks=4, trace=True)
    res = Cluster(cfg, {r: [BarrierAll()] for r in range(4)}).run()
    assert res.ok
    writes = [r for r in res.trace.of_kind("wire-delivery") if ".sig" in r.data["addr"] or "sig+" in r.data["addr"]]
    rounds = res.trace.of_kind("barrier-round")
    assert len(rounds) == 2 * 4
    assert len(writes) == 2 * 4


def test_delayed_rank_bounds_exit():
    cfg = SimConfig(ranks=4, trace=True)
    progs = {r: [BarrierAll()] for r in range(4)}
    progs[2] = [Compute(ms(1)), BarrierAll()]
    res = Cluster(cfg, progs).run()
    assert res.ok
    assert all(exit_ >= ms(1) for a in res.cluster.actors for _, _, exit_ in a.barriers)
    assert barrier_safety(res.trace) == []


def test_p2_single_exchange():
    cfg = SimConfig(ranks=2, trace=True)
    res = Cluster(cfg, {0: [BarrierAll()], 1: [BarrierAll()]}).run()
    assert len(res.trace.of_kind("barrier-round")) == 2


def test_body_codec_roundtrip():
    lay = AmLayout()
    body = encode_body(lay, 7, 3, (1, 2, 2 ** 63))
    assert len(body) == lay.body_bytes == 120
    assert decode_body(lay, body) == (7, 3, (1, 2, 2 ** 63))
    with pytest.raises(ArgsTooLarge):
        encode_body(lay, 1, 0, tuple(range(15)))


def test_default_slot_is_128_bytes():
    assert AmLayout().slot_bytes == 128


def test_mailbox_full_check():
    mb = Mailbox(1, 2, AmLayout(ring_slots=4))
    mb.check_send(0, 4)
    with pytest.raises(MailboxFull):
        mb.check_send(0, 5)


@pytest.mark.parametrize("backend", ["ofi", "ib"])
def test_burst_beyond_ring_faults(backend):
    layout = AmLayout(ring_slots=4)
    cfg = SimConfig(backend=backend, ranks=2, am_layout=layout)
    progs = {0: [AmSend(1, 1, ())] * 5}
    res = Cluster(cfg, progs, {1: []}).run()
    assert not res.ok and "MailboxFull" in res.reason


@pytest.mark.parametrize("backend", ["ofi", "ib"])
def test_first_message_and_handler_cost(backend):
    cfg = SimConfig(backend=backend, ranks=2, trace=True)
    progs = {0: [AmSend(1, 1, (9,))], 1: [AmRecv(1)]}
    res = Cluster(cfg, progs, {1: [Compute(5000)]}).run()
    assert res.ok
    d = res.trace.of_kind("am-dispatch")[0]
    assert d.data["seq"] == 1 and d.data["args"] == [9]
    assert res.cluster.actors[1].process.finished_at == d.time + 5000


def test_poll_with_nothing_dispatches_zero():
    cfg = SimConfig(ranks=2)
    res = Cluster(cfg, {0: [AmPollDispatch()]}).run()
    assert res.ok and res.cluster.actors[0].last_dispatch == 0


@pytest.mark.parametrize("backend", ["ofi", "ib"])
def test_two_senders_fifo(backend):
    cfg = SimConfig(backend=backend, ranks=3, trace=True)
    progs = {0: [AmSend(2, 1, (i,)) for i in range(5)], 1: [AmSend(2, 1, (10 + i,)) for i in range(5)],
             2: [AmRecv(10)]}
    res = Cluster(cfg, progs, {1: []}).run()
    assert res.ok
    by_src = {}
    for rec in res.trace.of_kind("am-dispatch"):
        by_src.setdefault(rec.data["src"], []).append(rec.data["args"][0])
    assert by_src == {0: [0, 1, 2, 3, 4], 1: [10, 11, 12, 13, 14]}
