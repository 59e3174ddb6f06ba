"""Each oracle must flag a hand-built bad trace, otherwise a clean result means nothing."""

from trigsim.oracles import (
    am_body_delivered,
    am_integrity,
    barrier_safety,
    capability_confinement,
    connection_order,
    flag_projection,
    handoff_safety,
    no_host_activity,
)
from trigsim.simcore import Trace


def trace(*records):
    t = Trace()
    for time, kind, data in records:
        t.add(time, kind, data)
    return t


def test_barrier_exit_before_last_enter():
    bad = trace((0, "barrier-enter", {"rank": 0, "epoch": 1}), (1, "barrier-exit", {"rank": 0, "epoch": 1}),
                (2, "barrier-enter", {"rank": 1, "epoch": 1}), (3, "barrier-exit", {"rank": 1, "epoch": 1}))
    assert barrier_safety(bad)
    good = trace((0, "barrier-enter", {"rank": 0, "epoch": 1}), (0, "barrier-enter", {"rank": 1, "epoch": 1}),
                 (1, "barrier-exit", {"rank": 0, "epoch": 1}), (1, "barrier-exit", {"rank": 1, "epoch": 1}))
    assert barrier_safety(good) == []


def test_trigger_before_readiness():
    key = {"rank": 0, "stream": "barrier0", "slot": 0}
    bad = trace((0, "readiness-write", dict(key, value=1)), (5, "trigger", dict(key, epoch=3, value=1)))
    assert handoff_safety(bad)
    good = trace((0, "readiness-write", dict(key, value=3)), (5, "trigger", dict(key, epoch=3, value=1)))
    assert handoff_safety(good) == []


def test_connection_reorder():
    d = {"src": 0, "dst": 1, "addr": "1:x+0", "len": 8, "tag": "", "value": 0}
    assert connection_order(trace((1, "wire-delivery", dict(d, n=2)), (2, "wire-delivery", dict(d, n=1))))


def test_am_mismatch_and_missing_body():
    sent = (0, "am-send", {"rank": 0, "dst": 1, "seq": 1, "handler": 2, "args": [5]})
    got = (9, "am-dispatch", {"rank": 1, "src": 0, "seq": 1, "handler": 2, "args": [6]})
    assert am_integrity(trace(sent, got))
    assert am_body_delivered(trace(sent, got))
    body = (5, "wire-delivery", {"src": 0, "dst": 1, "n": 1, "addr": "1:mailbox+8", "len": 120, "tag": "am",
                                 "value": 0})
    ok = (9, "am-dispatch", {"rank": 1, "src": 0, "seq": 1, "handler": 2, "args": [5]})
    assert am_integrity(trace(sent, body, ok)) == []
    assert am_body_delivered(trace(sent, body, ok)) == []


def test_device_originated_work_flagged():
    assert capability_confinement(trace((0, "queue_work", {"origin": "device0"})))
    assert no_host_activity(trace((0, "host-poll-tick", {})))


def test_flag_projection_keeps_order():
    d = {"src": 0, "dst": 1, "n": 1, "len": 8, "tag": ""}
    t = trace((1, "wire-delivery", dict(d, addr="1:b.sig+0", value=2)),
              (2, "wire-delivery", dict(d, addr="1:b.sig+0", value=1)),
              (3, "wire-delivery", dict(d, addr="1:other+0", value=7)))
    assert flag_projection(t) == {"1:b.sig+0": [2, 1]}
