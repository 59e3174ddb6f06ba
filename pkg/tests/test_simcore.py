import pytest

from trigsim.simcore import (
    Delay,
    Engine,
    EngineStatus,
    Fabric,
    MemoryRegion,
    MemorySpace,
    OutOfBounds,
    PastTime,
    Process,
    WaitFor,
    ms,
    seconds,
    us,
)


def test_first_event_gets_id_zero_and_clock_stays():
    eng = Engine()
    assert eng.at(0, "doorbell") == 0
    assert eng.now == 0
    assert eng.pending == 1


def test_fifo_tie_break():
    eng = Engine()
    seen = []
    eng.at(5, "a", lambda ev: seen.append("A"))
    eng.at(5, "b", lambda ev: seen.append("B"))
    assert eng.run_until() is EngineStatus.IDLE
    assert seen == ["A", "B"]


def test_past_time_rejected():
    eng = Engine()
    eng.at(10, "x")
    eng.run_until()
    with pytest.raises(PastTime):
        eng.at(3, "late")


def test_cancelled_event_is_skipped():
    eng = Engine()
    seen = []
    eid = eng.at(1, "x", lambda ev: seen.append(1))
    assert eng.cancel(eid)
    assert not eng.cancel(eid)
    eng.run_until()
    assert seen == [] and eng.processed == 0


def test_unit_conversion_is_exact():
    assert us(25.2) == 25_200
    assert us(0.11) == 110
    assert ms(10.6) == 10_600_000
    assert seconds(1) == 10 ** 9


def test_blocked_waiter_deadlocks():
    eng = Engine()
    flag = MemoryRegion(0, MemorySpace.DEVICE, 8)

    def waiter():
        yield WaitFor(lambda: flag.read_u64(0) == 1, [flag])

    p = Process(eng, "w", waiter())
    p.start()
    assert eng.run_until() is EngineStatus.DEADLOCK
    assert eng.blocked() == [p]


def test_poll_ticks_hit_limit():
    eng = Engine()
    count = []
    for i in range(1, 1001):
        eng.at(us(i), "tick", lambda ev: count.append(1))
    assert eng.run_until(us(500)) is EngineStatus.LIMIT_REACHED
    assert eng.now == us(500)
    # ticks at 1..500 us are processed, the rest are not
    assert len(count) == 500


def test_rdma_write_arrives_after_latency():
    eng = Engine()
    fab = Fabric(eng, wire_latency=us(2))
    src = MemoryRegion(0, MemorySpace.DEVICE, 8)
    dst = MemoryRegion(1, MemorySpace.DEVICE, 8)
    src.write_u64(0, 42)
    seen = []

    def issue(_ev):
        fab.rdma_write(fab.connection(0, 1), src.slice(0, 8), dst.slice(0, 8), lambda: seen.append(eng.now))

    eng.at(us(10), "issue", issue)
    eng.run_until()
    assert seen == [us(12)]
    assert dst.read_u64(0) == 42


def test_body_before_sequence_on_one_connection():
    eng = Engine(trace=True)
    fab = Fabric(eng, wire_latency=500)
    dst = MemoryRegion(1, MemorySpace.DEVICE, 16)
    observed = []

    def check(_):
        # when the sequence word lands the body must already be there
        observed.append((dst.read_u64(0), dst.read_u64(8)))

    conn = fab.connection(0, 1)
    fab.rdma_write(conn, (7).to_bytes(8, "little"), dst.slice(0, 8))
    fab.rdma_write(conn, (1).to_bytes(8, "little"), dst.slice(8, 8), lambda: check(None))
    eng.run_until()
    assert observed == [(7, 1)]


def test_zero_length_write_changes_nothing():
    eng = Engine()
    fab = Fabric(eng, 100)
    dst = MemoryRegion(1, MemorySpace.DEVICE, 8)
    dst.write_u64(0, 99)
    ev = fab.rdma_write(fab.connection(0, 1), b"", dst.slice(0, 0))
    eng.run_until()
    assert ev.time == 100 and dst.read_u64(0) == 99


def test_length_mismatch_and_bounds():
    eng = Engine()
    fab = Fabric(eng, 100)
    dst = MemoryRegion(1, MemorySpace.DEVICE, 8)
    with pytest.raises(OutOfBounds):
        fab.rdma_write(fab.connection(0, 1), b"\0" * 4, dst.slice(0, 8))
    with pytest.raises(OutOfBounds):
        dst.slice(4, 8)


def test_jitter_is_seeded_per_connection():
    a = Fabric(Engine(), 1000, jitter=500, seed=3)
    b = Fabric(Engine(), 1000, jitter=500, seed=3)
    lat_a = [a.connection(s, d).wire_latency for s in range(4) for d in range(4)]
    lat_b = [b.connection(s, d).wire_latency for s in range(4) for d in range(4)]
    assert lat_a == lat_b
    assert all(1000 <= x <= 1500 for x in lat_a)
    assert len(set(lat_a)) > 1


def test_delay_process_resumes_on_time():
    eng = Engine()
    stamps = []

    def body():
        yield Delay(30)
        stamps.append(eng.now)
        yield Delay(0)
        stamps.append(eng.now)

    p = Process(eng, "p", body())
    p.start(5)
    assert eng.run_until() is EngineStatus.IDLE
    assert stamps == [35, 35] and p.finished_at == 35
