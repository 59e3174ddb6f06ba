import pytest

from trigsim.nic_cxi import (
    CounterOverflow,
    CxiNic,
    DeferredWorkEntry,
    DwqFull,
    EntryState,
    InvalidEntryState,
    InvalidRankCount,
    NicParams,
    NonMonotoneWrite,
    NotProgressedYet,
    Put,
    ThresholdOverflow,
    Writeback,
    dissemination_round_count,
    max_prestaged_barriers,
)
from trigsim.simcore import Engine, Fabric, MemoryRegion, MemorySpace, seconds


def put(src, dst, i=0, size=8):
    return Put(src.slice(i * size, size), dst.slice(i * size, size), 1)


def test_two_thresholds_armed(nic_pair):
    nic, src, dst = nic_pair
    c = nic.alloc_counter(0)
    nic.queue_work(DeferredWorkEntry(c.id, 1, put(src, dst, 0)))
    nic.queue_work(DeferredWorkEntry(c.id, 2, put(src, dst, 1)))
    assert len(nic.entries_in(EntryState.ARMED)) == 2


def test_dwq_capacity():
    eng = Engine()
    nic = CxiNic(eng, Fabric(eng, 0), 0, NicParams(dwq_capacity=256, counter_max=2047))
    src = MemoryRegion(0, MemorySpace.DEVICE, 8)
    dst = MemoryRegion(1, MemorySpace.DEVICE, 8)
    c = nic.alloc_counter(0)
    # 2 increments per entry: 256 entries need 512 <= 2047
    for i in range(256):
        nic.queue_work(DeferredWorkEntry(c.id, 1 + i % 100, Put(src.slice(0, 8), dst.slice(0, 8), 1)))
    with pytest.raises(DwqFull):
        nic.queue_work(DeferredWorkEntry(c.id, 1, Put(src.slice(0, 8), dst.slice(0, 8), 1)))


def test_threshold_over_max(nic_pair):
    nic, src, dst = nic_pair
    c = nic.alloc_counter(0)
    with pytest.raises(ThresholdOverflow):
        nic.queue_work(DeferredWorkEntry(c.id, 2048, put(src, dst)))


def test_counter_budget_overflow():
    eng = Engine()
    nic = CxiNic(eng, Fabric(eng, 0), 0, NicParams(dwq_capacity=100, counter_max=10))
    src = MemoryRegion(0, MemorySpace.DEVICE, 8)
    c = nic.alloc_counter(0)
    for _ in range(5):
        nic.queue_work(DeferredWorkEntry(c.id, 1, Put(src.slice(0, 8), src.slice(0, 8), 0)))
    with pytest.raises(CounterOverflow):
        nic.queue_work(DeferredWorkEntry(c.id, 1, Put(src.slice(0, 8), src.slice(0, 8), 0)))


def test_one_doorbell_releases_both(engine, nic_pair):
    nic, src, dst = nic_pair
    c = nic.alloc_counter(0)
    nic.queue_work(DeferredWorkEntry(c.id, 1, put(src, dst, 0)))
    nic.queue_work(DeferredWorkEntry(c.id, 2, put(src, dst, 1)))
    nic.doorbell_write(c.id, 2)
    assert len(nic.entries_in(EntryState.RELEASED)) == 2


def test_identity_doorbell_releases_nothing(nic_pair):
    nic, src, dst = nic_pair
    c = nic.alloc_counter(0)
    nic.queue_work(DeferredWorkEntry(c.id, 1, put(src, dst)))
    nic.doorbell_write(c.id, 0)
    assert nic.released_count == 0


def test_threshold_filter(engine, nic_pair):
    nic, src, dst = nic_pair
    c = nic.alloc_counter(0)
    for t in range(1, 13):
        nic.queue_work(DeferredWorkEntry(c.id, t, put(src, dst, t)))
    nic.doorbell_write(c.id, 6)
    released = sorted(e.threshold for e in nic.entries_in(EntryState.RELEASED))
    armed = sorted(e.threshold for e in nic.entries_in(EntryState.ARMED))
    assert released == [t for t in range(1, 13) if t <= 6]
    assert armed == [t for t in range(1, 13) if t > 6]


def test_release_in_threshold_order(engine, nic_pair):
    nic, src, dst = nic_pair
    c = nic.alloc_counter(0)
    for t in (5, 2, 4, 1, 3):
        nic.queue_work(DeferredWorkEntry(c.id, t, put(src, dst, t)))
    nic.doorbell_write(c.id, 5)
    engine.run_until()
    execs = [r.data["entry"] for r in engine.trace.of_kind("nic-exec")]
    thresholds = [nic.dwq.entries[e].threshold for e in execs]
    assert thresholds == sorted(thresholds)


def test_non_monotone_doorbell(nic_pair):
    nic, src, dst = nic_pair
    c = nic.alloc_counter(0)
    nic.doorbell_write(c.id, 3)
    with pytest.raises(NonMonotoneWrite):
        nic.doorbell_write(c.id, 2)


def test_writeback_flag_after_delivery(engine, nic_pair):
    nic, src, dst = nic_pair
    flag = MemoryRegion(0, MemorySpace.DEVICE, 8, name="flag")
    c = nic.alloc_counter(0)
    nic.queue_work(DeferredWorkEntry(c.id, 1, Put(src.slice(0, 4096), dst.slice(0, 4096), 1),
                                     Writeback(flag.slice(0, 8))))
    nic.doorbell_write(c.id, 1)
    assert flag.read_u64(0) == 0
    engine.run_until()
    assert flag.read_u64(0) == 1
    wb = engine.trace.of_kind("completion-writeback")[0]
    delivery = engine.trace.of_kind("wire-delivery")[0]
    assert wb.time >= delivery.time


def test_no_writeback_only_record(engine, nic_pair):
    nic, src, dst = nic_pair
    c = nic.alloc_counter(0)
    nic.queue_work(DeferredWorkEntry(c.id, 1, put(src, dst)))
    nic.doorbell_write(c.id, 1)
    engine.run_until()
    assert len(nic.host_progress_poll()) == 1


def test_poll_consumes_once(engine, nic_pair):
    nic, src, dst = nic_pair
    c = nic.alloc_counter(0)
    assert nic.host_progress_poll() == []
    for t in (1, 2):
        nic.queue_work(DeferredWorkEntry(c.id, t, put(src, dst, t)))
    nic.doorbell_write(c.id, 2)
    engine.run_until()
    assert len(nic.host_progress_poll()) == 2
    assert nic.host_progress_poll() == []


def test_retire_lifecycle(engine, nic_pair):
    nic, src, dst = nic_pair
    c = nic.alloc_counter(0)
    eid = nic.queue_work(DeferredWorkEntry(c.id, 1, put(src, dst)))
    nic.doorbell_write(c.id, 1)
    engine.run_until()
    # completed but not progressed by the host
    with pytest.raises(NotProgressedYet):
        nic.retire(eid)
    nic.host_progress_poll()
    free_before = nic.dwq.free()
    nic.retire(eid)
    assert nic.dwq.free() == free_before + 1
    with pytest.raises(InvalidEntryState):
        nic.retire(eid)


def test_flush_costs_one_second(engine, nic_pair):
    nic, _, _ = nic_pair
    c = nic.alloc_counter(0)
    assert nic.flush() == seconds(1)
    assert c.value == 0 and nic.flush_count == 1


@pytest.mark.parametrize("ranks,expected", [(64, 42), (256, 32), (1024, 25), (4096, 21), (2, 256)])
def test_max_prestaged(ranks, expected):
    assert max_prestaged_barriers(ranks) == expected


def test_round_count_oracle():
    for p in range(2, 5000, 37):
        # independent oracle: smallest R with 2**R >= p
        r = 0
        while 2 ** r < p:
            r += 1
        assert dissemination_round_count(p) == r
    assert dissemination_round_count(1) == 0
    with pytest.raises(InvalidRankCount):
        dissemination_round_count(0)


def test_interleaved_rounds_conservation(engine, nic_pair):
    nic, src, dst = nic_pair
    counters = [nic.alloc_counter(0) for _ in range(2)]
    for i, c in enumerate(counters):
        for t in range(1, 7):
            nic.queue_work(DeferredWorkEntry(c.id, t, put(src, dst, i * 6 + t)))
    for v in range(1, 7):
        for c in counters:
            nic.doorbell_write(c.id, v)
    engine.run_until()
    polled = nic.host_progress_poll()
    assert len(polled) == nic.released_count == nic.completion_counter == 12
