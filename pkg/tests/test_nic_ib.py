import pytest

from trigsim.cluster import Cluster, RegionSpec, SimConfig
from trigsim.device import Addr, IbPut, Quiet, WaitUntil, Cmp, Trigger
from trigsim.nic_ib import CqOverrun, IbNic, IbParams, NotOwner
from trigsim.oracles import no_host_activity
from trigsim.simcore import Engine, EngineStatus, Fabric, MemoryRegion, MemorySpace
from trigsim.workloads import barrier_programs, pingpong_programs


def make(cq=256, wire=1000):
    eng = Engine()
    nic = IbNic(eng, Fabric(eng, wire), 0, IbParams(cq_size=cq))
    dst = MemoryRegion(1, MemorySpace.DEVICE, 64)
    return eng, nic, dst


def test_non_owner_rejected():
    eng, nic, dst = make()
    qp = nic.create_qp("device0", 1)
    with pytest.raises(NotOwner):
        nic.device_post_write(qp, "device9", b"\0" * 8, dst.slice(0, 8))
    with pytest.raises(NotOwner):
        nic.cq_poll(qp, "host")


def test_signaled_and_unsignaled():
    eng, nic, dst = make()
    qp = nic.create_qp("device0", 1)
    assert nic.cq_poll(qp, "device0") == []
    nic.device_post_write(qp, "device0", (5).to_bytes(8, "little"), dst.slice(0, 8), signaled=False)
    nic.device_post_write(qp, "device0", (6).to_bytes(8, "little"), dst.slice(8, 8))
    eng.run_until()
    assert dst.read_u64(0) == 5 and dst.read_u64(8) == 6
    got = nic.cq_poll(qp, "device0")
    assert [c.wqe_index for c in got] == [1]


def test_cq_wraparound_each_seen_once():
    eng, nic, dst = make(cq=4)
    qp = nic.create_qp("device0", 1)
    seen = []
    for batch in range(2):
        for i in range(3):
            nic.device_post_write(qp, "device0", b"\1" * 8, dst.slice(8 * i, 8))
        eng.run_until()
        seen += [c.wqe_index for c in nic.cq_poll(qp, "device0")]
    assert seen == list(range(6))
    assert nic.cq_poll(qp, "device0") == []


def test_cq_overrun_is_a_fault():
    eng, nic, dst = make(cq=2)
    qp = nic.create_qp("device0", 1)
    for i in range(3):
        nic.device_post_write(qp, "device0", b"\1" * 8, dst.slice(0, 8))
    eng.run_until()
    assert any(isinstance(f[2], CqOverrun) for f in eng.faults)


def test_put_latency_is_sum_of_parts():
    ib = IbParams(wqe_build_latency_ns=300, doorbell_latency_ns=100)
    cfg = SimConfig(backend="ib", ranks=2, wire_latency_ns=1000, ib=ib, trace=True)
    regions = [RegionSpec("buf", MemorySpace.DEVICE, 64)]
    progs = {0: [IbPut(1, Addr("buf"), Addr("buf", 8), 8)]}
    res = Cluster(cfg, progs, regions=regions).run()
    assert res.ok
    delivery = res.trace.of_kind("wire-delivery")[0]
    assert delivery.time == 300 + 100 + 1000


def test_quiet_after_three_posts():
    cfg = SimConfig(backend="ib", ranks=2, wire_latency_ns=1000, trace=True)
    progs = {0: [IbPut(1, Addr("buf"), Addr("buf", 8 * i), 8) for i in range(3)] + [Quiet()]}
    res = Cluster(cfg, progs, regions=[RegionSpec("buf")]).run()
    last = max(r.time for r in res.trace.of_kind("wire-delivery"))
    assert res.cluster.actors[0].process.finished_at == last


def test_trigger_on_ib_is_a_fault():
    cfg = SimConfig(backend="ib", ranks=1)
    res = Cluster(cfg, {0: [Trigger("c0", 1)]}).run()
    assert not res.ok and "BackendMismatch" in res.reason


def test_pingpong_closed_form():
    ib = IbParams(wqe_build_latency_ns=300, doorbell_latency_ns=100)
    wire = 1000
    cfg = SimConfig(backend="ib", ranks=2, wire_latency_ns=wire, ib=ib, trace=True)
    progs, handlers = pingpong_programs(1)
    res = Cluster(cfg, progs, handlers).run()
    assert res.ok
    # body and seq posts each cost a WQE build on the device; one way = 2*wqe + doorbell + wire
    one_way = 2 * 300 + 100 + wire
    sends = res.trace.of_kind("am-send")
    dispatches = res.trace.of_kind("am-dispatch")
    assert dispatches[0].time - sends[0].time == one_way


def test_no_host_events_on_ib():
    cfg = SimConfig(backend="ib", ranks=4, trace=True)
    res = Cluster(cfg, barrier_programs(4, 5, seed=1)).run()
    assert res.ok
    assert no_host_activity(res.trace) == []


def test_in_qp_completion_order():
    eng, nic, dst = make()
    qp = nic.create_qp("device0", 1)
    for i in range(8):
        nic.device_post_write(qp, "device0", b"\1" * 8, dst.slice(0, 8))
    eng.run_until()
    assert qp.completion_order == list(range(8))
