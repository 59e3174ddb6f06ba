import pytest

from trigsim.cluster import Cluster, RegionSpec, SimConfig
from trigsim.device import Addr, BarrierAll, Cmp, Compute, Quiet, Trigger, WaitUntil, Write
from trigsim.oracles import capability_confinement
from trigsim.simcore import MemorySpace
from trigsim.workloads import barrier_programs

from conftest import triggered_put_cluster


@pytest.mark.parametrize("cmp,obs,val,want", [
    (Cmp.EQ, 3, 3, True), (Cmp.NE, 3, 3, False), (Cmp.GT, 4, 3, True),
    (Cmp.GE, 3, 3, True), (Cmp.LT, 2, 3, True), (Cmp.LE, 4, 3, False),
])
def test_cmp(cmp, obs, val, want):
    assert cmp.holds(obs, val) is want


def test_trigger_overlaps_compute():
    c = triggered_put_cluster({0: [Write(Addr("src"), 1), Trigger("c0", 1), Compute(50_000)]})
    res = c.run()
    assert res.ok
    delivery = res.trace.of_kind("wire-delivery")[0].time
    # the actor is still computing when the put lands
    assert delivery < res.cluster.actors[0].process.finished_at


def test_wait_resumes_at_delivery():
    c = triggered_put_cluster({0: [Write(Addr("src"), 1), Trigger("c0", 1)],
                               1: [WaitUntil(Addr("flag"), Cmp.GE, 1)]})
    res = c.run()
    assert res.ok
    delivery = res.trace.of_kind("wire-delivery")[0].time
    assert res.cluster.actors[1].process.finished_at == delivery


def test_wait_already_satisfied_is_immediate():
    cfg = SimConfig(ranks=1)
    res = Cluster(cfg, {0: [Write(Addr("f"), 5), WaitUntil(Addr("f"), Cmp.EQ, 5)]}).run()
    assert res.ok and res.end_time == 0


def test_broadcast_wake():
    cfg = SimConfig(ranks=2, trace=True)
    regions = [RegionSpec("f")]
    progs = {0: [WaitUntil(Addr("f"), Cmp.GE, 1)]}
    cl = Cluster(cfg, progs, regions=regions)
    # a second local actor waiting on the same word
    from trigsim.device import DeviceActor
    extra = DeviceActor(cl.engine, 0, [WaitUntil(Addr("f"), Cmp.GE, 1)], cl.ports[0])
    cl.engine.at(700, "poke", lambda ev: cl.ports[0].regions["f"].write_u64(0, 1))
    res = cl.run()
    assert res.ok
    assert cl.actors[0].process.finished_at == extra.process.finished_at == 700


def test_polled_wait_lands_on_grid():
    c = triggered_put_cluster({0: [Write(Addr("src"), 1), Trigger("c0", 1)],
                               1: [WaitUntil(Addr("flag"), Cmp.GE, 1)]},
                              wait_mode="polled", device_poll_interval_ns=250)
    res = c.run()
    delivery = res.trace.of_kind("wire-delivery")[0].time
    end = res.cluster.actors[1].process.finished_at
    assert end >= delivery and end % 250 == 0 and end - delivery < 250


def test_quiet_waits_for_both_puts():
    cfg = SimConfig(ranks=2, trace=True)
    from trigsim.cluster import PrestageSpec
    pre = [PrestageSpec(0, "c0", 1, 1, ("src", 0), ("flag", 0), 8),
           PrestageSpec(0, "c0", 2, 1, ("src", 8), ("flag", 8), 8)]
    res = Cluster(cfg, {0: [Trigger("c0", 2), Quiet()]}, prestage=pre).run()
    assert res.ok
    last = max(r.time for r in res.trace.of_kind("completion-writeback"))
    assert res.cluster.actors[0].process.finished_at == last


def test_quiet_with_nothing_outstanding():
    res = Cluster(SimConfig(ranks=1), {0: [Quiet()]}).run()
    assert res.ok and res.end_time == 0


def test_compute_zero():
    res = Cluster(SimConfig(ranks=1), {0: [Compute(0), Compute(0)]}).run()
    assert res.end_time == 0


def test_host_memory_is_not_pollable():
    regions = [RegionSpec("h", MemorySpace.HOST, 64)]
    res = Cluster(SimConfig(ranks=1), {0: [WaitUntil(Addr("h"), Cmp.EQ, 0)]}, regions=regions).run()
    assert "DeviceAccessError" in res.reason


def test_device_never_queues_work():
    cfg = SimConfig(ranks=4, trace=True)
    res = Cluster(cfg, barrier_programs(4, 10, seed=2)).run()
    assert res.ok
    assert res.trace.of_kind("queue_work")
    assert capability_confinement(res.trace) == []


def test_fault_halts_only_that_rank():
    progs = {0: [Trigger("c0", 5000)], 1: [Compute(10)]}
    res = Cluster(SimConfig(ranks=2), progs).run()
    assert len(res.faults) == 1
    assert res.cluster.actors[1].state == "done"


def test_barrier_p1_is_a_no_op():
    res = Cluster(SimConfig(ranks=1), {0: [BarrierAll(), BarrierAll()]}).run()
    assert res.ok and res.end_time == 0
