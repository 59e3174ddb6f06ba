import json

import numpy as np
import pytest

from trigsim.cluster import Cluster, SimConfig
from trigsim.nic_cxi import max_prestaged_barriers
from trigsim.workloads import (
    CostModel,
    exhaustion_study,
    jacobi_weak_scaling,
    metrics_from_run,
    normalized_slowdown,
    phase_benchmark,
    split_compute,
    barrier_programs,
)

COSTS = CostModel()


def test_split_compute_is_exact():
    for n in (1, 3, 7, 200):
        parts = split_compute(10_600_000, n)
        assert len(parts) == n and sum(parts) == 10_600_000
        assert max(parts) - min(parts) <= 1


@pytest.mark.parametrize("mode", ["host_driven", "gpu_triggered"])
def test_fixed_work(mode):
    for n in (1, 10, 50):
        assert phase_benchmark(n, mode, COSTS).compute_ns == COSTS.total_compute


def test_coordination_fraction_n200():
    host = phase_benchmark(200, "host_driven", COSTS)
    # oracle: N*c / (W + N*c)
    want = 200 * 25_200 / (10_600_000 + 200 * 25_200)
    assert host.coordination_fraction == pytest.approx(want, abs=1e-12)
    assert 0.31 <= host.coordination_fraction <= 0.33


def test_latency_ratio():
    host = phase_benchmark(50, "host_driven", COSTS)
    gpu = phase_benchmark(50, "gpu_triggered", COSTS)
    assert host.coord_mean_ns / gpu.coord_mean_ns == pytest.approx(25_200 / 110)


def test_single_phase_modes_close():
    h = phase_benchmark(1, "host_driven", COSTS)
    g = phase_benchmark(1, "gpu_triggered", COSTS)
    assert abs(h.end_time_ns - g.end_time_ns) <= COSTS.host_coord_cost


def test_host_time_affine_in_n():
    ns = [1, 5, 20, 60, 120]
    t = [phase_benchmark(n, "host_driven", COSTS).end_time_ns for n in ns]
    slope, intercept = np.polyfit(ns, t, 1)
    assert np.allclose(np.polyval([slope, intercept], ns), t, rtol=0, atol=1e-6)
    g = [phase_benchmark(n, "gpu_triggered", COSTS).end_time_ns for n in ns]
    gslope = np.polyfit(ns, g, 1)[0]
    assert gslope <= COSTS.gpu_trigger_cost + 1e-9


def test_normalized_slowdown():
    rs = [phase_benchmark(n, "host_driven", COSTS) for n in (1, 100)]
    sd = normalized_slowdown(rs)
    assert sd[1] == 1.0 and sd[100] > 1.0


@pytest.mark.parametrize("ranks,expected", [(64, 42), (256, 32), (1024, 25), (4096, 21)])
def test_exhaustion_matches_formula(ranks, expected):
    r = exhaustion_study(ranks)
    assert r.succeeded == expected == max_prestaged_barriers(ranks)
    assert r.first_failure == expected + 1
    assert r.error in ("DwqFull", "CounterOverflow")


def test_exhaustion_p2_and_all_nics():
    assert exhaustion_study(2).succeeded == 256
    assert exhaustion_study(64, all_nics=True).succeeded == 42


def test_exhaustion_counter_bound():
    # tiny counter budget: 2R increments per instance, R=6 -> 3 instances fit in 40
    r = exhaustion_study(64, counter_max=40)
    assert r.succeeded == 40 // 12 and r.error == "CounterOverflow"


def test_jacobi_p1_and_ordering():
    gpu = jacobi_weak_scaling([1, 2, 4, 8], iters=5, mode="gpu_triggered", costs=COSTS)
    host = jacobi_weak_scaling([1, 2, 4, 8], iters=5, mode="host_driven", costs=COSTS)
    assert gpu[0].efficiency == 1.0 and host[0].efficiency == 1.0
    assert all(g.efficiency >= h.efficiency for g, h in zip(gpu, host))
    assert all(0 < p.efficiency <= 1 for p in gpu + host)


def test_jacobi_serialized_monotone():
    pts = jacobi_weak_scaling([1, 2, 4, 8, 16], iters=5, mode="host_driven", costs=COSTS, wire_latency_ns=1000)
    eff = [p.efficiency for p in pts]
    assert all(a > b for a, b in zip(eff, eff[1:]))


def test_metrics_report_formats():
    res = Cluster(SimConfig(ranks=2), barrier_programs(2, 3, seed=0)).run()
    rep = metrics_from_run(res)
    lines = rep.to_csv().strip().splitlines()
    assert len(lines) == 1 + 2 + 1
    assert lines[-1].startswith("all")
    doc = json.loads(rep.to_json())
    assert len(doc["ranks"]) == 2 and doc["aggregate"]["status"] == "idle"


def test_cost_model_rejects_negative():
    with pytest.raises(ValueError):
        CostModel(host_coord_cost=-1)
