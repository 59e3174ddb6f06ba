"""Workload generators, the host-driven cost model, and metrics.

The GPU-triggered runs go through the full simulator. The host-driven
baseline is a cost model: each coordination ends the kernel, waits for
every rank to arrive, then pays ``host_coord_cost`` (plus any kernel launch
cost) before the next segment starts.
"""

from __future__ import annotations

import csv
import io
import json
import random
from dataclasses import asdict, dataclass, field
from typing import Optional

from .cluster import Cluster, RunResult, SimConfig
from .coordination import DisseminationSchedule
from .device import AmRecv, AmSend, BarrierAll, Compute, Halo
from .host_runtime import MonitorConfig
from .nic_cxi import CounterOverflow, CxiNic, DeferredWorkEntry, DwqFull, NicParams, Put, max_prestaged_barriers
from .simcore import Delay, Engine, Fabric, MemoryRegion, MemorySpace, Process, Tally, WaitFor, ms, us

__all__ = [
    "CostModel",
    "MetricsReport",
    "split_compute",
    "PhaseResult",
    "phase_benchmark",
    "ExhaustionResult",
    "exhaustion_study",
    "jacobi_weak_scaling",
    "JacobiPoint",
    "barrier_programs",
    "am_random_programs",
    "pingpong_programs",
    "metrics_from_run",
    "gpu_calibrated_config",
]


@dataclass
class CostModel:
    """Coordination costs in ns. Defaults are the calibrated values."""

    host_coord_cost: int = us(25.2)
    gpu_trigger_cost: int = us(0.11)
    kernel_launch_cost: int = 0
    total_compute: int = ms(10.6)
    source: str = "calibrated"

    def __post_init__(self):
        for name in ("host_coord_cost", "gpu_trigger_cost", "kernel_launch_cost", "total_compute"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def split_compute(total: int, phases: int) -> list[int]:
    """Divide ``total`` ns over ``phases`` segments; the sum is exact."""
    if phases < 1:
        raise ValueError("phases must be >= 1")
    base, extra = divmod(total, phases)
    return [base + (1 if i < extra else 0) for i in range(phases)]


# -- metrics ----------------------------------------------------------------------


@dataclass
class RankMetrics:
    rank: int
    end_time: int
    coordinations: int
    coord_mean_ns: float
    coord_max_ns: int
    armed_high_water: int
    dwq_occupancy_high_water: int


@dataclass
class MetricsReport:
    ranks: list[RankMetrics] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["rank", "end_time", "coordinations", "coord_mean_ns", "coord_max_ns", "armed_high_water",
                "dwq_occupancy_high_water"]
        extra = sorted(self.aggregate)
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols + extra)
        for row in self.ranks:
            d = asdict(row)
            writer.writerow([_fmt(d[c]) for c in cols] + [""] * len(extra))
        writer.writerow(["all", "", "", "", "", "", ""] + [_fmt(self.aggregate[k]) for k in extra])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"ranks": [asdict(r) for r in self.ranks], "aggregate": self.aggregate},
                          indent=2, sort_keys=True)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(round(value, 9))
    return str(value)


def metrics_from_run(result: RunResult) -> MetricsReport:
    cluster = result.cluster
    rows = []
    for actor in cluster.actors:
        lat = [exit_ - enter for _, enter, exit_ in actor.barriers]
        rows.append(RankMetrics(
            rank=actor.rank,
            end_time=actor.process.finished_at if actor.process.finished_at is not None else -1,
            coordinations=len(lat),
            coord_mean_ns=(sum(lat) / len(lat)) if lat else 0.0,
            coord_max_ns=max(lat, default=0),
            armed_high_water=cluster.armed_high_water(actor.rank),
            dwq_occupancy_high_water=cluster.occupancy_high_water(actor.rank),
        ))
    nics = cluster.cxi_nics
    agg = {
        "status": result.status.value,
        "end_time_ns": result.end_time,
        "flush_count": cluster.flush_count,
        "fallback_count": cluster.fallback_count,
        "max_armed_per_rank": max((r.armed_high_water for r in rows), default=0),
        "dwq_high_water": max((n.dwq.high_water for n in nics), default=0),
        "counter_high_water": max((n.increments_high_water for n in nics), default=0),
        "faults": len(result.faults),
        "events": cluster.engine.processed,
    }
    return MetricsReport(rows, agg)


# -- host-driven baseline ------------------------------------------------------------


class HostBarrier:
    """Global host-mediated barrier: releases at max(arrival) + cost."""

    def __init__(self, engine: Engine, ranks: int, cost: int):
        self.engine = engine
        self.ranks = ranks
        self.cost = cost
        self.arrived = 0
        self.generation = Tally()
        self.latest = 0

    def arrive(self) -> int:
        gen = self.generation.value
        self.arrived += 1
        self.latest = self.engine.now
        if self.arrived == self.ranks:
            self.arrived = 0
            self.engine.after(self.cost, "host-release", lambda _ev: self.generation.add(1))
        return gen


def _host_rank(engine: Engine, rank: int, segments: list[int], barrier: HostBarrier, launch: int,
               record: list, halo: Optional[tuple] = None):
    """One host-driven rank: compute segment, optional halo exchange, barrier, relaunch."""
    for seg in segments:
        if seg:
            yield Delay(seg)
        if halo is not None:
            halo_barrier = halo[0]
            gen = halo_barrier.arrive()
            yield WaitFor(lambda g=gen: halo_barrier.generation.value > g, (halo_barrier.generation,))
        enter = engine.now
        gen = barrier.arrive()
        yield WaitFor(lambda g=gen: barrier.generation.value > g, (barrier.generation,))
        if launch:
            yield Delay(launch)
        record.append((enter, engine.now))


# -- phase benchmark ---------------------------------------------------------------------


@dataclass
class PhaseResult:
    phases: int
    mode: str
    end_time_ns: int
    compute_ns: int
    coord_mean_ns: float
    ranks: int

    @property
    def coordination_fraction(self) -> float:
        return (self.end_time_ns - self.compute_ns) / self.end_time_ns

    def as_dict(self) -> dict:
        d = asdict(self)
        d["coordination_fraction"] = self.coordination_fraction
        return d


def gpu_calibrated_config(ranks: int, costs: CostModel, **overrides) -> SimConfig:
    """Simulator parameters under which one P=2 barrier costs exactly ``gpu_trigger_cost``.

    The whole trigger-to-flag path is folded into the doorbell latency; NIC
    execution and wire time are zero so that the calibrated value is not
    double counted.
    """
    nic = NicParams(doorbell_latency_ns=costs.gpu_trigger_cost, nic_exec_latency_ns=0)
    monitor = MonitorConfig(h2d_latency_ns=0)
    kwargs = dict(ranks=ranks, wire_latency_ns=0, nic=nic, monitor=monitor)
    kwargs.update(overrides)
    return SimConfig(**kwargs)


def phase_benchmark(phases: int, mode: str, costs: Optional[CostModel] = None, ranks: int = 2) -> PhaseResult:
    """Fixed total compute split into ``phases`` segments, each followed by a global barrier."""
    costs = costs or CostModel()
    segments = split_compute(costs.total_compute, phases)
    if mode == "gpu_triggered":
        cfg = gpu_calibrated_config(ranks, costs)
        prog = []
        for seg in segments:
            prog += [Compute(seg), BarrierAll()]
        res = Cluster(cfg, {r: prog for r in range(ranks)}).run()
        if not res.ok:
            raise RuntimeError(f"phase benchmark failed: {res.reason}")
        lat = [x - e for a in res.cluster.actors for _, e, x in a.barriers]
        return PhaseResult(phases, mode, res.end_time, sum(segments), sum(lat) / len(lat), ranks)
    if mode == "host_driven":
        engine = Engine()
        barrier = HostBarrier(engine, ranks, costs.host_coord_cost)
        records: list = []
        procs = []
        for r in range(ranks):
            rec: list = []
            records.append(rec)
            proc = Process(engine, f"host{r}", _host_rank(engine, r, segments, barrier, costs.kernel_launch_cost, rec), r)
            proc.start(0)
            procs.append(proc)
        engine.run_until()
        end = max(p.finished_at for p in procs)
        lat = [x - e for rec in records for e, x in rec]
        return PhaseResult(phases, mode, end, sum(segments), sum(lat) / len(lat), ranks)
    raise ValueError(f"mode must be 'host_driven' or 'gpu_triggered', not {mode!r}")


def normalized_slowdown(results: list[PhaseResult]) -> dict[int, float]:
    """End-to-end time relative to the run with the fewest phases."""
    base = min(results, key=lambda r: r.phases)
    return {r.phases: r.end_time_ns / base.end_time_ns for r in results}


# -- exhaustion study -----------------------------------------------------------------------


@dataclass
class ExhaustionResult:
    ranks: int
    rounds: int
    succeeded: int
    error: str
    predicted: int
    dwq_high_water: int
    counter_high_water: int

    @property
    def first_failure(self) -> int:
        return self.succeeded + 1


def exhaustion_study(ranks: int, barriers_to_prestage: Optional[int] = None, dwq_capacity: int = 256,
                     counter_max: int = 2047, ranks_per_nic: int = 1, all_nics: bool = False) -> ExhaustionResult:
    """Naive pre-staging without a monitor: arm whole barrier instances until the NIC refuses.

    Instance k of a rank uses one counter with cumulative thresholds
    (k-1)R+1 .. kR, so nothing is ever retired or reset. NICs are symmetric,
    so by default only the first NIC is armed; ``all_nics`` arms every NIC
    and checks that they agree.
    """
    limit = barriers_to_prestage if barriers_to_prestage is not None else 10 ** 9
    sched = DisseminationSchedule(ranks)
    R = sched.rounds
    predicted = max_prestaged_barriers(ranks, dwq_capacity, counter_max)
    engine = Engine()
    fabric = Fabric(engine, 0)
    params = NicParams(dwq_capacity=dwq_capacity, counter_max=counter_max, ranks_per_nic=ranks_per_nic)
    n_nics = -(-ranks // ranks_per_nic)
    nic_ids = range(n_nics) if all_nics else range(1)
    sig = {}

    def sig_region(rank):
        if rank not in sig:
            sig[rank] = MemoryRegion(rank, MemorySpace.DEVICE, 8 * max(R, 1), name="sig")
        return sig[rank]

    results = []
    for nic_id in nic_ids:
        nic = CxiNic(engine, fabric, nic_id, params)
        owners = [r for r in range(nic_id * ranks_per_nic, min(ranks, (nic_id + 1) * ranks_per_nic))]
        counters = {r: nic.alloc_counter(r) for r in owners}
        stage = {r: MemoryRegion(r, MemorySpace.HOST, 8, name="stage") for r in owners}
        done, error = 0, "none"
        try:
            while done < limit:
                for r in owners:
                    for rnd in range(R):
                        peer = sched.targets(r, rnd)[0]
                        op = Put(stage[r].slice(0, 8), sig_region(peer).slice(8 * rnd, 8), peer)
                        nic.queue_work(DeferredWorkEntry(counters[r].id, done * R + rnd + 1, op, None, r, "barrier"))
                done += 1
        except (DwqFull, CounterOverflow) as exc:
            error = type(exc).__name__
        results.append(ExhaustionResult(ranks, R, done, error, predicted, nic.dwq.high_water,
                                        nic.increments_high_water))
    first = results[0]
    for other in results[1:]:
        if (other.succeeded, other.error) != (first.succeeded, first.error):
            raise AssertionError(f"NICs disagree: {first} vs {other}")
    return first


# -- jacobi ------------------------------------------------------------------------------


@dataclass
class JacobiPoint:
    ranks: int
    mode: str
    time_ns: int
    efficiency: float


def jacobi_weak_scaling(rank_counts: list[int], iters: int = 20, compute_per_iter: int = us(500),
                        mode: str = "gpu_triggered", costs: Optional[CostModel] = None,
                        wire_latency_ns: int = 0) -> list[JacobiPoint]:
    """1-D rank line: compute, exchange halos with both neighbours, barrier.

    Per-rank compute is identical for every P; E_p = T_1 / T_p.
    """
    costs = costs or CostModel()
    times = {}
    for P in rank_counts:
        if mode == "gpu_triggered":
            cfg = gpu_calibrated_config(P, costs, wire_latency_ns=wire_latency_ns)
            prog = [Compute(compute_per_iter), Halo(), BarrierAll()] * iters
            res = Cluster(cfg, {r: prog for r in range(P)}).run()
            if not res.ok:
                raise RuntimeError(f"jacobi P={P} failed: {res.reason}")
            times[P] = res.end_time
        elif mode == "host_driven":
            engine = Engine()
            R = DisseminationSchedule(P).rounds
            # host-side barrier over the network: fixed host cost plus R wire hops
            barrier = HostBarrier(engine, P, costs.host_coord_cost + R * wire_latency_ns)
            halo = None
            if P > 1:
                halo = (HostBarrier(engine, P, costs.host_coord_cost + wire_latency_ns),)
            procs = []
            for r in range(P):
                gen = _host_rank(engine, r, [compute_per_iter] * iters, barrier, costs.kernel_launch_cost, [], halo)
                proc = Process(engine, f"host{r}", gen, r)
                proc.start(0)
                procs.append(proc)
            engine.run_until()
            times[P] = max(p.finished_at for p in procs)
        else:
            raise ValueError(f"unknown mode {mode!r}")
    base = times[1] if 1 in times else times[min(times)]
    return [JacobiPoint(P, mode, times[P], base / times[P]) for P in rank_counts]


# -- program generators --------------------------------------------------------------------


def barrier_programs(ranks: int, barriers: int, seed: int = 0, max_skew_ns: int = 5000,
                     base_compute_ns: int = 0) -> dict[int, list]:
    """Barriers separated by random per-rank compute (skew)."""
    rng = random.Random(seed)
    progs = {r: [] for r in range(ranks)}
    for _ in range(barriers):
        for r in range(ranks):
            progs[r].append(Compute(base_compute_ns + rng.randint(0, max_skew_ns)))
            progs[r].append(BarrierAll())
    return progs


def am_random_programs(ranks: int, messages: int, seed: int = 0, per_round: int = 10,
                       handler_compute_ns: int = 0, max_skew_ns: int = 2000) -> tuple[dict, dict, list]:
    """Random AM traffic in rounds: sends, receive the round's inbound count, barrier.

    Returns (programs, handlers, sent) where ``sent`` lists (src, dst, handler, args).
    Each round sends at most ``per_round`` messages per rank, well inside the
    mailbox ring, so the workload can never overflow it.
    """
    rng = random.Random(seed)
    progs = {r: [] for r in range(ranks)}
    handlers = {h: ([Compute(handler_compute_ns)] if handler_compute_ns else []) for h in range(1, 5)}
    sent = []
    nonce = 0
    remaining = messages
    while remaining > 0:
        inbound = [0] * ranks
        for r in range(ranks):
            progs[r].append(Compute(rng.randint(0, max_skew_ns)))
        for r in range(ranks):
            count = min(rng.randint(1, per_round), remaining)
            remaining -= count
            for _ in range(count):
                peer = rng.choice([p for p in range(ranks) if p != r])
                handler = rng.randint(1, 4)
                nonce += 1
                args = tuple([nonce] + [rng.getrandbits(63) for _ in range(rng.randint(0, 5))])
                progs[r].append(AmSend(peer, handler, args))
                sent.append((r, peer, handler, args))
                inbound[peer] += 1
            if remaining <= 0:
                break
        for r in range(ranks):
            progs[r].append(AmRecv(inbound[r]))
            progs[r].append(BarrierAll())
    return progs, handlers, sent


def pingpong_programs(rounds: int = 1) -> tuple[dict, dict]:
    """Rank 0 sends, rank 1's handler replies, rank 0 waits for the reply."""
    progs = {0: [], 1: [AmRecv(rounds)]}
    for i in range(rounds):
        progs[0] += [AmSend(1, 1, (i,)), AmRecv(1)]
    handlers = {1: [AmSend("src", 2, ())], 2: []}
    return progs, handlers
