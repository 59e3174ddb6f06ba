"""Topology assembly: engine, fabric, NICs, ports, streams, monitors, actors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .backends import IbPort, OfiPort, Port
from .coordination import AmLayout
from .device import AmSend, BarrierAll, DeviceActor, Halo
from .host_runtime import AmStream, BarrierStream, HaloStream, HostMonitor, MonitorConfig, prestage_put
from .nic_cxi import CxiNic, NicParams
from .nic_ib import IbNic, IbParams
from .simcore import Engine, EngineStatus, Fabric, MemoryRegion, MemorySpace, Trace

__all__ = ["SimConfig", "PrestageSpec", "RegionSpec", "RunResult", "Cluster", "simulate"]


@dataclass
class SimConfig:
    backend: str = "ofi"
    ranks: int = 2
    seed: int = 0
    wire_latency_ns: int = 1000
    wire_jitter_ns: int = 0
    nic: NicParams = field(default_factory=NicParams)
    ib: IbParams = field(default_factory=IbParams)
    monitor: MonitorConfig = field(default_factory=MonitorConfig)
    monitor_enabled: bool = True
    stage_ahead_slots: int = 2
    wait_mode: str = "event"
    device_poll_interval_ns: int = 100
    am_layout: AmLayout = field(default_factory=AmLayout)
    region_bytes: int = 4096
    trace: bool = False

    def __post_init__(self):
        if self.backend not in ("ofi", "ib"):
            raise ValueError(f"backend must be 'ofi' or 'ib', not {self.backend!r}")
        if self.ranks < 1:
            raise ValueError("ranks must be >= 1")
        if self.wire_latency_ns < 0 or self.wire_jitter_ns < 0:
            raise ValueError("wire latency must be >= 0")
        if self.stage_ahead_slots < 1:
            raise ValueError("stage_ahead_slots must be >= 1")

    @property
    def nics(self) -> int:
        per = self.nic.ranks_per_nic
        return -(-self.ranks // per)

    def nic_of(self, rank: int) -> int:
        return rank // self.nic.ranks_per_nic


@dataclass(frozen=True)
class RegionSpec:
    name: str
    space: MemorySpace = MemorySpace.DEVICE
    size: int = 4096


@dataclass(frozen=True)
class PrestageSpec:
    """A user-level pre-staged put (custom scenarios)."""

    rank: int
    counter: str
    threshold: int
    peer: int
    src: tuple  # (region, offset)
    dst: tuple
    size: int = 8
    sig: Optional[tuple] = None


@dataclass
class RunResult:
    status: EngineStatus
    end_time: int
    faults: list
    trace: Optional[Trace]
    cluster: "Cluster"

    @property
    def ok(self) -> bool:
        return self.status is EngineStatus.IDLE and not self.faults

    @property
    def reason(self) -> str:
        if self.faults:
            t, who, exc = self.faults[0]
            return f"{type(exc).__name__} in {who} at t={t}: {exc}"
        if self.status is EngineStatus.DEADLOCK:
            blocked = ", ".join(p.name for p in self.cluster.engine.blocked())
            return f"deadlock: blocked {blocked}"
        if self.status is EngineStatus.LIMIT_REACHED:
            return "time limit reached"
        return "ok"


def _count(program, kind) -> int:
    return sum(1 for s in program if type(s) is kind)


def _am_peers(program) -> dict:
    peers: dict = {}
    for step in program:
        if type(step) is AmSend:
            peers[step.peer] = peers.get(step.peer, 0) + 1
    return peers


class Cluster:
    """Builds the whole simulated system for one run.

    ``programs`` maps rank -> list of device steps; ranks without a program
    run an empty one. ``handlers`` maps handler id -> step list (shared by
    all ranks).
    """

    def __init__(self, config: SimConfig, programs: dict, handlers: Optional[dict] = None,
                 prestage: Optional[list] = None, regions: Optional[list] = None,
                 start_times: Optional[dict] = None):
        self.config = config
        cfg = config
        P = cfg.ranks
        self.engine = Engine(trace=cfg.trace)
        self.fabric = Fabric(self.engine, cfg.wire_latency_ns, cfg.wire_jitter_ns, cfg.seed)
        self.programs = {r: list(programs.get(r, [])) for r in range(P)}
        self.handlers = dict(handlers or {})
        self.cxi_nics: list[CxiNic] = []
        self.ib_nics: list[IbNic] = []
        self.monitors: list[HostMonitor] = []
        self.ports: list[Port] = []

        handler_steps = [s for prog in self.handlers.values() for s in prog]
        handler_barrier = any(type(s) is BarrierAll for s in handler_steps)
        handler_halo = any(type(s) is Halo for s in handler_steps)
        handler_am = [s for s in handler_steps if type(s) is AmSend]

        if cfg.backend == "ofi":
            self.cxi_nics = [CxiNic(self.engine, self.fabric, i, cfg.nic) for i in range(cfg.nics)]
        slots = cfg.stage_ahead_slots
        # a stream exists on every rank as soon as any rank uses it
        any_barrier = handler_barrier or any(type(s) is BarrierAll for p in self.programs.values() for s in p)
        any_halo = handler_halo or any(type(s) is Halo for p in self.programs.values() for s in p)
        for r in range(P):
            prog = self.programs[r]
            if cfg.backend == "ofi":
                nic = self.cxi_nics[cfg.nic_of(r)]
                port: Port = OfiPort(r, P, cfg.am_layout, nic)
            else:
                nic = None
                ib = IbNic(self.engine, self.fabric, r, cfg.ib)
                self.ib_nics.append(ib)
                port = IbPort(r, P, cfg.am_layout, ib)
            port.engine = self.engine
            if P > 1 and any_barrier:
                horizon = None if handler_barrier else _count(prog, BarrierAll)
                port.barrier_stream = BarrierStream(r, P, nic, slots, horizon)
            if any_halo:
                horizon = None if handler_halo else _count(prog, Halo)
                port.halo_stream = HaloStream(r, P, nic, slots, horizon)
            if cfg.backend == "ofi":
                explicit = _am_peers(prog)
                peers = {p for p in explicit if isinstance(p, int)}
                open_ended = bool(handler_am)
                for s in handler_am:
                    if s.peer == "src":
                        peers.update(p for p in range(P) if p != r)
                    else:
                        peers.add(int(s.peer))
                for peer in sorted(peers):
                    if not 0 <= peer < P:
                        raise ValueError(f"rank {r}: AM peer {peer} out of range")
                    horizon = None if open_ended else explicit.get(peer, 0)
                    port.am_streams[peer] = AmStream(r, peer, nic, cfg.am_layout, slots, horizon)
            self.ports.append(port)

        for spec in regions or []:
            for port in self.ports:
                port.regions[spec.name] = MemoryRegion(port.rank, spec.space, spec.size, name=spec.name)
        self._default_regions()

        mailboxes = [p.mailbox for p in self.ports]
        for port in self.ports:
            port.mailboxes = mailboxes
            if port.barrier_stream is not None:
                port.barrier_stream.peers = {p.rank: p.barrier_stream for p in self.ports}
            if port.halo_stream is not None:
                port.halo_stream.peers = {p.rank: p.halo_stream for p in self.ports}
            for peer, st in port.am_streams.items():
                st.mailbox_region = mailboxes[peer].region
            if isinstance(port, IbPort):
                port.peer_ports = self.ports

        if cfg.backend == "ofi":
            self._prestage(prestage or [])
            if cfg.monitor_enabled:
                for nic in self.cxi_nics:
                    mon = HostMonitor(self.engine, nic, cfg.monitor)
                    for port in self.ports:
                        if port.nic is nic:
                            for st in self._streams_of(port):
                                if st.entries_per_instance():
                                    mon.add_stream(st)
                    self.monitors.append(mon)
                for mon in self.monitors:
                    mon.start()
        elif prestage:
            raise ValueError("prestage entries need the ofi backend")

        starts = start_times or {}
        self.actors = [
            DeviceActor(self.engine, r, self.programs[r], self.ports[r], self.handlers, cfg.wait_mode,
                        cfg.device_poll_interval_ns, starts.get(r, 0))
            for r in range(P)
        ]

    @staticmethod
    def _streams_of(port: Port) -> list:
        out = []
        if port.barrier_stream is not None:
            out.append(port.barrier_stream)
        if port.halo_stream is not None:
            out.append(port.halo_stream)
        out.extend(port.am_streams[p] for p in sorted(port.am_streams))
        return out

    def _default_regions(self) -> None:
        """Create any region a program names but nobody declared (device-visible)."""
        from .device import IbPut, WaitUntil, Write

        names = set()
        for prog in list(self.programs.values()) + list(self.handlers.values()):
            for step in prog:
                if type(step) in (WaitUntil, Write):
                    names.add(step.addr.region)
                elif type(step) is IbPut:
                    names.update((step.src.region, step.dst.region))
        for port in self.ports:
            for name in sorted(names):
                if name not in port.regions:
                    port.regions[name] = MemoryRegion(port.rank, MemorySpace.DEVICE, self.config.region_bytes, name=name)

    def _counter(self, port: OfiPort, name: str):
        c = port.counters.get(name)
        if c is None:
            c = port.counters[name] = port.nic.alloc_counter(port.rank)
        return c

    def _prestage(self, specs: list) -> None:
        for spec in specs:
            if not 0 <= spec.rank < len(self.ports) or not 0 <= spec.peer < len(self.ports):
                raise ValueError(f"prestage rank/peer out of range: {spec}")
            port = self.ports[spec.rank]
            for name in (spec.src[0], spec.dst[0]) + ((spec.sig[0],) if spec.sig else ()):
                for p in self.ports:
                    if name not in p.regions:
                        p.regions[name] = MemoryRegion(p.rank, MemorySpace.DEVICE, self.config.region_bytes, name=name)
            counter = self._counter(port, spec.counter)
            src = port.regions[spec.src[0]].slice(spec.src[1], spec.size)
            dst = self.ports[spec.peer].regions[spec.dst[0]].slice(spec.dst[1], spec.size)
            sig = port.regions[spec.sig[0]].slice(spec.sig[1], 8) if spec.sig else None
            prestage_put(port.nic, counter.id, spec.threshold, dst, src, spec.size, spec.peer, spec.rank, sig)
        # any counter a program triggers must exist even if nothing is staged on it
        from .device import Trigger

        for r, prog in self.programs.items():
            for step in list(prog) + [s for h in self.handlers.values() for s in h]:
                if type(step) is Trigger:
                    self._counter(self.ports[r], step.counter)

    # -- running --------------------------------------------------------------------------
    def run(self, limit: Optional[int] = None) -> RunResult:
        status = self.engine.run_until(limit)
        finished = [a.process.finished_at for a in self.actors if a.process.finished_at is not None]
        end = max(finished) if finished else self.engine.now
        return RunResult(status, end, list(self.engine.faults), self.engine.trace, self)

    # -- metrics helpers ---------------------------------------------------------------------
    @property
    def flush_count(self) -> int:
        return sum(n.flush_count for n in self.cxi_nics)

    @property
    def fallback_count(self) -> int:
        return sum(m.fallback_count for m in self.monitors)

    def armed_high_water(self, rank: int, kind: str = "barrier") -> int:
        return max((m.max_armed.get((rank, kind), 0) for m in self.monitors), default=0)

    def occupancy_high_water(self, rank: int, kind: str = "barrier") -> int:
        if not self.cxi_nics:
            return 0
        return self.cxi_nics[self.config.nic_of(rank)].occupancy_high_water_for(rank, kind)


def simulate(config: SimConfig, programs: dict, limit: Optional[int] = None, **kwargs) -> RunResult:
    return Cluster(config, programs, **kwargs).run(limit)
