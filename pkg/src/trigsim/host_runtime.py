"""Host side of the triggered (OFI) path.

Coordination is organised in *streams*: a barrier sequence, a halo sequence
or one sender-to-peer AM channel on one rank. Each stream numbers its
instances with a monotonically increasing epoch and recycles ``slots``
buffers (two by default). For every slot the stream owns a trigger counter,
a host-visible staging word and a device-visible readiness word; the device
also publishes the epoch it is waiting for (``request``) and the host can
hand an epoch to the fallback path through ``fallback``.

The :class:`HostMonitor` drives manual progress for one NIC: it polls
completions, retires entries, re-arms freed slots and advances readiness.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

from .coordination import AmLayout, DisseminationSchedule
from .nic_cxi import (
    CounterOverflow,
    CxiNic,
    DeferredWorkEntry,
    DwqFull,
    EntryState,
    Put,
    Writeback,
)
from .simcore import Engine, MemoryRegion, MemorySpace, SimError, Slice

log = logging.getLogger(__name__)

__all__ = [
    "HandoffViolation",
    "MonitorConfig",
    "TickSummary",
    "Stream",
    "BarrierStream",
    "HaloStream",
    "AmStream",
    "HostMonitor",
    "prestage_put",
    "advance_readiness",
    "halo_value",
]


class HandoffViolation(SimError):
    """Readiness would be published for an epoch that is not safely armed."""


@dataclass
class MonitorConfig:
    poll_interval_ns: int = 1000
    per_op_overhead_ns: int = 1000
    paused_from_ns: Optional[int] = None
    paused_until_ns: Optional[int] = None
    # None means one poll interval
    fallback_lag_ns: Optional[int] = None
    h2d_latency_ns: int = 500

    def __post_init__(self):
        if self.poll_interval_ns <= 0:
            raise ValueError("poll_interval_ns must be > 0")
        if self.per_op_overhead_ns < 0 or self.h2d_latency_ns < 0:
            raise ValueError("monitor latencies must be >= 0")
        if (self.paused_from_ns is None) != (self.paused_until_ns is None):
            raise ValueError("paused_from_ns and paused_until_ns go together")
        if self.paused_from_ns is not None and self.paused_until_ns < self.paused_from_ns:
            raise ValueError("pause window ends before it starts")

    @property
    def lag(self) -> int:
        return self.poll_interval_ns if self.fallback_lag_ns is None else self.fallback_lag_ns

    def paused_at(self, t: int) -> bool:
        if self.paused_from_ns is None:
            return False
        return self.paused_from_ns <= t < self.paused_until_ns


@dataclass
class TickSummary:
    polled: int = 0
    retired: int = 0
    armed: int = 0
    fallbacks: int = 0
    fallback_writes: int = 0

    def idle(self) -> bool:
        return not (self.polled or self.retired or self.armed or self.fallbacks or self.fallback_writes)


def halo_value(rank: int, epoch: int) -> int:
    """Checksum payload carried by a halo put; the receiver recomputes it."""
    return ((rank + 1) * 0x9E3779B1 + epoch * 0x85EBCA77) & 0xFFFFFFFFFFFF


def prestage_put(nic: CxiNic, trigger: int, threshold: int, dest: Slice, src: Slice, size: int, pe: int,
                 owner_rank: int, sig: Optional[Slice] = None, tag: str = "user") -> int:
    """Arm one put guarded by ``trigger >= threshold``.

    ``sig`` (optional) is a device-visible word on the owning rank that the NIC
    increments when the put has been delivered.
    """
    if src.size != size or dest.size != size:
        raise ValueError(f"size {size} does not match src {src.size} / dest {dest.size}")
    completion = Writeback(sig) if sig is not None else None
    entry = DeferredWorkEntry(trigger, threshold, Put(src, dest, pe), completion, owner_rank, tag)
    return nic.queue_work(entry)


# -- streams ---------------------------------------------------------------------

_REQ = 0
_FB = 8


@dataclass
class FallbackPlan:
    epoch: int
    steps: list  # (condition or None, op, completion or None)
    issued: int = 0

    @property
    def done(self) -> bool:
        return self.issued >= len(self.steps)


class Stream:
    """Epoch bookkeeping shared by all stream kinds.

    The host part (counters, staging, arming state) is unused on the
    InfiniBand backend, where only the device-visible layout matters.
    """

    kind = "stream"

    def __init__(self, name: str, rank: int, nic: Optional[CxiNic], slots: int = 2,
                 horizon: Optional[int] = None):
        if slots < 1:
            raise ValueError("a stream needs at least one slot")
        self.name = name
        self.rank = rank
        self.nic = nic
        self.slots = slots
        self.horizon = horizon
        self.ctrl = MemoryRegion(rank, MemorySpace.DEVICE, 8 * (2 + slots), name=f"{name}.ctrl")
        self.stage = MemoryRegion(rank, MemorySpace.HOST, 8 * slots, name=f"{name}.stage")
        self.counters = [nic.alloc_counter(rank) for _ in range(slots)] if nic is not None else []
        self.slot_epoch = [0] * slots
        self.slot_entries: list[list[DeferredWorkEntry]] = [[] for _ in range(slots)]
        self.next_arm = 1
        self.fallback_epochs: set[int] = set()
        self.plans: list[FallbackPlan] = []
        self.first_request: dict[int, int] = {}
        self.pressure = False
        self.armed_instances = 0
        self.readiness_value = [0] * slots

    # device-visible words
    @staticmethod
    def ready_offset(slot: int) -> int:
        return 16 + 8 * slot

    def slot_of(self, epoch: int) -> int:
        return (epoch - 1) % self.slots

    def requested(self) -> int:
        return self.ctrl.read_u64(_REQ)

    def fallback_word(self) -> int:
        return self.ctrl.read_u64(_FB)

    def request(self, epoch: int) -> None:
        self.ctrl.write_u64(_REQ, epoch)

    def usable(self, epoch: int) -> bool:
        """Device predicate: the epoch is either armed and ready, or handed to fallback."""
        ctrl = self.ctrl
        return ctrl.read_u64(self.ready_offset(self.slot_of(epoch))) == epoch or ctrl.read_u64(_FB) == epoch

    def via_fallback(self, epoch: int) -> bool:
        return self.ctrl.read_u64(_FB) == epoch

    # host-side state
    def slot_free(self, slot: int) -> bool:
        return all(e.state is EntryState.RETIRED for e in self.slot_entries[slot])

    def armed_for(self, epoch: int) -> bool:
        return self.slot_epoch[self.slot_of(epoch)] == epoch

    def pending_request(self) -> int:
        """Epoch the device asked for that is neither armed nor in fallback (0 if none)."""
        req = self.requested()
        # arming is sequential, so anything below next_arm was armed or handed over already
        if req < self.next_arm or req in self.fallback_epochs:
            return 0
        return req

    def within_horizon(self, epoch: int) -> bool:
        return self.horizon is None or epoch <= self.horizon

    def armed_entry_count(self) -> int:
        return sum(1 for lst in self.slot_entries for e in lst if e.state is EntryState.ARMED)

    # subclass hooks
    def build(self, epoch: int, slot: int) -> list[tuple[int, object, Optional[Writeback]]]:
        raise NotImplementedError

    def fallback_steps(self, epoch: int, slot: int) -> list:
        raise NotImplementedError

    def watch_regions(self) -> list[MemoryRegion]:
        """Regions whose writes can unblock a fallback plan."""
        return []

    def entries_per_instance(self) -> int:
        raise NotImplementedError


class BarrierStream(Stream):
    """Dissemination barrier: R round puts per epoch, thresholds 1..R on the slot counter."""

    kind = "barrier"

    def __init__(self, rank: int, ranks: int, nic: Optional[CxiNic], slots: int = 2,
                 horizon: Optional[int] = None):
        super().__init__(f"barrier{rank}", rank, nic, slots, horizon)
        self.schedule = DisseminationSchedule(ranks)
        self.rounds = self.schedule.rounds
        self.sig = MemoryRegion(rank, MemorySpace.DEVICE, max(8, 8 * slots * self.rounds), name=f"barrier{rank}.sig")
        self.peers: dict[int, "BarrierStream"] = {}

    def sig_offset(self, slot: int, round_index: int) -> int:
        return 8 * (slot * self.rounds + round_index)

    def target(self, slot: int, round_index: int) -> tuple[int, Slice]:
        peer = self.schedule.targets(self.rank, round_index)[0]
        return peer, self.peers[peer].sig.slice(self.sig_offset(slot, round_index), 8)

    def entries_per_instance(self) -> int:
        return self.rounds

    def build(self, epoch, slot):
        src = self.stage.slice(8 * slot, 8)
        out = []
        for r in range(self.rounds):
            peer, dst = self.target(slot, r)
            out.append((r + 1, Put(src, dst, peer), None))
        return out

    def fallback_steps(self, epoch, slot):
        data = epoch.to_bytes(8, "little")
        steps = []
        for r in range(self.rounds):
            peer, dst = self.target(slot, r)
            cond = None
            if r > 0:
                off = self.sig_offset(slot, r - 1)
                cond = (lambda off=off: self.sig.read_u64(off) >= epoch)
            steps.append((cond, Put(data, dst, peer), None))
        return steps

    def watch_regions(self):
        return [self.sig]


class HaloStream(Stream):
    """Two-sided neighbour exchange on a 1-D rank line.

    Each receive buffer is 16 bytes: a checksum value then the epoch, so one
    put both carries the data and signals its arrival.
    """

    kind = "halo"

    def __init__(self, rank: int, ranks: int, nic: Optional[CxiNic], slots: int = 2,
                 horizon: Optional[int] = None):
        super().__init__(f"halo{rank}", rank, nic, slots, horizon)
        self.neighbors = [n for n in (rank - 1, rank + 1) if 0 <= n < ranks]
        self.bnd = MemoryRegion(rank, MemorySpace.DEVICE, 16 * slots, name=f"halo{rank}.bnd")
        self.recv = MemoryRegion(rank, MemorySpace.DEVICE, 32 * slots, name=f"halo{rank}.recv")
        self.sent = MemoryRegion(rank, MemorySpace.DEVICE, 8, name=f"halo{rank}.sent")
        self.peers: dict[int, "HaloStream"] = {}

    @staticmethod
    def recv_offset(slot: int, direction: int) -> int:
        # direction 0: data from the left neighbour, 1: from the right
        return 32 * slot + 16 * direction

    def dst_for(self, slot: int, peer: int) -> Slice:
        direction = 0 if peer > self.rank else 1
        return self.peers[peer].recv.slice(self.recv_offset(slot, direction), 16)

    def entries_per_instance(self) -> int:
        return len(self.neighbors)

    def build(self, epoch, slot):
        src = self.bnd.slice(16 * slot, 16)
        done = Writeback(self.sent.slice(0, 8))
        return [(i + 1, Put(src, self.dst_for(slot, peer), peer), done) for i, peer in enumerate(self.neighbors)]

    def fallback_steps(self, epoch, slot):
        done = Writeback(self.sent.slice(0, 8))
        src = self.bnd.slice(16 * slot, 16)
        return [(None, Put(src.read(), self.dst_for(slot, peer), peer), done) for peer in self.neighbors]


class AmStream(Stream):
    """Sender side of one (rank -> peer) active-message channel.

    Epoch = message sequence number. Each instance is two puts released by a
    single doorbell value 2: the body (threshold 1) then the sequence word
    (threshold 2), in that order on the same connection.
    """

    kind = "am"

    def __init__(self, rank: int, peer: int, nic: Optional[CxiNic], layout: AmLayout, slots: int = 2,
                 horizon: Optional[int] = None):
        super().__init__(f"am{rank}_{peer}", rank, nic, slots, horizon)
        self.peer = peer
        self.layout = layout
        self.body = MemoryRegion(rank, MemorySpace.DEVICE, layout.body_bytes * slots, name=f"am{rank}_{peer}.body")
        self.sent = MemoryRegion(rank, MemorySpace.DEVICE, 8, name=f"am{rank}_{peer}.sent")
        self.mailbox_region: Optional[MemoryRegion] = None

    def _dsts(self, seq: int) -> tuple[Slice, Slice]:
        base = self.layout.slot_offset(self.rank, seq)
        lay = self.layout
        return (self.mailbox_region.slice(base + lay.seq_bytes, lay.body_bytes),
                self.mailbox_region.slice(base, lay.seq_bytes))

    def entries_per_instance(self) -> int:
        return 2

    def build(self, epoch, slot):
        body_dst, seq_dst = self._dsts(epoch)
        lay = self.layout
        body_src = self.body.slice(lay.body_bytes * slot, lay.body_bytes)
        done = Writeback(self.sent.slice(0, 8))
        return [
            (1, Put(body_src, body_dst, self.peer), None),
            (2, Put(self.stage.slice(8 * slot, 8), seq_dst, self.peer), done),
        ]

    def fallback_steps(self, epoch, slot):
        body_dst, seq_dst = self._dsts(epoch)
        lay = self.layout
        body = self.body.read(lay.body_bytes * slot, lay.body_bytes)
        done = Writeback(self.sent.slice(0, 8))
        return [
            (None, Put(body, body_dst, self.peer), None),
            (None, Put(epoch.to_bytes(8, "little"), seq_dst, self.peer), done),
        ]


# -- epoch handoff -------------------------------------------------------------------


def advance_readiness(engine: Engine, stream: Stream, epoch: int, h2d_latency: int = 0) -> None:
    """Publish ``epoch`` to the device once its slot is fully armed.

    The write lands in device memory after ``h2d_latency``.
    """
    slot = stream.slot_of(epoch)
    entries = stream.slot_entries[slot]
    if stream.slot_epoch[slot] != epoch or not entries:
        raise HandoffViolation(f"{stream.name}: epoch {epoch} is not armed in slot {slot}")
    if any(e.state is not EntryState.ARMED for e in entries):
        raise HandoffViolation(f"{stream.name}: slot {slot} still holds work from an older epoch")
    if epoch <= stream.readiness_value[slot]:
        raise HandoffViolation(f"{stream.name}: readiness for slot {slot} would go backwards")
    stream.readiness_value[slot] = epoch
    ctrl = stream.ctrl
    offset = stream.ready_offset(slot)

    def land(_ev):
        ctrl.write_u64(offset, epoch)

    payload = {"rank": stream.rank, "stream": stream.name, "slot": slot, "value": epoch}
    engine.after(h2d_latency, "readiness-write", land, payload)


# -- monitor ---------------------------------------------------------------------------


class HostMonitor:
    """Manual-progress driver for one NIC.

    Ticks are aligned to ``poll_interval_ns`` and only scheduled when there is
    something to do: unconsumed completions, a device request that is not yet
    armed, or an active fallback. Retirement cost is charged to the monitor's
    own timeline (the rest of the tick runs after it), never to device actors.
    """

    def __init__(self, engine: Engine, nic: CxiNic, config: Optional[MonitorConfig] = None):
        self.engine = engine
        self.nic = nic
        self.config = config or MonitorConfig()
        self.streams: list[Stream] = []
        self.ticks = 0
        self.retired = 0
        self.fallback_count = 0
        self.fallback_writes = 0
        self.arm_failures = 0
        self.busy_until = 0
        self.last_tick = -1
        self._tick_event: Optional[int] = None
        self._tick_time: Optional[int] = None
        self._by_entry: dict[int, Stream] = {}
        self.totals = TickSummary()
        self.max_armed: dict[tuple[int, str], int] = {}
        nic.on_completion.append(self.kick)

    def add_stream(self, stream: Stream) -> None:
        self.streams.append(stream)
        stream.ctrl.subscribe(self)
        for region in stream.watch_regions():
            region.subscribe(self)

    # Watchable protocol: any write to a watched region lands here
    def poke(self) -> None:
        self.kick()

    def start(self) -> None:
        cfg = self.config
        if not cfg.paused_at(self.engine.now):
            self._arm_all(TickSummary())
        if cfg.paused_until_ns is not None and cfg.paused_until_ns >= self.engine.now:
            self.engine.at(cfg.paused_until_ns, "monitor-resume", lambda _ev: self.kick())

    # -- scheduling ---------------------------------------------------------------
    def _has_work(self) -> bool:
        if self.nic._unconsumed and not self.config.paused_at(self.engine.now):
            return True
        for st in self.streams:
            if st.plans or st.pending_request():
                return True
            if not self.config.paused_at(self.engine.now) and self._can_arm(st):
                return True
        return False

    def _can_arm(self, st: Stream) -> bool:
        e = st.next_arm
        while e in st.fallback_epochs:
            e += 1
        return st.within_horizon(e) and st.slot_free(st.slot_of(e)) and not st.pressure

    def _next_grid(self, t: int) -> int:
        step = self.config.poll_interval_ns
        t = max(t, self.busy_until)
        t = -(-t // step) * step
        if t <= self.last_tick:
            t = (self.last_tick // step + 1) * step
        return t

    def _schedule_at(self, when: int) -> None:
        if self._tick_time is not None:
            if self._tick_time <= when:
                return
            self.engine.cancel(self._tick_event)
        self._tick_time = when
        payload = {"nic": self.nic.id} if self.engine.trace is not None else None
        self._tick_event = self.engine.at(when, "host-poll-tick", self._tick, payload)

    def kick(self) -> None:
        if self._tick_time is not None and self._tick_time <= self._next_grid(self.engine.now):
            return
        now = self.engine.now
        for st in self.streams:
            req = st.pending_request()
            if req:
                st.first_request.setdefault(req, now)
        if self._has_work():
            self._schedule_at(self._next_grid(now))

    # -- the tick ---------------------------------------------------------------------
    def _tick(self, _ev) -> None:
        self._tick_time = None
        self._tick_event = None
        now = self.engine.now
        self.last_tick = now
        self.ticks += 1
        summary = TickSummary()
        cost = 0
        if not self.config.paused_at(now):
            records = self.nic.host_progress_poll()
            summary.polled = len(records)
            for record in records:
                self.nic.retire(record.entry_id)
                summary.retired += 1
            self.retired += summary.retired
            cost = summary.retired * self.config.per_op_overhead_ns
        if cost:
            self.busy_until = now + cost
            self.engine.at(self.busy_until, "monitor-work", lambda _ev: self._finish(summary))
        else:
            self._finish(summary)

    def _finish(self, summary: TickSummary) -> None:
        now = self.engine.now
        if not self.config.paused_at(now):
            self._arm_all(summary)
        self._detect_fallbacks(summary)
        self._progress_fallbacks(summary)
        self._accumulate(summary)
        self._reschedule()

    def _accumulate(self, summary: TickSummary) -> None:
        t = self.totals
        t.polled += summary.polled
        t.retired += summary.retired
        t.armed += summary.armed
        t.fallbacks += summary.fallbacks
        t.fallback_writes += summary.fallback_writes

    def _reschedule(self) -> None:
        now = self.engine.now
        wake = None
        lag = self.config.lag
        for st in self.streams:
            req = st.pending_request()
            if req:
                first = st.first_request.setdefault(req, now)
                due = max(first + lag, now)
                wake = due if wake is None else min(wake, due)
        paused = self.config.paused_at(now)
        if (self.nic._unconsumed and not paused) or any(
                p for st in self.streams for p in st.plans if self._plan_ready(p)):
            wake = now if wake is None else min(wake, now)
        if not paused and any(self._can_arm(st) for st in self.streams):
            wake = now if wake is None else min(wake, now)
        if wake is not None:
            self._schedule_at(self._next_grid(wake))

    # -- arming ------------------------------------------------------------------------
    def _room_for(self, n: int) -> None:
        nic = self.nic
        if nic.dwq.occupied + n > nic.dwq.capacity:
            raise DwqFull(f"nic {nic.id}: no room for {n} entries")
        if nic.increments_in_use + nic.INCREMENTS_PER_ENTRY * n > nic.params.counter_max:
            raise CounterOverflow(f"nic {nic.id}: counter budget exhausted")

    def _arm_all(self, summary: TickSummary) -> None:
        for st in self.streams:
            self._arm_stream(st, summary)

    def _arm_stream(self, st: Stream, summary: TickSummary) -> None:
        st.pressure = False
        while True:
            e = st.next_arm
            while e in st.fallback_epochs:
                e += 1
            st.next_arm = e
            if not st.within_horizon(e):
                return
            slot = st.slot_of(e)
            if not st.slot_free(slot):
                return
            try:
                self.arm_instance(st, e)
            except (DwqFull, CounterOverflow) as exc:
                st.pressure = True
                self.arm_failures += 1
                self.engine.note("arm-failed", rank=st.rank, stream=st.name, epoch=e, error=type(exc).__name__)
                return
            summary.armed += 1
            st.next_arm = e + 1

    def arm_instance(self, st: Stream, epoch: int) -> None:
        """Retire-reset-rearm one slot for ``epoch`` and publish readiness."""
        slot = st.slot_of(epoch)
        ops = st.build(epoch, slot)
        self._room_for(len(ops))
        counter = st.counters[slot]
        self.nic.reset_counter(counter.id)
        st.stage.write_u64(8 * slot, epoch)
        entries = []
        for threshold, op, completion in ops:
            entry = DeferredWorkEntry(counter.id, threshold, op, completion, st.rank, st.kind)
            self.nic.queue_work(entry)
            self._by_entry[entry.id] = st
            entries.append(entry)
        st.slot_entries[slot] = entries
        st.slot_epoch[slot] = epoch
        st.armed_instances += 1
        armed = sum(s.armed_entry_count() for s in self.streams if s.rank == st.rank and s.kind == st.kind)
        key = (st.rank, st.kind)
        if armed > self.max_armed.get(key, 0):
            self.max_armed[key] = armed
        advance_readiness(self.engine, st, epoch, self.config.h2d_latency_ns)

    # -- fallback ---------------------------------------------------------------------
    def _detect_fallbacks(self, summary: TickSummary) -> None:
        now = self.engine.now
        for st in self.streams:
            req = st.pending_request()
            if not req:
                continue
            first = st.first_request.setdefault(req, now)
            if st.pressure or now - first >= self.config.lag:
                self.engage_fallback(st, req)
                summary.fallbacks += 1

    def engage_fallback(self, st: Stream, epoch: int) -> None:
        slot = st.slot_of(epoch)
        st.fallback_epochs.add(epoch)
        st.first_request.pop(epoch, None)
        if st.next_arm == epoch:
            st.next_arm = epoch + 1
        st.plans.append(FallbackPlan(epoch, st.fallback_steps(epoch, slot)))
        self.fallback_count += 1
        self.engine.note("fallback-engaged", rank=st.rank, stream=st.name, epoch=epoch)
        log.debug("fallback %s epoch %d", st.name, epoch)
        ctrl = st.ctrl

        def land(_ev):
            ctrl.write_u64(_FB, epoch)

        payload = {"rank": st.rank, "stream": st.name, "value": epoch}
        self.engine.after(self.config.h2d_latency_ns, "fallback-write", land, payload)

    @staticmethod
    def _plan_ready(plan: FallbackPlan) -> bool:
        if plan.done:
            return False
        cond = plan.steps[plan.issued][0]
        return cond is None or cond()

    def _progress_fallbacks(self, summary: TickSummary) -> None:
        for st in self.streams:
            if not st.plans:
                continue
            for plan in st.plans:
                while not plan.done:
                    cond, op, completion = plan.steps[plan.issued]
                    if cond is not None and not cond():
                        break
                    self.nic.post_nontriggered(st.rank, op, completion, tag=f"{st.kind}-fallback")
                    plan.issued += 1
                    summary.fallback_writes += 1
                    self.fallback_writes += 1
            st.plans = [p for p in st.plans if not p.done]
