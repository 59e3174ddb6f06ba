"""CXI-like NIC: trigger counters, a bounded deferred work queue, and manual progress.

Host code arms deferred work with :meth:`CxiNic.queue_work`; device code can
only move a trigger counter forward through :meth:`CxiNic.ring_doorbell`.
Device-visible completion (a flag write) and provider-visible progress (a
consumed :class:`CompletionRecord`) are tracked separately, and an entry can
only be retired after the latter.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

from .simcore import Engine, Fabric, SimError, SimFault, Slice, Tally

__all__ = [
    "NicError",
    "DwqFull",
    "ThresholdOverflow",
    "CounterOverflow",
    "NonMonotoneWrite",
    "NotProgressedYet",
    "InvalidEntryState",
    "InvalidRankCount",
    "NicParams",
    "TriggerCounter",
    "Put",
    "AmWrite",
    "Writeback",
    "EntryState",
    "DeferredWorkEntry",
    "DeferredWorkQueue",
    "CompletionRecord",
    "CxiNic",
    "dissemination_round_count",
    "max_prestaged_barriers",
]


class NicError(SimError):
    pass


class DwqFull(NicError):
    """Deferred work queue capacity exhausted."""


class ThresholdOverflow(NicError):
    pass


class CounterOverflow(NicError, SimFault):
    """A counter value, or the NIC's increment budget, would exceed ``counter_max``."""


class NonMonotoneWrite(NicError, SimFault):
    pass


class NotProgressedYet(NicError):
    """Retire attempted before host progress consumed the completion record."""


class InvalidEntryState(NicError):
    pass


class InvalidRankCount(ValueError):
    pass


@dataclass
class NicParams:
    dwq_capacity: int = 256
    counter_max: int = 2047
    ranks_per_nic: int = 1
    doorbell_latency_ns: int = 100
    nic_exec_latency_ns: int = 100
    flush_cost_ns: int = 1_000_000_000

    def __post_init__(self):
        if self.dwq_capacity < 1 or self.counter_max < 1 or self.ranks_per_nic < 1:
            raise ValueError("dwq_capacity, counter_max and ranks_per_nic must be positive")
        for name in ("doorbell_latency_ns", "nic_exec_latency_ns", "flush_cost_ns"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass(eq=False)
class TriggerCounter:
    id: int
    nic: int
    owner_rank: int
    max_value: int = 2047
    value: int = 0
    # highest value written or still in flight through a doorbell
    issued: int = 0


@dataclass(frozen=True)
class Put:
    src: Slice
    dst: Slice
    peer: int


@dataclass(frozen=True)
class AmWrite:
    """Body write followed by a sequence-word write on the same connection."""

    body_src: Slice
    body_dst: Slice
    seq_src: Slice
    seq_dst: Slice
    peer: int


@dataclass(frozen=True)
class Writeback:
    """Device-visible completion flag, incremented once when the operation lands."""

    flag: Slice
    increment: int = 1


class EntryState(str, enum.Enum):
    ARMED = "armed"
    RELEASED = "released"
    RETIRED = "retired"


@dataclass(eq=False)
class DeferredWorkEntry:
    trigger: int
    threshold: int
    op: Union[Put, AmWrite]
    completion: Optional[Writeback] = None
    owner_rank: int = 0
    tag: str = ""
    id: int = -1
    state: EntryState = EntryState.ARMED
    completed: bool = False


@dataclass
class CompletionRecord:
    entry_id: int
    time: int
    consumed: bool = False


@dataclass
class DeferredWorkQueue:
    capacity: int = 256
    entries: dict = field(default_factory=dict)
    occupied: int = 0
    high_water: int = 0

    def free(self) -> int:
        return self.capacity - self.occupied


def dissemination_round_count(ranks: int) -> int:
    """ceil(log2(P)) without floating point; 0 for a single rank."""
    if ranks < 1:
        raise InvalidRankCount(f"rank count must be >= 1, got {ranks}")
    return (ranks - 1).bit_length()


def max_prestaged_barriers(ranks: int, dwq_capacity: int = 256, counter_max: int = 2047) -> int:
    """Barrier instances a naive host can arm before the DWQ or counter budget runs out.

    Each instance needs R = ceil(log2 P) DWQ entries and 2R counter
    increments, so the answer is ``min(capacity // R, counter_max // (2R))``.
    """
    if ranks < 2:
        raise InvalidRankCount(f"need at least 2 ranks, got {ranks}")
    rounds = dissemination_round_count(ranks)
    return min(dwq_capacity // rounds, counter_max // (2 * rounds))


class CxiNic:
    """One NIC, shared by ``params.ranks_per_nic`` ranks.

    Counter increments are the budgeted resource: every queued entry reserves
    two (its trigger increment plus one completion increment) until it is
    retired or flushed.
    """

    INCREMENTS_PER_ENTRY = 2

    def __init__(self, engine: Engine, fabric: Fabric, nic_id: int = 0, params: Optional[NicParams] = None):
        self.engine = engine
        self.fabric = fabric
        self.id = nic_id
        self.params = params or NicParams()
        self.dwq = DeferredWorkQueue(capacity=self.params.dwq_capacity)
        self.counters: dict[int, TriggerCounter] = {}
        self._armed_by_counter: dict[int, list[DeferredWorkEntry]] = {}
        self._next_entry = 0
        self.records: list[CompletionRecord] = []
        self._unconsumed: list[CompletionRecord] = []
        self._record_of: dict[int, CompletionRecord] = {}
        # completion/accounting counter; disjoint from trigger counters
        self.completion_counter = 0
        self.increments_in_use = 0
        self.increments_high_water = 0
        self.flush_count = 0
        self.released_count = 0
        self.retired_count = 0
        self.nontriggered_ops = 0
        self.occupancy: dict[tuple[int, str], int] = {}
        self.occupancy_high_water: dict[tuple[int, str], int] = {}
        self.outstanding: dict[int, Tally] = {}
        self.on_completion: list[Callable[[], None]] = []

    # -- counters -----------------------------------------------------------
    def alloc_counter(self, owner_rank: int) -> TriggerCounter:
        cid = len(self.counters)
        counter = TriggerCounter(cid, self.id, owner_rank, self.params.counter_max)
        self.counters[cid] = counter
        self._armed_by_counter[cid] = []
        return counter

    def outstanding_for(self, rank: int) -> Tally:
        tally = self.outstanding.get(rank)
        if tally is None:
            tally = self.outstanding[rank] = Tally()
        return tally

    def reset_counter(self, counter_id: int) -> None:
        """Host-side reset between generations; no armed work may still reference it."""
        counter = self.counters[counter_id]
        if self._armed_by_counter[counter_id]:
            raise InvalidEntryState(f"counter {counter_id} still has armed entries")
        counter.value = 0
        counter.issued = 0
        self.engine.note("counter-reset", nic=self.id, counter=counter_id)

    # -- host: arming -------------------------------------------------------
    def queue_work(self, entry: DeferredWorkEntry) -> int:
        counter = self.counters[entry.trigger]
        if entry.threshold > counter.max_value:
            raise ThresholdOverflow(f"threshold {entry.threshold} > counter max {counter.max_value}")
        if self.dwq.occupied >= self.dwq.capacity:
            raise DwqFull(f"nic {self.id}: {self.dwq.capacity} entries in use")
        need = self.INCREMENTS_PER_ENTRY
        if self.increments_in_use + need > self.params.counter_max:
            raise CounterOverflow(
                f"nic {self.id}: counter budget {self.increments_in_use}+{need} > {self.params.counter_max}"
            )
        entry.id = self._next_entry
        self._next_entry += 1
        entry.state = EntryState.ARMED
        self.dwq.entries[entry.id] = entry
        self.dwq.occupied += 1
        if self.dwq.occupied > self.dwq.high_water:
            self.dwq.high_water = self.dwq.occupied
        self.increments_in_use += need
        if self.increments_in_use > self.increments_high_water:
            self.increments_high_water = self.increments_in_use
        key = (entry.owner_rank, entry.tag)
        level = self.occupancy.get(key, 0) + 1
        self.occupancy[key] = level
        if level > self.occupancy_high_water.get(key, 0):
            self.occupancy_high_water[key] = level
        self._armed_by_counter[entry.trigger].append(entry)
        self.engine.note("queue_work", nic=self.id, entry=entry.id, rank=entry.owner_rank,
                         counter=entry.trigger, threshold=entry.threshold, tag=entry.tag, origin="host")
        if counter.value >= entry.threshold:
            self._release_ready(counter)
        return entry.id

    # -- device: doorbells --------------------------------------------------
    def ring_doorbell(self, counter_id: int, value: int, rank: int) -> None:
        """Device-side counter update; lands after the doorbell latency."""
        counter = self.counters[counter_id]
        if value > counter.max_value:
            raise CounterOverflow(f"counter {counter_id}: {value} > {counter.max_value}")
        if value < counter.issued:
            raise NonMonotoneWrite(f"counter {counter_id}: {value} < {counter.issued}")
        counter.issued = value
        tally = self.outstanding_for(rank)
        tally.add(1)

        def land(_ev):
            self.doorbell_write(counter_id, value)
            tally.add(-1)

        payload = None
        if self.engine.trace is not None:
            payload = {"nic": self.id, "counter": counter_id, "value": value, "rank": rank}
        self.engine.after(self.params.doorbell_latency_ns, "doorbell-write", land, payload)

    def doorbell_write(self, counter_id: int, value: int) -> None:
        """Set the counter (monotone) and release every armed entry it now satisfies."""
        counter = self.counters[counter_id]
        if value > counter.max_value:
            raise CounterOverflow(f"counter {counter_id}: {value} > {counter.max_value}")
        if value < counter.value:
            raise NonMonotoneWrite(f"counter {counter_id}: {value} < {counter.value}")
        counter.value = value
        counter.issued = max(counter.issued, value)
        self._release_ready(counter)

    def _release_ready(self, counter: TriggerCounter) -> None:
        armed = self._armed_by_counter[counter.id]
        ready = [e for e in armed if e.threshold <= counter.value]
        if not ready:
            return
        self._armed_by_counter[counter.id] = [e for e in armed if e.threshold > counter.value]
        ready.sort(key=lambda e: (e.threshold, e.id))
        engine = self.engine
        engine.note("nic-check-triggers", nic=self.id, counter=counter.id, value=counter.value,
                    released=[e.id for e in ready])
        delay = self.params.nic_exec_latency_ns
        for entry in ready:
            entry.state = EntryState.RELEASED
            self.released_count += 1
            self.outstanding_for(entry.owner_rank).add(1)
            payload = {"nic": self.id, "entry": entry.id} if engine.trace is not None else None
            engine.after(delay, "nic-exec", lambda _ev, e=entry: self.execute_released(e), payload)

    # -- execution ----------------------------------------------------------
    def execute_released(self, entry: DeferredWorkEntry) -> None:
        if entry.state is not EntryState.RELEASED:
            raise InvalidEntryState(f"entry {entry.id} is {entry.state.value}")
        self._issue(entry.owner_rank, entry.op, lambda: self._complete(entry), tag=entry.tag)

    def _issue(self, owner_rank: int, op, done: Callable[[], None], tag: str = "") -> None:
        conn = self.fabric.connection(owner_rank, op.peer)
        if isinstance(op, Put):
            self.fabric.rdma_write(conn, op.src, op.dst, done, tag=tag)
        elif isinstance(op, AmWrite):
            self.fabric.rdma_write(conn, op.body_src, op.body_dst, None, tag=f"{tag}:body")
            self.fabric.rdma_write(conn, op.seq_src, op.seq_dst, done, tag=f"{tag}:seq")
        else:
            raise TypeError(f"unknown op {op!r}")

    def _complete(self, entry: DeferredWorkEntry) -> None:
        # writeback lands strictly after the data on the same connection
        def writeback(_ev):
            if entry.completion is not None:
                entry.completion.flag.region.add_u64(entry.completion.flag.offset, entry.completion.increment)
            entry.completed = True
            record = CompletionRecord(entry.id, self.engine.now)
            self.records.append(record)
            self._unconsumed.append(record)
            self._record_of[entry.id] = record
            self.completion_counter += 1
            self.outstanding_for(entry.owner_rank).add(-1)
            for hook in self.on_completion:
                hook()

        payload = {"nic": self.id, "entry": entry.id} if self.engine.trace is not None else None
        self.engine.after(0, "completion-writeback", writeback, payload)

    def post_nontriggered(self, owner_rank: int, op, completion: Optional[Writeback] = None, tag: str = "") -> None:
        """Host-issued plain RDMA (fallback path); bypasses the DWQ and counters."""
        self.nontriggered_ops += 1
        tally = self.outstanding_for(owner_rank)
        tally.add(1)

        def done():
            if completion is not None:
                completion.flag.region.add_u64(completion.flag.offset, completion.increment)
            tally.add(-1)

        self.engine.note("nontriggered-issue", nic=self.id, rank=owner_rank, peer=op.peer, tag=tag)
        self._issue(owner_rank, op, done, tag=tag)

    # -- host: progress and retirement ----------------------------------------
    def host_progress_poll(self) -> list[CompletionRecord]:
        polled = self._unconsumed
        self._unconsumed = []
        for record in polled:
            record.consumed = True
        return polled

    def retire(self, entry_id: int) -> None:
        entry = self.dwq.entries.get(entry_id)
        if entry is None:
            raise InvalidEntryState(f"unknown entry {entry_id}")
        if entry.state is EntryState.RETIRED:
            raise InvalidEntryState(f"entry {entry_id} already retired")
        record = self._record_of.get(entry_id)
        if record is None or not record.consumed:
            raise NotProgressedYet(f"entry {entry_id} has no consumed completion record")
        self._retire(entry)

    def _retire(self, entry: DeferredWorkEntry) -> None:
        entry.state = EntryState.RETIRED
        self.retired_count += 1
        del self.dwq.entries[entry.id]
        self.dwq.occupied -= 1
        self.increments_in_use -= self.INCREMENTS_PER_ENTRY
        self.occupancy[(entry.owner_rank, entry.tag)] -= 1

    def flush(self) -> int:
        """Reset all counters and retire everything that has completed.

        Returns the time at which the blocked caller may resume.
        """
        self.flush_count += 1
        for counter in self.counters.values():
            counter.value = 0
            counter.issued = 0
        for record in self._unconsumed:
            record.consumed = True
        self._unconsumed = []
        for entry in [e for e in self.dwq.entries.values() if e.completed]:
            self._retire(entry)
        done = self.engine.now + self.params.flush_cost_ns
        self.engine.at(done, "flush-complete", None, {"nic": self.id})
        return done

    # -- introspection --------------------------------------------------------
    @property
    def queued_count(self) -> int:
        return self._next_entry

    def entries_in(self, state: EntryState) -> list[DeferredWorkEntry]:
        return [e for e in self.dwq.entries.values() if e.state is state]

    def occupancy_high_water_for(self, rank: int, tag: str) -> int:
        return self.occupancy_high_water.get((rank, tag), 0)
