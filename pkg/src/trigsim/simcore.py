"""Deterministic discrete-event engine, memory regions and in-order transport.

Time is an integer count of nanoseconds. Events at equal timestamps are
processed in insertion order, so a fixed scenario and seed always yields the
same event sequence.
"""

from __future__ import annotations

import enum
import heapq
import itertools
import random
from collections import deque
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Any, Callable, Iterable, Optional

__all__ = [
    "SimError",
    "PastTime",
    "OutOfBounds",
    "DeviceAccessError",
    "SimFault",
    "EngineStatus",
    "SimEvent",
    "Engine",
    "Trace",
    "TraceRecord",
    "Delay",
    "WaitFor",
    "Process",
    "Watchable",
    "Tally",
    "MemorySpace",
    "MemoryRegion",
    "Slice",
    "Connection",
    "Fabric",
    "ns",
    "us",
    "ms",
    "seconds",
]


class SimError(Exception):
    """Base class for simulator errors."""


class PastTime(SimError):
    pass


class SimFault(SimError):
    """An error raised inside an actor; halts that actor (fail-stop)."""


class OutOfBounds(SimFault):
    pass


class DeviceAccessError(SimFault):
    """A device actor touched memory it cannot poll."""


def ns(value) -> int:
    return int(value)


def _scaled(value, factor: int) -> int:
    # Decimal(str()) keeps 25.2 -> 25200 exact instead of 25199.999...
    return int((Decimal(str(value)) * factor).to_integral_value())


def us(value) -> int:
    """Microseconds to integer nanoseconds."""
    return _scaled(value, 1_000)


def ms(value) -> int:
    return _scaled(value, 1_000_000)


def seconds(value) -> int:
    return _scaled(value, 1_000_000_000)


class EngineStatus(str, enum.Enum):
    IDLE = "idle"
    LIMIT_REACHED = "limit-reached"
    DEADLOCK = "deadlock"


@dataclass(eq=False)
class SimEvent:
    """A timestamped unit of work. ``seq`` is assigned by the engine."""

    time: int
    kind: str
    action: Optional[Callable[["SimEvent"], None]] = None
    payload: Any = None
    seq: int = -1
    cancelled: bool = False


@dataclass(frozen=True)
class TraceRecord:
    time: int
    kind: str
    data: dict = field(default_factory=dict)

    def line(self) -> str:
        payload = " ".join(f"{k}={_fmt(v)}" for k, v in self.data.items())
        return f"{self.time}\t{self.kind}\t{payload}"


def _fmt(value) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return str(value)


class Trace:
    """In-memory event log; ``lines()`` gives the ``time<TAB>kind<TAB>payload`` form."""

    def __init__(self):
        self.records: list[TraceRecord] = []

    def add(self, time: int, kind: str, data: dict) -> None:
        self.records.append(TraceRecord(time, kind, data))

    def of_kind(self, *kinds: str) -> list[TraceRecord]:
        wanted = set(kinds)
        return [r for r in self.records if r.kind in wanted]

    def lines(self) -> list[str]:
        return [r.line() for r in self.records]

    def dump(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for line in self.lines():
                fh.write(line + "\n")

    def __len__(self) -> int:
        return len(self.records)


class Engine:
    """Single-threaded event loop with FIFO tie-breaking.

    Actors never block the engine; they register wake conditions through
    :class:`Process`. ``run_until`` reports ``deadlock`` when the queue drains
    while some process is still parked.
    """

    def __init__(self, trace: bool = False):
        self.now = 0
        self._heap: list[tuple[int, int, SimEvent]] = []
        self._seq = itertools.count()
        self._pending: dict[int, SimEvent] = {}
        self.processes: list[Process] = []
        self.faults: list[tuple[int, str, SimFault]] = []
        self.trace: Optional[Trace] = Trace() if trace else None
        self.processed = 0

    # -- scheduling -------------------------------------------------------
    def schedule(self, event: SimEvent) -> int:
        if event.time < self.now:
            raise PastTime(f"event at t={event.time} scheduled at now={self.now}")
        event.seq = next(self._seq)
        self._pending[event.seq] = event
        heapq.heappush(self._heap, (event.time, event.seq, event))
        return event.seq

    def at(self, time: int, kind: str, action=None, payload=None) -> int:
        return self.schedule(SimEvent(time, kind, action, payload))

    def after(self, delay: int, kind: str, action=None, payload=None) -> int:
        return self.schedule(SimEvent(self.now + delay, kind, action, payload))

    def cancel(self, event_id: int) -> bool:
        event = self._pending.pop(event_id, None)
        if event is None:
            return False
        event.cancelled = True
        return True

    @property
    def pending(self) -> int:
        return len(self._pending)

    def note(self, kind: str, **data) -> None:
        """Record an annotation at the current time (no-op unless tracing)."""
        if self.trace is not None:
            self.trace.add(self.now, kind, data)

    # -- running ----------------------------------------------------------
    def run_until(self, limit: Optional[int] = None) -> EngineStatus:
        heap = self._heap
        pending = self._pending
        trace = self.trace
        pop = heapq.heappop
        while heap:
            if limit is not None and heap[0][0] > limit:
                self.now = limit
                return EngineStatus.LIMIT_REACHED
            event = pop(heap)[2]
            if event.cancelled:
                continue
            del pending[event.seq]
            self.now = event.time
            self.processed += 1
            if trace is not None:
                trace.add(event.time, event.kind, _payload_dict(event.payload))
            if event.action is not None:
                event.action(event)
        # drained: the clock stays at the last processed event
        if any(p.state == "waiting" for p in self.processes):
            return EngineStatus.DEADLOCK
        return EngineStatus.IDLE

    def blocked(self) -> list["Process"]:
        return [p for p in self.processes if p.state == "waiting"]


def _payload_dict(payload) -> dict:
    if payload is None:
        return {}
    if isinstance(payload, dict):
        return payload
    return {"data": payload}


# -- actor processes ---------------------------------------------------------


class Delay:
    __slots__ = ("ns",)

    def __init__(self, duration: int):
        if duration < 0:
            raise ValueError("negative delay")
        self.ns = duration


class WaitFor:
    """Park until ``predicate()`` holds; re-checked whenever a source changes."""

    __slots__ = ("predicate", "sources", "label")

    def __init__(self, predicate: Callable[[], bool], sources: Iterable["Watchable"], label: str = ""):
        self.predicate = predicate
        self.sources = tuple(sources)
        self.label = label


class Watchable:
    """Something processes can park on (memory regions, counters)."""

    def __init__(self):
        self._waiters: list = []

    def subscribe(self, waiter) -> None:
        self._waiters.append(waiter)

    def unsubscribe(self, waiter) -> None:
        try:
            self._waiters.remove(waiter)
        except ValueError:
            pass

    def changed(self) -> None:
        if self._waiters:
            for waiter in tuple(self._waiters):
                waiter.poke()


class Tally(Watchable):
    """An integer that processes can park on (e.g. outstanding operations)."""

    def __init__(self, value: int = 0):
        super().__init__()
        self.value = value

    def add(self, delta: int) -> None:
        self.value += delta
        self.changed()


class Process:
    """Drives a generator that yields :class:`Delay` / :class:`WaitFor` commands.

    States: ``created``, ``running``, ``waiting``, ``resuming``, ``done``,
    ``faulted``. A ``SimFault`` escaping the generator halts only this
    process and is logged on the engine.
    """

    def __init__(self, engine: Engine, name: str, generator, rank: Optional[int] = None):
        self.engine = engine
        self.name = name
        self.rank = rank
        self._gen = generator
        self.state = "created"
        self._wait: Optional[WaitFor] = None
        self.finished_at: Optional[int] = None
        engine.processes.append(self)

    def start(self, at: int = 0) -> None:
        self.state = "resuming"
        self.engine.at(at, "actor-resume", self._resume, {"actor": self.name})

    def _resume(self, _event=None) -> None:
        self.state = "running"
        engine = self.engine
        send = self._gen.send
        while True:
            try:
                cmd = send(None)
            except StopIteration:
                self.state = "done"
                self.finished_at = engine.now
                return
            except SimFault as exc:
                self.state = "faulted"
                self.finished_at = engine.now
                engine.faults.append((engine.now, self.name, exc))
                engine.note("actor-fault", actor=self.name, error=type(exc).__name__, detail=str(exc))
                return
            if type(cmd) is Delay:
                if cmd.ns == 0:
                    continue
                self.state = "resuming"
                engine.after(cmd.ns, "actor-resume", self._resume, {"actor": self.name})
                return
            if type(cmd) is WaitFor:
                if cmd.predicate():
                    continue
                self._wait = cmd
                self.state = "waiting"
                for src in cmd.sources:
                    src.subscribe(self)
                return
            raise TypeError(f"{self.name} yielded {cmd!r}")

    def poke(self) -> None:
        wait = self._wait
        if self.state != "waiting" or wait is None or not wait.predicate():
            return
        for src in wait.sources:
            src.unsubscribe(self)
        self._wait = None
        self.state = "resuming"
        self.engine.at(self.engine.now, "actor-resume", self._resume, {"actor": self.name})


# -- memory --------------------------------------------------------------------


class MemorySpace(str, enum.Enum):
    DEVICE = "device"
    HOST = "host"


class MemoryRegion(Watchable):
    """A registered buffer owned by one rank.

    Addresses are absolute: valid offsets lie in ``[base, base + length)``.
    Every write notifies parked waiters.
    """

    def __init__(self, owner_rank: int, space: MemorySpace, length: int, base: int = 0, name: str = ""):
        super().__init__()
        self.owner_rank = owner_rank
        self.space = MemorySpace(space)
        self.base = base
        self.length = length
        self.name = name
        self.backing = bytearray(length)

    def _index(self, offset: int, size: int) -> int:
        if size < 0 or offset < self.base or offset + size > self.base + self.length:
            raise OutOfBounds(
                f"{self.name or 'region'}@rank{self.owner_rank}: [{offset}, {offset + size}) "
                f"outside [{self.base}, {self.base + self.length})"
            )
        return offset - self.base

    def read(self, offset: int, size: int) -> bytes:
        i = self._index(offset, size)
        return bytes(self.backing[i:i + size])

    def write(self, offset: int, data: bytes) -> None:
        i = self._index(offset, len(data))
        self.backing[i:i + len(data)] = data
        self.changed()

    def read_u64(self, offset: int) -> int:
        i = self._index(offset, 8)
        return int.from_bytes(self.backing[i:i + 8], "little")

    def write_u64(self, offset: int, value: int) -> None:
        self.write(offset, int(value).to_bytes(8, "little"))

    def add_u64(self, offset: int, delta: int = 1) -> int:
        value = self.read_u64(offset) + delta
        self.write_u64(offset, value)
        return value

    def slice(self, offset: int, size: int) -> "Slice":
        self._index(offset, size)
        return Slice(self, offset, size)

    def __repr__(self) -> str:
        return f"MemoryRegion({self.name!r}, rank={self.owner_rank}, {self.space.value}, len={self.length})"


@dataclass(frozen=True)
class Slice:
    region: MemoryRegion
    offset: int
    size: int

    def read(self) -> bytes:
        return self.region.read(self.offset, self.size)

    def write(self, data: bytes) -> None:
        self.region.write(self.offset, data)

    def read_u64(self) -> int:
        return self.region.read_u64(self.offset)

    def write_u64(self, value: int) -> None:
        self.region.write_u64(self.offset, value)

    def at(self, delta: int, size: int) -> "Slice":
        return self.region.slice(self.offset + delta, size)

    def label(self) -> str:
        return f"{self.region.owner_rank}:{self.region.name}+{self.offset}"


# -- transport -------------------------------------------------------------------


class Connection:
    """Reliable in-order channel between two NIC endpoints."""

    def __init__(self, src_rank: int, dst_rank: int, wire_latency: int):
        self.src_rank = src_rank
        self.dst_rank = dst_rank
        self.wire_latency = wire_latency
        self.in_flight: deque = deque()
        self.last_delivery = 0
        self.issued = 0
        self.delivered = 0

    def __repr__(self) -> str:
        return f"Connection({self.src_rank}->{self.dst_rank}, {self.wire_latency}ns)"


class Fabric:
    """All connections between ranks.

    Each connection gets a fixed latency ``wire_latency + jitter`` where the
    jitter is drawn once per (src, dst) pair from the seed, so different
    connections may reorder relative to each other while each stays FIFO.
    """

    def __init__(self, engine: Engine, wire_latency: int = 1000, jitter: int = 0, seed: int = 0):
        if wire_latency < 0 or jitter < 0:
            raise ValueError("latencies must be non-negative")
        self.engine = engine
        self.wire_latency = wire_latency
        self.jitter = jitter
        self.seed = seed
        self._conns: dict[tuple[int, int], Connection] = {}
        self.writes = 0

    def connection(self, src_rank: int, dst_rank: int) -> Connection:
        key = (src_rank, dst_rank)
        conn = self._conns.get(key)
        if conn is None:
            extra = 0
            if self.jitter:
                extra = random.Random(f"{self.seed}:{src_rank}:{dst_rank}").randint(0, self.jitter)
            conn = Connection(src_rank, dst_rank, self.wire_latency + extra)
            self._conns[key] = conn
        return conn

    def rdma_write(
        self,
        conn: Connection,
        src,
        dst: Slice,
        on_delivery: Optional[Callable[[], None]] = None,
        tag: str = "",
    ) -> SimEvent:
        """Copy ``src`` (a Slice or bytes, snapshotted now) into ``dst`` after the wire latency.

        Delivery time never precedes an earlier delivery on the same
        connection; equal times keep issue order through the seq tie-break.
        """
        data = src.read() if isinstance(src, Slice) else bytes(src)
        if len(data) != dst.size:
            raise OutOfBounds(f"length mismatch: src {len(data)} vs dst {dst.size}")
        dst.region._index(dst.offset, dst.size)
        engine = self.engine
        when = max(engine.now + conn.wire_latency, conn.last_delivery)
        conn.last_delivery = when
        conn.issued += 1
        ticket = conn.issued
        conn.in_flight.append(ticket)
        self.writes += 1

        def deliver(_ev):
            head = conn.in_flight.popleft()
            assert head == ticket, "per-connection delivery out of order"
            conn.delivered += 1
            if data:
                dst.region.write(dst.offset, data)
            if on_delivery is not None:
                on_delivery()

        payload = None
        if engine.trace is not None:
            payload = {"src": conn.src_rank, "dst": conn.dst_rank, "n": ticket, "addr": dst.label(),
                       "len": len(data), "tag": tag,
                       "value": int.from_bytes(data[:8], "little")}
        event = SimEvent(when, "wire-delivery", deliver, payload)
        engine.schedule(event)
        return event
