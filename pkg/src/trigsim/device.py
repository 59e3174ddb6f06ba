"""Simulated GPU control thread.

A :class:`DeviceActor` interprets a list of steps. Its vocabulary is the
whole device capability set: compute delay, doorbell triggers, polling
device-visible memory, local writes, and the coordination calls that the
backend port maps onto NIC actions. Nothing in here can queue deferred NIC
work; only the InfiniBand port accepts ``IbPut``.
"""

from __future__ import annotations

import enum
import operator
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Union

from .simcore import Delay, DeviceAccessError, Engine, MemorySpace, Process, SimFault, Slice, WaitFor, Watchable

__all__ = [
    "Cmp",
    "Addr",
    "Compute",
    "Trigger",
    "WaitUntil",
    "Quiet",
    "BarrierAll",
    "AmSend",
    "AmPollDispatch",
    "AmRecv",
    "IbPut",
    "Write",
    "Halo",
    "DeviceStep",
    "DeviceActor",
    "BackendMismatch",
]


class BackendMismatch(SimFault):
    """A step that the rank's backend does not provide."""


class Cmp(str, enum.Enum):
    EQ = "EQ"
    NE = "NE"
    GT = "GT"
    GE = "GE"
    LT = "LT"
    LE = "LE"

    def holds(self, observed: int, value: int) -> bool:
        return _CMP_OPS[self](observed, value)


_CMP_OPS = {
    Cmp.EQ: operator.eq,
    Cmp.NE: operator.ne,
    Cmp.GT: operator.gt,
    Cmp.GE: operator.ge,
    Cmp.LT: operator.lt,
    Cmp.LE: operator.le,
}


@dataclass(frozen=True)
class Addr:
    """A named user region plus byte offset, on the actor's own rank."""

    region: str
    offset: int = 0

    def __str__(self) -> str:
        return f"{self.region}+{self.offset}"


@dataclass(frozen=True)
class Compute:
    duration: int


@dataclass(frozen=True)
class Trigger:
    counter: str
    value: int


@dataclass(frozen=True)
class WaitUntil:
    addr: Addr
    cmp: Cmp
    value: int


@dataclass(frozen=True)
class Quiet:
    pass


@dataclass(frozen=True)
class BarrierAll:
    pass


@dataclass(frozen=True)
class AmSend:
    # peer "src" means: reply to the source of the message being handled
    peer: Union[int, str]
    handler: int
    args: tuple = ()


@dataclass(frozen=True)
class AmPollDispatch:
    pass


@dataclass(frozen=True)
class AmRecv:
    """Dispatch until ``count`` further messages have been handled."""

    count: int


@dataclass(frozen=True)
class IbPut:
    peer: int
    src: Addr
    dst: Addr
    size: int


@dataclass(frozen=True)
class Write:
    addr: Addr
    value: int


@dataclass(frozen=True)
class Halo:
    """Neighbour exchange on a rank line: one trigger releases both boundary puts, then wait."""


DeviceStep = Union[Compute, Trigger, WaitUntil, Quiet, BarrierAll, AmSend, AmPollDispatch, AmRecv, IbPut, Write, Halo]


class DeviceActor:
    """One control thread per rank, stepped by the engine.

    ``port`` is the backend binding (OFI or IB) and supplies the generators
    for coordination steps. Waits are event driven unless ``wait_mode`` is
    ``"polled"``, in which case the actor re-checks every ``poll_interval``.
    """

    def __init__(self, engine: Engine, rank: int, program: list, port, handlers: Optional[dict] = None,
                 wait_mode: str = "event", poll_interval: int = 100, start_at: int = 0):
        if wait_mode not in ("event", "polled"):
            raise ValueError(f"wait_mode must be 'event' or 'polled', not {wait_mode!r}")
        self.engine = engine
        self.rank = rank
        self.name = f"device{rank}"
        self.program = list(program)
        self.port = port
        self.handlers = handlers or {}
        self.wait_mode = wait_mode
        self.poll_interval = poll_interval
        self.pc = 0
        self.barrier_epoch = 0
        self.halo_epoch = 0
        self.barriers: list[tuple[int, int, int]] = []
        self.compute_total = 0
        self.dispatched = 0
        self.last_dispatch = 0
        self._sources: list[int] = []
        self.process = Process(engine, self.name, self._run(), rank)
        self.process.start(start_at)

    @property
    def state(self) -> str:
        return self.process.state

    @property
    def current_source(self) -> Optional[int]:
        return self._sources[-1] if self._sources else None

    def _run(self):
        for pc, step in enumerate(self.program):
            self.pc = pc
            yield from self.execute(step)
        self.pc = len(self.program)
        self.engine.note("actor-done", rank=self.rank)

    def execute(self, step):
        kind = type(step)
        if kind is Compute:
            self.compute_total += step.duration
            if step.duration:
                yield Delay(step.duration)
        elif kind is Trigger:
            self.port.trigger(self, step.counter, step.value)
        elif kind is WaitUntil:
            target = self.port.resolve(step.addr, 8)
            yield from self.wait_flag(target, step.cmp, step.value)
        elif kind is Write:
            self.port.resolve(step.addr, 8).write_u64(step.value)
        elif kind is BarrierAll:
            yield from self.port.barrier(self)
        elif kind is Quiet:
            yield from self.port.quiet(self)
        elif kind is AmSend:
            peer = step.peer
            if peer == "src":
                peer = self.current_source
                if peer is None:
                    raise SimFault(f"{self.name}: reply outside a handler")
            yield from self.port.am_send(self, int(peer), step.handler, step.args)
        elif kind is AmPollDispatch:
            yield from self.poll_dispatch()
        elif kind is AmRecv:
            yield from self.recv(step.count)
        elif kind is IbPut:
            ib_put = getattr(self.port, "ib_put", None)
            if ib_put is None:
                raise BackendMismatch(f"{self.name}: ib_put needs the ib backend")
            yield from ib_put(self, step)
        elif kind is Halo:
            yield from self.port.halo(self)
        else:
            raise SimFault(f"{self.name}: unknown step {step!r}")

    # -- waiting ----------------------------------------------------------------
    def wait(self, predicate: Callable[[], bool], sources: Iterable[Watchable], label: str = ""):
        if self.wait_mode == "event":
            yield WaitFor(predicate, sources, label)
            return
        while not predicate():
            yield Delay(self.poll_interval)

    def wait_flag(self, target: Slice, cmp: Cmp, value: int):
        if target.region.space is not MemorySpace.DEVICE:
            raise DeviceAccessError(f"{self.name} cannot poll host memory {target.label()}")
        region, offset = target.region, target.offset
        yield from self.wait(lambda: cmp.holds(region.read_u64(offset), value), (region,), f"{target.label()} {cmp.value} {value}")

    # -- active messages ---------------------------------------------------------
    def poll_dispatch(self):
        mailbox = self.port.mailbox
        count = 0
        while True:
            sender = mailbox.next_ready()
            if sender is None:
                break
            yield from self._dispatch(mailbox.take(sender))
            count += 1
        self.last_dispatch = count
        return count

    def recv(self, count: int):
        mailbox = self.port.mailbox
        done = 0
        while done < count:
            sender = mailbox.next_ready()
            if sender is None:
                yield from self.wait(lambda: mailbox.next_ready() is not None, (mailbox.region,), "mailbox")
                continue
            yield from self._dispatch(mailbox.take(sender))
            done += 1
        self.last_dispatch = done

    def _dispatch(self, msg):
        self.dispatched += 1
        self.engine.note("am-dispatch", rank=self.rank, src=msg.source, seq=msg.seq, handler=msg.handler,
                         args=list(msg.args))
        self.port.on_dispatch(self, msg)
        program = self.handlers.get(msg.handler)
        if program is None:
            raise SimFault(f"{self.name}: no handler {msg.handler}")
        self._sources.append(msg.source)
        try:
            for step in program:
                yield from self.execute(step)
        finally:
            self._sources.pop()
