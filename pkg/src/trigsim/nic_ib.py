"""InfiniBand-like GPU-initiated backend.

Device actors build work-queue elements themselves and ring the doorbell; a
queue pair has exactly one posting owner, and completions are detected by
polling the owner bit of completion-queue entries.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .simcore import Engine, Fabric, SimFault, Slice, Tally

__all__ = [
    "IbParams",
    "SendQueueFull",
    "NotOwner",
    "CqOverrun",
    "CompletionEntry",
    "QueuePair",
    "IbNic",
]


class SendQueueFull(SimFault):
    pass


class NotOwner(SimFault):
    pass


class CqOverrun(SimFault):
    pass


@dataclass
class IbParams:
    # synthetic defaults; device WQE construction is slower than the doorbell itself
    wqe_build_latency_ns: int = 300
    doorbell_latency_ns: int = 100
    sq_size: int = 256
    cq_size: int = 256

    def __post_init__(self):
        if self.wqe_build_latency_ns < 0 or self.doorbell_latency_ns < 0:
            raise ValueError("latencies must be >= 0")
        if self.sq_size < 1 or self.cq_size < 1:
            raise ValueError("ring sizes must be positive")


@dataclass
class CompletionEntry:
    wqe_index: int
    owner_bit: int
    timestamp: int


class QueuePair:
    """Send queue plus completion ring, bound to one peer and one owning actor."""

    def __init__(self, qp_id: str, owner: str, owner_rank: int, peer: int, sq_size: int = 256, cq_size: int = 256):
        self.id = qp_id
        self.owner = owner
        self.owner_rank = owner_rank
        self.peer = peer
        self.sq_size = sq_size
        self.cq_size = cq_size
        self.posted = 0
        self.finished = 0
        # sentinel owner bit 1 is invalid for the first pass (expected parity 0)
        self.cq: list[CompletionEntry] = [CompletionEntry(-1, 1, -1) for _ in range(cq_size)]
        self.producer = 0
        self.consumer = 0
        self.cq_event = Tally()
        self.completion_order: list[int] = []

    @property
    def in_flight(self) -> int:
        return self.posted - self.finished

    def _produce(self, wqe_index: int, now: int) -> None:
        if self.producer - self.consumer >= self.cq_size:
            raise CqOverrun(f"qp {self.id}: completion ring overrun")
        slot = self.producer % self.cq_size
        self.cq[slot] = CompletionEntry(wqe_index, (self.producer // self.cq_size) & 1, now)
        self.producer += 1
        self.completion_order.append(wqe_index)
        self.cq_event.add(1)

    def poll(self) -> list[CompletionEntry]:
        found = []
        while True:
            entry = self.cq[self.consumer % self.cq_size]
            if entry.owner_bit != (self.consumer // self.cq_size) & 1:
                break
            found.append(entry)
            self.consumer += 1
        return found

    def __repr__(self) -> str:
        return f"QueuePair({self.id!r}, owner={self.owner!r}, peer={self.peer})"


class IbNic:
    """Per-rank HCA. No deferred work, no host monitor."""

    def __init__(self, engine: Engine, fabric: Fabric, rank: int, params: Optional[IbParams] = None):
        self.engine = engine
        self.fabric = fabric
        self.rank = rank
        self.params = params or IbParams()
        self.qps: dict[str, QueuePair] = {}
        self.outstanding = Tally()
        self.posts = 0

    def create_qp(self, owner: str, peer: int, qp_id: Optional[str] = None) -> QueuePair:
        qp_id = qp_id or f"qp{self.rank}_{peer}"
        if qp_id in self.qps:
            raise ValueError(f"queue pair {qp_id} already exists")
        qp = QueuePair(qp_id, owner, self.rank, peer, self.params.sq_size, self.params.cq_size)
        self.qps[qp_id] = qp
        return qp

    def device_post_write(self, qp: QueuePair, caller: str, src, dst: Slice,
                          signaled: bool = True, tag: str = "") -> int:
        """Post an RDMA write whose WQE the caller has already built.

        The payload is captured now (inline WQE); the NIC starts the DMA once
        the doorbell lands.
        """
        if caller != qp.owner:
            raise NotOwner(f"{caller} cannot post on {qp.id} owned by {qp.owner}")
        if qp.in_flight >= qp.sq_size:
            raise SendQueueFull(f"qp {qp.id}: {qp.sq_size} WQEs in flight")
        data = src.read() if isinstance(src, Slice) else bytes(src)
        wqe = qp.posted
        qp.posted += 1
        self.posts += 1
        self.outstanding.add(1)
        engine = self.engine
        conn = self.fabric.connection(self.rank, qp.peer)

        def delivered():
            qp.finished += 1
            if signaled:
                try:
                    qp._produce(wqe, engine.now)
                except CqOverrun as exc:
                    engine.faults.append((engine.now, qp.owner, exc))
                    engine.note("actor-fault", actor=qp.owner, error="CqOverrun", detail=str(exc))
            self.outstanding.add(-1)

        def ring(_ev):
            self.fabric.rdma_write(conn, data, dst, delivered, tag=tag)

        payload = None
        if engine.trace is not None:
            payload = {"rank": self.rank, "qp": qp.id, "wqe": wqe, "signaled": int(signaled)}
        engine.after(self.params.doorbell_latency_ns, "doorbell-write", ring, payload)
        return wqe

    def cq_poll(self, qp: QueuePair, caller: str) -> list[CompletionEntry]:
        if caller != qp.owner:
            raise NotOwner(f"{caller} cannot poll {qp.id} owned by {qp.owner}")
        return qp.poll()
