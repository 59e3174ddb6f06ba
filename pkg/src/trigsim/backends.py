"""Device-side bindings of the shared coordination calls.

``OfiPort`` maps barrier / halo / AM onto doorbell triggers of pre-staged
work and waits on readiness words maintained by the host monitor.
``IbPort`` maps the same calls onto device-built WQEs posted directly to a
queue pair. Both write the same flags with the same values, so device code
observes identical semantics.
"""

from __future__ import annotations

from typing import Optional

from .coordination import AmLayout, Mailbox, encode_body
from .device import Addr, BackendMismatch, DeviceActor, IbPut
from .host_runtime import AmStream, BarrierStream, HaloStream, Stream, halo_value
from .nic_cxi import CxiNic, TriggerCounter
from .nic_ib import IbNic, QueuePair
from .simcore import Delay, MemoryRegion, OutOfBounds, SimFault, Slice

__all__ = ["HaloCorrupt", "Port", "OfiPort", "IbPort"]


class HaloCorrupt(SimFault):
    """A halo buffer did not carry the checksum of the expected epoch."""


class Port:
    """State common to both backends: user regions, mailbox, stream layouts."""

    backend = ""

    def __init__(self, rank: int, ranks: int, layout: AmLayout):
        self.rank = rank
        self.ranks = ranks
        self.layout = layout
        self.regions: dict[str, MemoryRegion] = {}
        self.mailbox = Mailbox(rank, ranks, layout)
        self.barrier_stream: Optional[BarrierStream] = None
        self.halo_stream: Optional[HaloStream] = None
        self.am_streams: dict[int, AmStream] = {}
        self.mailboxes: list[Mailbox] = []
        self.am_next: dict[int, int] = {}
        self.engine = None

    def resolve(self, addr: Addr, size: int) -> Slice:
        region = self.regions.get(addr.region)
        if region is None:
            raise OutOfBounds(f"rank {self.rank}: no region named {addr.region!r}")
        return region.slice(addr.offset, size)

    def on_dispatch(self, actor: DeviceActor, msg) -> None:
        pass

    # -- shared protocol skeletons -----------------------------------------------------
    def _barrier_enter(self, actor: DeviceActor):
        actor.barrier_epoch += 1
        epoch = actor.barrier_epoch
        actor.engine.note("barrier-enter", rank=self.rank, epoch=epoch)
        return epoch, actor.engine.now

    def _barrier_exit(self, actor: DeviceActor, epoch: int, entered: int) -> None:
        actor.engine.note("barrier-exit", rank=self.rank, epoch=epoch)
        actor.barriers.append((epoch, entered, actor.engine.now))

    def _wait_round(self, actor: DeviceActor, epoch: int, slot: int, r: int):
        sig = self.barrier_stream.sig
        off = self.barrier_stream.sig_offset(slot, r)
        yield from actor.wait(lambda: sig.read_u64(off) >= epoch, (sig,), f"sig{slot}.{r}")
        actor.engine.note("barrier-round", rank=self.rank, epoch=epoch, round=r)

    def _halo_check(self, actor: DeviceActor, epoch: int, slot: int):
        st = self.halo_stream
        recv = st.recv
        for peer in st.neighbors:
            direction = 0 if peer < self.rank else 1
            off = st.recv_offset(slot, direction)
            yield from actor.wait(lambda off=off: recv.read_u64(off + 8) >= epoch, (recv,), f"halo{direction}")
            seen_epoch = recv.read_u64(off + 8)
            value = recv.read_u64(off)
            if seen_epoch != epoch or value != halo_value(peer, epoch):
                raise HaloCorrupt(f"rank {self.rank}: halo from {peer} epoch {seen_epoch} != {epoch}")
        actor.engine.note("halo-done", rank=self.rank, epoch=epoch)

    def _next_seq(self, peer: int) -> int:
        seq = self.am_next.get(peer, 0) + 1
        self.am_next[peer] = seq
        return seq


class OfiPort(Port):
    """GPU-triggered binding: the device only rings doorbells and polls flags."""

    backend = "ofi"

    def __init__(self, rank: int, ranks: int, layout: AmLayout, nic: CxiNic):
        super().__init__(rank, ranks, layout)
        self.nic = nic
        self.counters: dict[str, TriggerCounter] = {}

    def trigger(self, actor: DeviceActor, counter: str, value: int) -> None:
        c = self.counters.get(counter)
        if c is None:
            raise SimFault(f"rank {self.rank}: unknown counter {counter!r}")
        actor.engine.note("trigger", rank=self.rank, stream="user", counter=c.id, value=value)
        self.nic.ring_doorbell(c.id, value, self.rank)

    def _ring(self, actor: DeviceActor, st: Stream, epoch: int, value: int) -> None:
        slot = st.slot_of(epoch)
        actor.engine.note("trigger", rank=self.rank, stream=st.name, slot=slot, epoch=epoch, value=value)
        self.nic.ring_doorbell(st.counters[slot].id, value, self.rank)

    def _acquire(self, actor: DeviceActor, st: Stream, epoch: int):
        """Announce the epoch and wait until it is armed or handed to fallback."""
        st.request(epoch)
        yield from actor.wait(lambda: st.usable(epoch), (st.ctrl,), f"{st.name} ready {epoch}")
        return st.via_fallback(epoch)

    def barrier(self, actor: DeviceActor):
        epoch, entered = self._barrier_enter(actor)
        st = self.barrier_stream
        if st is not None:
            slot = st.slot_of(epoch)
            fallback = yield from self._acquire(actor, st, epoch)
            for r in range(st.rounds):
                if not fallback:
                    self._ring(actor, st, epoch, r + 1)
                yield from self._wait_round(actor, epoch, slot, r)
        self._barrier_exit(actor, epoch, entered)

    def halo(self, actor: DeviceActor):
        actor.halo_epoch += 1
        epoch = actor.halo_epoch
        st = self.halo_stream
        slot = st.slot_of(epoch)
        n = len(st.neighbors)
        actor.engine.note("halo-start", rank=self.rank, epoch=epoch)
        if n:
            # the boundary buffer of this slot is free once the previous use has been delivered
            sent = st.sent
            need = n * (epoch - st.slots)
            yield from actor.wait(lambda: sent.read_u64(0) >= need, (sent,), "halo sent")
            st.bnd.write_u64(16 * slot, halo_value(self.rank, epoch))
            st.bnd.write_u64(16 * slot + 8, epoch)
            fallback = yield from self._acquire(actor, st, epoch)
            if not fallback:
                self._ring(actor, st, epoch, n)
        yield from self._halo_check(actor, epoch, slot)

    def am_send(self, actor: DeviceActor, peer: int, handler: int, args: tuple):
        st = self.am_streams.get(peer)
        if st is None:
            raise BackendMismatch(f"rank {self.rank}: no AM channel to {peer}")
        seq = self._next_seq(peer)
        self.mailboxes[peer].check_send(self.rank, seq)
        body = encode_body(self.layout, handler, self.rank, args)
        slot = st.slot_of(seq)
        sent = st.sent
        need = seq - st.slots
        yield from actor.wait(lambda: sent.read_u64(0) >= need, (sent,), "am sent")
        st.body.write(self.layout.body_bytes * slot, body)
        actor.engine.note("am-send", rank=self.rank, dst=peer, seq=seq, handler=handler, args=list(args))
        fallback = yield from self._acquire(actor, st, seq)
        if not fallback:
            self._ring(actor, st, seq, 2)

    def quiet(self, actor: DeviceActor):
        tally = self.nic.outstanding_for(self.rank)
        yield from actor.wait(lambda: tally.value == 0, (tally,), "quiet")


class IbPort(Port):
    """GPU-initiated binding: the device builds WQEs and posts them itself."""

    backend = "ib"

    def __init__(self, rank: int, ranks: int, layout: AmLayout, nic: IbNic):
        super().__init__(rank, ranks, layout)
        self.nic = nic
        self.qps: dict[int, QueuePair] = {}
        self.owner = f"device{rank}"
        self.peer_ports: list["IbPort"] = []

    def qp(self, peer: int) -> QueuePair:
        qp = self.qps.get(peer)
        if qp is None:
            qp = self.qps[peer] = self.nic.create_qp(self.owner, peer)
        return qp

    def trigger(self, actor: DeviceActor, counter: str, value: int) -> None:
        raise BackendMismatch(f"rank {self.rank}: trigger needs the ofi backend")

    def _post(self, actor: DeviceActor, peer: int, data, dst: Slice, signaled: bool = True, tag: str = ""):
        qp = self.qp(peer)
        self.nic.cq_poll(qp, actor.name)
        yield Delay(self.nic.params.wqe_build_latency_ns)
        actor.engine.note("ib-post", rank=self.rank, peer=peer, tag=tag)
        self.nic.device_post_write(qp, actor.name, data, dst, signaled, tag)

    def _drain(self, actor: DeviceActor) -> None:
        for qp in self.qps.values():
            self.nic.cq_poll(qp, actor.name)

    def barrier(self, actor: DeviceActor):
        epoch, entered = self._barrier_enter(actor)
        st = self.barrier_stream
        if st is not None:
            slot = st.slot_of(epoch)
            data = epoch.to_bytes(8, "little")
            for r in range(st.rounds):
                peer, dst = st.target(slot, r)
                yield from self._post(actor, peer, data, dst, True, "barrier")
                yield from self._wait_round(actor, epoch, slot, r)
            self._drain(actor)
        self._barrier_exit(actor, epoch, entered)

    def halo(self, actor: DeviceActor):
        actor.halo_epoch += 1
        epoch = actor.halo_epoch
        st = self.halo_stream
        slot = st.slot_of(epoch)
        actor.engine.note("halo-start", rank=self.rank, epoch=epoch)
        payload = halo_value(self.rank, epoch).to_bytes(8, "little") + epoch.to_bytes(8, "little")
        for peer in st.neighbors:
            yield from self._post(actor, peer, payload, st.dst_for(slot, peer), True, "halo")
        yield from self._halo_check(actor, epoch, slot)
        self._drain(actor)

    def am_send(self, actor: DeviceActor, peer: int, handler: int, args: tuple):
        seq = self._next_seq(peer)
        self.mailboxes[peer].check_send(self.rank, seq)
        body = encode_body(self.layout, handler, self.rank, args)
        actor.engine.note("am-send", rank=self.rank, dst=peer, seq=seq, handler=handler, args=list(args))
        region = self.mailboxes[peer].region
        base = self.layout.slot_offset(self.rank, seq)
        lay = self.layout
        yield from self._post(actor, peer, body, region.slice(base + lay.seq_bytes, lay.body_bytes), False, "am-body")
        yield from self._post(actor, peer, seq.to_bytes(8, "little"), region.slice(base, lay.seq_bytes), True, "am-seq")

    def ib_put(self, actor: DeviceActor, step: IbPut):
        src = self.resolve(step.src, step.size)
        dst = self.peer_ports[step.peer].resolve(step.dst, step.size)
        yield from self._post(actor, step.peer, src, dst, True, "put")

    def quiet(self, actor: DeviceActor):
        tally = self.nic.outstanding
        yield from actor.wait(lambda: tally.value == 0, (tally,), "quiet")
        self._drain(actor)
