"""Backend-independent protocol pieces: the dissemination schedule and AM mailboxes."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

from .nic_cxi import dissemination_round_count
from .simcore import MemoryRegion, MemorySpace, SimFault

__all__ = [
    "MailboxFull",
    "ArgsTooLarge",
    "DisseminationSchedule",
    "barrier_round_targets",
    "AmLayout",
    "AmMessage",
    "encode_body",
    "decode_body",
    "Mailbox",
]


class MailboxFull(SimFault):
    """Sender would wrap onto a slot the receiver has not consumed yet."""


class ArgsTooLarge(SimFault):
    pass


def barrier_round_targets(ranks: int, rank: int, round_index: int) -> tuple[int, int]:
    """(send_to, wait_from) for one dissemination round."""
    rounds = dissemination_round_count(ranks)
    if not 0 <= round_index < rounds:
        raise ValueError(f"round {round_index} outside [0, {rounds})")
    step = 1 << round_index
    return (rank + step) % ranks, (rank - step) % ranks


@dataclass(frozen=True)
class DisseminationSchedule:
    ranks: int

    @property
    def rounds(self) -> int:
        return dissemination_round_count(self.ranks)

    def targets(self, rank: int, round_index: int) -> tuple[int, int]:
        return barrier_round_targets(self.ranks, rank, round_index)

    def send_peers(self, rank: int) -> list[int]:
        return [self.targets(rank, r)[0] for r in range(self.rounds)]


@dataclass(frozen=True)
class AmLayout:
    """Slot = sequence word, then header (handler u32, source u16, flags u16), then args."""

    seq_bytes: int = 8
    header_bytes: int = 8
    args_bytes: int = 112
    ring_slots: int = 64

    @property
    def slot_bytes(self) -> int:
        return self.seq_bytes + self.header_bytes + self.args_bytes

    @property
    def body_bytes(self) -> int:
        return self.header_bytes + self.args_bytes

    def ring_bytes(self) -> int:
        return self.ring_slots * self.slot_bytes

    def slot_offset(self, sender: int, seq: int) -> int:
        """Offset of the slot carrying sequence number ``seq`` (1-based) from ``sender``."""
        return sender * self.ring_bytes() + ((seq - 1) % self.ring_slots) * self.slot_bytes


@dataclass(frozen=True)
class AmMessage:
    source: int
    seq: int
    handler: int
    args: tuple[int, ...]


_HEADER = struct.Struct("<IHH")


def encode_body(layout: AmLayout, handler: int, source: int, args) -> bytes:
    """Header plus u64 args, zero-padded to the fixed body size. flags = arg count."""
    if len(args) * 8 > layout.args_bytes:
        raise ArgsTooLarge(f"{len(args)} args exceed {layout.args_bytes} bytes")
    header = _HEADER.pack(handler, source, len(args))
    payload = b"".join(int(a).to_bytes(8, "little") for a in args)
    return header + payload + bytes(layout.args_bytes - len(payload))


def decode_body(layout: AmLayout, body: bytes) -> tuple[int, int, tuple[int, ...]]:
    handler, source, nargs = _HEADER.unpack_from(body, 0)
    base = layout.header_bytes
    args = tuple(int.from_bytes(body[base + 8 * i: base + 8 * i + 8], "little") for i in range(nargs))
    return handler, source, args


class Mailbox:
    """Receive side for one rank: a ring of slots per sender, single-owner.

    A message is visible exactly when the sequence word of the expected slot
    equals the expected sequence number for that sender.
    """

    def __init__(self, owner: int, ranks: int, layout: Optional[AmLayout] = None):
        self.owner = owner
        self.ranks = ranks
        self.layout = layout or AmLayout()
        self.region = MemoryRegion(owner, MemorySpace.DEVICE, ranks * self.layout.ring_bytes(), name="mailbox")
        self.expected = [1] * ranks
        self.dispatched = 0

    def consumed(self, sender: int) -> int:
        return self.expected[sender] - 1

    def ready(self, sender: int) -> bool:
        offset = self.layout.slot_offset(sender, self.expected[sender])
        return self.region.read_u64(offset) == self.expected[sender]

    def next_ready(self) -> Optional[int]:
        for sender in range(self.ranks):
            if self.ready(sender):
                return sender
        return None

    def take(self, sender: int) -> AmMessage:
        seq = self.expected[sender]
        offset = self.layout.slot_offset(sender, seq)
        if self.region.read_u64(offset) != seq:
            raise SimFault(f"mailbox {self.owner}: no message {seq} from {sender}")
        body = self.region.read(offset + self.layout.seq_bytes, self.layout.body_bytes)
        handler, source, args = decode_body(self.layout, body)
        self.expected[sender] = seq + 1
        self.dispatched += 1
        return AmMessage(source, seq, handler, args)

    def check_send(self, sender: int, seq: int) -> None:
        """Raise MailboxFull if ``seq`` would overwrite an unconsumed slot."""
        if seq - self.consumed(sender) > self.layout.ring_slots:
            raise MailboxFull(
                f"rank {sender} -> {self.owner}: seq {seq} but only {self.consumed(sender)} consumed "
                f"(ring {self.layout.ring_slots})"
            )
