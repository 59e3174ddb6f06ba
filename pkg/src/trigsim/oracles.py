"""Trace post-processing checks and projections.

Each check returns a list of human-readable violations (empty means pass).
Projections return plain data so two runs can be compared with ``==``.
"""

from __future__ import annotations

from collections import defaultdict

from .coordination import AmLayout
from .simcore import Trace

__all__ = [
    "barrier_safety",
    "handoff_safety",
    "connection_order",
    "flag_projection",
    "am_integrity",
    "am_body_delivered",
    "coordination_projection",
    "capability_confinement",
    "no_host_activity",
]

COORD_KINDS = ("barrier-enter", "barrier-round", "barrier-exit", "halo-start", "halo-done", "am-send", "actor-done")


def barrier_safety(trace: Trace) -> list[str]:
    """No rank leaves barrier i before every rank has entered it (trace order)."""
    last_enter: dict[int, int] = {}
    first_exit: dict[int, int] = {}
    enters: dict[int, int] = defaultdict(int)
    for idx, rec in enumerate(trace.records):
        if rec.kind == "barrier-enter":
            e = rec.data["epoch"]
            last_enter[e] = idx
            enters[e] += 1
        elif rec.kind == "barrier-exit":
            first_exit.setdefault(rec.data["epoch"], idx)
    ranks = max(enters.values(), default=0)
    bad = []
    for e, idx in first_exit.items():
        if enters[e] != ranks:
            bad.append(f"barrier {e}: only {enters[e]} of {ranks} ranks entered")
        elif idx < last_enter[e]:
            bad.append(f"barrier {e}: exit at record {idx} precedes last enter at {last_enter[e]}")
    return bad


def handoff_safety(trace: Trace) -> list[str]:
    """Every stream trigger of epoch e follows a readiness write >= e for that slot."""
    ready: dict[tuple, int] = {}
    bad = []
    for rec in trace.records:
        if rec.kind == "readiness-write":
            d = rec.data
            key = (d["rank"], d["stream"], d["slot"])
            ready[key] = max(ready.get(key, 0), d["value"])
        elif rec.kind == "trigger" and "epoch" in rec.data:
            d = rec.data
            key = (d["rank"], d["stream"], d["slot"])
            if ready.get(key, 0) < d["epoch"]:
                bad.append(f"t={rec.time} rank {d['rank']} {d['stream']} epoch {d['epoch']} triggered before readiness")
    return bad


def connection_order(trace: Trace) -> list[str]:
    """Deliveries on each (src, dst) connection happen in issue order."""
    last: dict[tuple, int] = {}
    bad = []
    for rec in trace.of_kind("wire-delivery"):
        key = (rec.data["src"], rec.data["dst"])
        n = rec.data["n"]
        if n != last.get(key, 0) + 1:
            bad.append(f"connection {key}: delivery {n} after {last.get(key, 0)}")
        last[key] = n
    return bad


def flag_projection(trace: Trace, marker: str = ".sig") -> dict[str, list[int]]:
    """Per destination word, the ordered values written into it (device-observable)."""
    out: dict[str, list[int]] = defaultdict(list)
    for rec in trace.of_kind("wire-delivery"):
        addr = rec.data["addr"]
        if marker in addr:
            out[addr].append(rec.data["value"])
    return dict(out)


def am_integrity(trace: Trace) -> list[str]:
    """Dispatched (source, seq, handler, args) equals what was sent, per sender FIFO."""
    sent: dict[tuple, list] = defaultdict(list)
    got: dict[tuple, list] = defaultdict(list)
    for rec in trace.records:
        d = rec.data
        if rec.kind == "am-send":
            sent[(d["rank"], d["dst"])].append((d["seq"], d["handler"], tuple(d["args"])))
        elif rec.kind == "am-dispatch":
            got[(d["src"], d["rank"])].append((d["seq"], d["handler"], tuple(d["args"])))
    bad = []
    for key in sorted(set(sent) | set(got)):
        s, g = sent.get(key, []), got.get(key, [])
        if s != g:
            n = next((i for i, (a, b) in enumerate(zip(s, g)) if a != b), min(len(s), len(g)))
            bad.append(f"{key[0]}->{key[1]}: mismatch at message {n} (sent {len(s)}, dispatched {len(g)})")
    return bad


def am_body_delivered(trace: Trace, layout: AmLayout = AmLayout()) -> list[str]:
    """Each dispatch of (src -> rank, seq) comes after the body write for that seq has landed.

    Slots are reused every ``ring_slots`` messages, so message ``seq`` needs
    at least ``(seq - 1) // ring_slots + 1`` body deliveries at its slot.
    """
    landed: dict[str, int] = defaultdict(int)
    bad = []
    for rec in trace.records:
        d = rec.data
        if rec.kind == "wire-delivery" and d["len"] == layout.body_bytes and ":mailbox+" in d["addr"]:
            landed[d["addr"]] += 1
        elif rec.kind == "am-dispatch":
            off = layout.slot_offset(d["src"], d["seq"]) + layout.seq_bytes
            need = (d["seq"] - 1) // layout.ring_slots + 1
            addr = f"{d['rank']}:mailbox+{off}"
            if landed[addr] < need:
                bad.append(f"t={rec.time} rank {d['rank']} dispatched seq {d['seq']} from {d['src']} before its body")
    return bad


def coordination_projection(trace: Trace) -> dict:
    """Backend-independent view: per-rank coordination events and per-(rank, src) dispatches."""
    per_rank: dict[int, list] = defaultdict(list)
    dispatch: dict[tuple, list] = defaultdict(list)
    for rec in trace.records:
        d = rec.data
        if rec.kind in COORD_KINDS:
            item = tuple((k, tuple(v) if isinstance(v, list) else v) for k, v in sorted(d.items()) if k != "rank")
            per_rank[d["rank"]].append((rec.kind,) + item)
        elif rec.kind == "am-dispatch":
            dispatch[(d["rank"], d["src"])].append((d["seq"], d["handler"], tuple(d["args"])))
    return {"ranks": dict(per_rank), "dispatch": dict(dispatch)}


def capability_confinement(trace: Trace) -> list[str]:
    """No deferred work originates from a device actor."""
    return [f"t={r.time} queue_work from {r.data.get('origin')}" for r in trace.of_kind("queue_work")
            if r.data.get("origin") != "host"]


def no_host_activity(trace: Trace) -> list[str]:
    kinds = ("host-poll-tick", "queue_work", "readiness-write", "fallback-write")
    return [f"t={r.time} {r.kind}" for r in trace.of_kind(*kinds)]
