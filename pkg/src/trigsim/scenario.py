"""Scenario files: TOML documents describing one run.

Sections
--------
``[scenario]``  name, backend (ofi|ib), ranks, seed, wire_latency_ns,
                wire_jitter_ns, stage_ahead_slots, wait_mode, device_poll_interval_ns
``[nic]``       dwq_capacity, counter_max, ranks_per_nic, doorbell_latency_ns,
                nic_exec_latency_ns, flush_cost_ns
``[ib]``        wqe_build_latency_ns, doorbell_latency_ns, sq_size, cq_size
``[monitor]``   enabled, poll_interval_ns, per_op_overhead_ns, paused_from_ns,
                paused_until_ns, fallback_lag_ns, h2d_latency_ns
``[costs]``     source, host_coord_cost_ns, gpu_trigger_cost_ns,
                kernel_launch_cost_ns, total_compute_ns
``[workload]``  kind plus kind-specific keys (see ``WORKLOAD_KEYS``)
``[programs]``  rank id or "*" -> step text, one step per line
``[handlers]``  handler id -> step text
``[regions]``   name -> {space = "device"|"host", bytes = N}
``[[prestage]]`` rank, counter, threshold, peer, src, dst, size, sig
``[[qp]]``      id, owner (declared queue-pair ownership, checked for exclusivity)
``[expect]``    key -> value, or {min, max}, checked by ``run --assert``

Step grammar (``#`` starts a comment)::

    compute N[ns|us|ms]     trigger COUNTER VALUE     wait REGION[+OFF] CMP VALUE
    write REGION[+OFF] V    quiet    barrier    halo    am_poll    am_recv N
    am_send PEER|src HANDLER [ARG...]               ib_put PEER SRC DST SIZE
"""

from __future__ import annotations

import copy
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from .cluster import Cluster, PrestageSpec, RegionSpec, SimConfig
from .coordination import AmLayout
from .device import (
    Addr,
    AmPollDispatch,
    AmRecv,
    AmSend,
    BarrierAll,
    Cmp,
    Compute,
    Halo,
    IbPut,
    Quiet,
    Trigger,
    WaitUntil,
    Write,
)
from .host_runtime import MonitorConfig
from .nic_cxi import NicParams
from .nic_ib import IbParams
from .simcore import MemorySpace, ms, us

__all__ = [
    "ParseError",
    "ValidationError",
    "Scenario",
    "load_scenario",
    "parse_scenario",
    "parse_steps",
    "apply_override",
    "validate",
    "SCENARIO_DIR",
    "find_scenario",
]

SCENARIO_DIR = Path(__file__).parent / "scenarios"


class ParseError(ValueError):
    pass


class ValidationError(ValueError):
    pass


WORKLOAD_KEYS = {
    "exhaustion": {"barriers_to_prestage", "all_nics"},
    "phase": {"phases", "mode"},
    "jacobi": {"rank_counts", "iters", "compute_per_iter_ns"},
    "barriers": {"count", "max_skew_ns", "base_compute_ns", "check"},
    "am": {"messages", "per_round", "handler_compute_ns", "check"},
    "pingpong": {"rounds", "check"},
    "custom": {"check", "limit_ns"},
}

SECTION_KEYS = {
    "scenario": {"name", "backend", "ranks", "seed", "wire_latency_ns", "wire_jitter_ns", "stage_ahead_slots",
                 "wait_mode", "device_poll_interval_ns", "description", "ranks_per_nic"},
    "nic": {"dwq_capacity", "counter_max", "ranks_per_nic", "doorbell_latency_ns", "nic_exec_latency_ns",
            "flush_cost_ns"},
    "ib": {"wqe_build_latency_ns", "doorbell_latency_ns", "sq_size", "cq_size"},
    "monitor": {"enabled", "poll_interval_ns", "per_op_overhead_ns", "paused_from_ns", "paused_until_ns",
                "fallback_lag_ns", "h2d_latency_ns"},
    "costs": {"source", "host_coord_cost_ns", "gpu_trigger_cost_ns", "kernel_launch_cost_ns", "total_compute_ns"},
    "am": {"seq_bytes", "header_bytes", "args_bytes", "ring_slots"},
}
TOP_LEVEL = set(SECTION_KEYS) | {"workload", "programs", "handlers", "regions", "prestage", "qp", "expect"}


@dataclass
class Scenario:
    data: dict
    path: Optional[Path] = None
    programs: dict = field(default_factory=dict)
    handlers: dict = field(default_factory=dict)

    @property
    def name(self) -> str:
        return self.data.get("scenario", {}).get("name") or (self.path.stem if self.path else "scenario")

    @property
    def workload(self) -> dict:
        return self.data.get("workload", {"kind": "custom"})

    @property
    def kind(self) -> str:
        return self.workload.get("kind", "custom")

    @property
    def expect(self) -> dict:
        return self.data.get("expect", {})

    def section(self, name: str) -> dict:
        return self.data.get(name, {})

    def sim_config(self, trace: bool = False) -> SimConfig:
        sc = self.section("scenario")
        nic_kw = dict(self.section("nic"))
        if "ranks_per_nic" in sc and "ranks_per_nic" not in nic_kw:
            nic_kw["ranks_per_nic"] = sc["ranks_per_nic"]
        mon_kw = dict(self.section("monitor"))
        enabled = mon_kw.pop("enabled", True)
        try:
            return SimConfig(
                backend=sc.get("backend", "ofi"),
                ranks=sc.get("ranks", 2),
                seed=sc.get("seed", 0),
                wire_latency_ns=sc.get("wire_latency_ns", 1000),
                wire_jitter_ns=sc.get("wire_jitter_ns", 0),
                nic=NicParams(**nic_kw),
                ib=IbParams(**self.section("ib")),
                monitor=MonitorConfig(**mon_kw),
                monitor_enabled=enabled,
                stage_ahead_slots=sc.get("stage_ahead_slots", 2),
                wait_mode=sc.get("wait_mode", "event"),
                device_poll_interval_ns=sc.get("device_poll_interval_ns", 100),
                am_layout=AmLayout(**self.section("am")),
                trace=trace,
            )
        except (TypeError, ValueError) as exc:
            raise ValidationError(str(exc)) from exc

    def regions(self) -> list[RegionSpec]:
        out = []
        for name, spec in sorted(self.section("regions").items()):
            space = MemorySpace.HOST if spec.get("space", "device") == "host" else MemorySpace.DEVICE
            out.append(RegionSpec(name, space, spec.get("bytes", 4096)))
        return out

    def prestage(self) -> list[PrestageSpec]:
        out = []
        for i, item in enumerate(self.data.get("prestage", [])):
            try:
                out.append(PrestageSpec(
                    rank=item["rank"], counter=item["counter"], threshold=item["threshold"], peer=item["peer"],
                    src=_split_addr(item["src"]), dst=_split_addr(item["dst"]), size=item.get("size", 8),
                    sig=_split_addr(item["sig"]) if "sig" in item else None,
                ))
            except KeyError as exc:
                raise ParseError(f"prestage[{i}]: missing field {exc.args[0]}") from exc
        return out

    def build(self, trace: bool = False) -> Cluster:
        cfg = self.sim_config(trace)
        return Cluster(cfg, self.programs, self.handlers, self.prestage(), self.regions())


# -- step parsing ------------------------------------------------------------------

_DURATION = re.compile(r"^(\d+(?:\.\d+)?)(ns|us|ms)?$")


def _duration(text: str) -> int:
    m = _DURATION.match(text)
    if not m:
        raise ValueError(f"bad duration {text!r}")
    value, unit = m.groups()
    if unit == "us":
        return us(value)
    if unit == "ms":
        return ms(value)
    if "." in value:
        raise ValueError(f"fractional nanoseconds {text!r}")
    return int(value)


_CMP_SYMBOLS = {"==": "EQ", "!=": "NE", ">": "GT", ">=": "GE", "<": "LT", "<=": "LE"}


def _split_addr(text: str) -> tuple[str, int]:
    name, _, off = str(text).partition("+")
    if not name:
        raise ValueError(f"bad address {text!r}")
    return name, int(off) if off else 0


def _addr(text: str) -> Addr:
    return Addr(*_split_addr(text))


def _parse_step(words: list[str]):
    op, args = words[0], words[1:]

    def need(n):
        if len(args) != n:
            raise ValueError(f"{op} takes {n} argument(s), got {len(args)}")

    if op == "compute":
        need(1)
        return Compute(_duration(args[0]))
    if op == "trigger":
        need(2)
        return Trigger(args[0], int(args[1]))
    if op == "wait":
        need(3)
        try:
            cmp = Cmp(_CMP_SYMBOLS.get(args[1], args[1].upper()))
        except ValueError:
            raise ValueError(f"unknown comparison {args[1]!r}") from None
        return WaitUntil(_addr(args[0]), cmp, int(args[2]))
    if op == "write":
        need(2)
        return Write(_addr(args[0]), int(args[1]))
    if op in ("quiet", "barrier", "halo", "am_poll"):
        need(0)
        return {"quiet": Quiet, "barrier": BarrierAll, "halo": Halo, "am_poll": AmPollDispatch}[op]()
    if op == "am_recv":
        need(1)
        return AmRecv(int(args[0]))
    if op == "am_send":
        if len(args) < 2:
            raise ValueError("am_send takes PEER HANDLER [ARG...]")
        peer = args[0] if args[0] == "src" else int(args[0])
        return AmSend(peer, int(args[1]), tuple(int(a) for a in args[2:]))
    if op == "ib_put":
        need(4)
        return IbPut(int(args[0]), _addr(args[1]), _addr(args[2]), int(args[3]))
    raise ValueError(f"unknown step {op!r}")


def parse_steps(text: str, where: str = "program") -> list:
    steps = []
    for lineno, raw in enumerate(str(text).splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            steps.append(_parse_step(line.split()))
        except ValueError as exc:
            raise ParseError(f"{where}: line {lineno}: {exc}") from None
    return steps


def _rank_programs(table: dict, ranks: int) -> dict[int, list]:
    common = None
    out: dict[int, list] = {}
    for key, text in table.items():
        if key == "*":
            common = parse_steps(text, "programs.*")
            continue
        try:
            rank = int(key)
        except ValueError:
            raise ParseError(f"programs: key {key!r} is neither a rank nor '*'") from None
        if not 0 <= rank < ranks:
            raise ValidationError(f"programs: rank {rank} outside 0..{ranks - 1}")
        out[rank] = parse_steps(text, f"programs.{key}")
    if common is not None:
        for r in range(ranks):
            out.setdefault(r, list(common))
    return out


# -- loading ---------------------------------------------------------------------------


def parse_scenario(text: str, path: Optional[Path] = None) -> Scenario:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ParseError(f"{path or 'scenario'}: {exc}") from None
    return _from_data(data, path)


def _from_data(data: dict, path: Optional[Path]) -> Scenario:
    unknown = set(data) - TOP_LEVEL
    if unknown:
        raise ParseError(f"unknown section(s): {', '.join(sorted(unknown))}")
    for section, keys in SECTION_KEYS.items():
        extra = set(data.get(section, {})) - keys
        if extra:
            raise ParseError(f"[{section}]: unknown field(s) {', '.join(sorted(extra))}")
    workload = data.get("workload", {"kind": "custom"})
    kind = workload.get("kind", "custom")
    if kind not in WORKLOAD_KEYS:
        raise ParseError(f"[workload]: unknown kind {kind!r}")
    extra = set(workload) - WORKLOAD_KEYS[kind] - {"kind"}
    if extra:
        raise ParseError(f"[workload]: unknown field(s) for {kind}: {', '.join(sorted(extra))}")
    sc = Scenario(data, path)
    ranks = data.get("scenario", {}).get("ranks", 2)
    if not isinstance(ranks, int) or ranks < 1:
        raise ValidationError(f"[scenario].ranks must be a positive integer, got {ranks!r}")
    sc.programs = _rank_programs(data.get("programs", {}), ranks)
    handlers = {}
    for key, text in data.get("handlers", {}).items():
        try:
            hid = int(key)
        except ValueError:
            raise ParseError(f"handlers: key {key!r} is not an integer id") from None
        handlers[hid] = parse_steps(text, f"handlers.{key}")
    sc.handlers = handlers
    return sc


def find_scenario(name: str) -> Path:
    """Resolve a path, or the name of a shipped scenario (with or without .toml)."""
    p = Path(name)
    if p.is_file():
        return p
    if p.with_suffix(".toml").is_file():
        return p.with_suffix(".toml")
    shipped = SCENARIO_DIR / (p.stem + ".toml")
    if shipped.is_file():
        return shipped
    raise FileNotFoundError(f"no scenario {name!r}")


def load_scenario(name, overrides: Optional[dict] = None) -> Scenario:
    path = find_scenario(str(name))
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None
    for key, value in (overrides or {}).items():
        apply_override(data, key, value)
    return _from_data(data, path)


def apply_override(data: dict, key: str, value: Any) -> None:
    """Set a scalar. ``a.b`` addresses a section field; a bare key is looked up
    in [workload], then [scenario], then the other sections."""
    if "." in key:
        section, _, field_ = key.partition(".")
        if section not in TOP_LEVEL:
            raise ValidationError(f"--set {key}: unknown section {section!r}")
        data.setdefault(section, {})[field_] = value
        _mark_user_costs(data, section, field_)
        return
    for section in ["workload", "scenario"] + sorted(SECTION_KEYS):
        if key in data.get(section, {}):
            data[section][key] = value
            _mark_user_costs(data, section, key)
            return
    kind = data.get("workload", {}).get("kind", "custom")
    if key in WORKLOAD_KEYS.get(kind, ()):
        data.setdefault("workload", {})[key] = value
        return
    for section, keys in SECTION_KEYS.items():
        if key in keys:
            data.setdefault(section, {})[key] = value
            _mark_user_costs(data, section, key)
            return
    raise ValidationError(f"--set {key}: no such parameter")


def _mark_user_costs(data: dict, section: str, key: str) -> None:
    # calibrated values stop being calibrated once someone edits them
    if section == "costs" and key != "source":
        data["costs"]["source"] = "user"


def parse_value(text: str) -> Any:
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


# -- validation ----------------------------------------------------------------------------


def validate(sc: Scenario) -> list[str]:
    """Static checks. Returns problems; an empty list means valid."""
    problems = []
    try:
        cfg = sc.sim_config()
    except ValidationError as exc:
        return [str(exc)]
    P = cfg.ranks
    handler_ids = set(sc.handlers)
    every = [(f"programs.{r}", s) for r, prog in sc.programs.items() for s in prog]
    every += [(f"handlers.{h}", s) for h, prog in sc.handlers.items() for s in prog]
    for where, step in every:
        if isinstance(step, AmSend):
            if step.handler not in handler_ids:
                problems.append(f"{where}: handler {step.handler} is not defined")
            if step.peer != "src" and not 0 <= step.peer < P:
                problems.append(f"{where}: am_send peer {step.peer} outside 0..{P - 1}")
        if isinstance(step, IbPut):
            if cfg.backend != "ib":
                problems.append(f"{where}: ib_put needs backend = \"ib\"")
            if not 0 <= step.peer < P:
                problems.append(f"{where}: ib_put peer {step.peer} outside 0..{P - 1}")
        if isinstance(step, Trigger):
            if cfg.backend != "ofi":
                problems.append(f"{where}: trigger needs backend = \"ofi\"")
            if step.value > cfg.nic.counter_max:
                problems.append(f"{where}: trigger value {step.value} exceeds counter_max {cfg.nic.counter_max}")
    for i, item in enumerate(sc.data.get("prestage", [])):
        th = item.get("threshold", 0)
        if th > cfg.nic.counter_max:
            problems.append(f"prestage[{i}]: threshold {th} exceeds counter_max {cfg.nic.counter_max}")
        for k in ("rank", "peer"):
            v = item.get(k)
            if not isinstance(v, int) or not 0 <= v < P:
                problems.append(f"prestage[{i}]: {k} {v!r} outside 0..{P - 1}")
    if sc.data.get("prestage") and cfg.backend != "ofi":
        problems.append("prestage entries need backend = \"ofi\"")
    owners: dict[str, str] = {}
    for i, item in enumerate(sc.data.get("qp", [])):
        qid, owner = item.get("id"), item.get("owner")
        if qid is None or owner is None:
            problems.append(f"qp[{i}]: needs id and owner")
            continue
        if qid in owners and owners[qid] != owner:
            problems.append(f"queue pair {qid} has two owners: {owners[qid]} and {owner}")
        owners.setdefault(qid, owner)
    costs = sc.section("costs")
    for k, v in costs.items():
        if k.endswith("_ns") and (not isinstance(v, int) or v < 0):
            problems.append(f"[costs].{k} must be a non-negative integer")
    if costs and costs.get("source", "user") not in ("calibrated", "user"):
        problems.append("[costs].source must be \"calibrated\" or \"user\"")
    return problems
