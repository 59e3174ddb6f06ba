"""Command-line runner: ``trigsim run`` and ``trigsim validate``.

Exit codes: 0 ok, 1 assertion failed, 2 parse/validation error, 3 simulation fault.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import dataclass, field
from typing import Any, Optional

from .oracles import am_integrity, barrier_safety, connection_order, handoff_safety
from .scenario import ParseError, Scenario, ValidationError, load_scenario, parse_value, validate
from .simcore import SimError
from .workloads import (
    CostModel,
    MetricsReport,
    am_random_programs,
    barrier_programs,
    exhaustion_study,
    jacobi_weak_scaling,
    metrics_from_run,
    phase_benchmark,
    pingpong_programs,
)
from .cluster import Cluster

log = logging.getLogger("trigsim")

EXIT_OK, EXIT_ASSERT, EXIT_INVALID, EXIT_FAULT = 0, 1, 2, 3


@dataclass
class Outcome:
    results: dict
    status: str = "idle"
    reason: str = "ok"
    metrics: Optional[MetricsReport] = None
    trace: Any = None

    @property
    def faulted(self) -> bool:
        return self.status != "idle"


def cost_model(sc: Scenario) -> CostModel:
    c = sc.section("costs")
    base = CostModel()
    return CostModel(
        host_coord_cost=c.get("host_coord_cost_ns", base.host_coord_cost),
        gpu_trigger_cost=c.get("gpu_trigger_cost_ns", base.gpu_trigger_cost),
        kernel_launch_cost=c.get("kernel_launch_cost_ns", base.kernel_launch_cost),
        total_compute=c.get("total_compute_ns", base.total_compute),
        source=c.get("source", base.source),
    )


def _simulate(sc: Scenario, cluster: Cluster, check: bool, limit: Optional[int] = None) -> Outcome:
    res = cluster.run(limit)
    metrics = metrics_from_run(res)
    results = dict(metrics.aggregate)
    if check and res.trace is not None:
        results["barrier_safety_violations"] = len(barrier_safety(res.trace))
        results["handoff_violations"] = len(handoff_safety(res.trace))
        results["am_violations"] = len(am_integrity(res.trace))
        results["connection_order_violations"] = len(connection_order(res.trace))
    status = "fault" if res.faults else res.status.value
    return Outcome(results, status, res.reason, metrics, res.trace)


def execute(sc: Scenario, trace: bool = False) -> Outcome:
    """Run one scenario point and collect its result dictionary."""
    wl = sc.workload
    kind = sc.kind
    cfg = sc.sim_config()
    if kind == "exhaustion":
        r = exhaustion_study(cfg.ranks, wl.get("barriers_to_prestage"), cfg.nic.dwq_capacity, cfg.nic.counter_max,
                             cfg.nic.ranks_per_nic, wl.get("all_nics", False))
        return Outcome({"ranks": r.ranks, "rounds": r.rounds, "max_prestaged": r.predicted,
                        "exhaustion_succeeded": r.succeeded, "first_failure": r.first_failure,
                        "first_error": r.error, "dwq_high_water": r.dwq_high_water,
                        "counter_high_water": r.counter_high_water})
    if kind == "phase":
        costs = cost_model(sc)
        n = wl.get("phases", 200)
        mode = wl.get("mode", "both")
        out: dict = {"phases": n, "cost_source": costs.source}
        if mode in ("both", "host_driven"):
            h = phase_benchmark(n, "host_driven", costs, cfg.ranks)
            out.update(host_end_time_ns=h.end_time_ns, coordination_fraction=h.coordination_fraction,
                       host_coord_mean_ns=h.coord_mean_ns)
        if mode in ("both", "gpu_triggered"):
            g = phase_benchmark(n, "gpu_triggered", costs, cfg.ranks)
            out.update(gpu_end_time_ns=g.end_time_ns, gpu_coordination_fraction=g.coordination_fraction,
                       gpu_coord_mean_ns=g.coord_mean_ns)
        if mode == "both":
            out["latency_ratio"] = out["host_coord_mean_ns"] / out["gpu_coord_mean_ns"]
        return Outcome(out)
    if kind == "jacobi":
        costs = cost_model(sc)
        counts = wl.get("rank_counts", [1, 2, 4, 8, 16])
        iters = wl.get("iters", 20)
        per = wl.get("compute_per_iter_ns", 500_000)
        gpu = jacobi_weak_scaling(counts, iters, per, "gpu_triggered", costs, cfg.wire_latency_ns)
        host = jacobi_weak_scaling(counts, iters, per, "host_driven", costs, cfg.wire_latency_ns)
        out = {"cost_source": costs.source}
        for g, h in zip(gpu, host):
            out[f"efficiency_gpu_p{g.ranks}"] = g.efficiency
            out[f"efficiency_host_p{h.ranks}"] = h.efficiency
        out["gpu_ge_host"] = all(g.efficiency >= h.efficiency for g, h in zip(gpu, host))
        return Outcome(out)
    check = wl.get("check", True)
    tracing = trace or check
    if kind == "barriers":
        progs = barrier_programs(cfg.ranks, wl.get("count", 100), cfg.seed, wl.get("max_skew_ns", 5000),
                                 wl.get("base_compute_ns", 0))
        sc.programs = progs
        return _simulate(sc, sc.build(tracing), check)
    if kind == "am":
        progs, handlers, _ = am_random_programs(cfg.ranks, wl.get("messages", 1000), cfg.seed,
                                                wl.get("per_round", 10), wl.get("handler_compute_ns", 0))
        sc.programs, sc.handlers = progs, handlers
        return _simulate(sc, sc.build(tracing), check)
    if kind == "pingpong":
        rounds = wl.get("rounds", 1)
        sc.programs, sc.handlers = pingpong_programs(rounds)
        outcome = _simulate(sc, sc.build(tracing), check)
        outcome.results["round_trip_ns"] = outcome.results["end_time_ns"] / rounds
        return outcome
    return _simulate(sc, sc.build(tracing), check, wl.get("limit_ns"))


def check_expectations(expect: dict, results: dict) -> list[str]:
    failures = []
    for key, want in expect.items():
        if key not in results:
            failures.append(f"{key}: not produced by this scenario")
            continue
        got = results[key]
        if isinstance(want, dict):
            lo, hi = want.get("min"), want.get("max")
            if (lo is not None and got < lo) or (hi is not None and got > hi):
                failures.append(f"{key}: {got} outside [{lo}, {hi}]")
        elif got != want:
            failures.append(f"{key}: expected {want!r}, got {got!r}")
    return failures


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(round(value, 9))
    return str(value)


def _split_sets(pairs: list[str]) -> tuple[dict, list[tuple[str, list]]]:
    fixed, sweeps = {}, []
    for pair in pairs:
        if "=" not in pair:
            raise ValidationError(f"--set expects KEY=VALUE, got {pair!r}")
        key, _, raw = pair.partition("=")
        key = key.strip()
        raw = raw.strip()
        if "," in raw and not raw.startswith("["):
            sweeps.append((key, [parse_value(v.strip()) for v in raw.split(",")]))
        else:
            fixed[key] = parse_value(raw)
    return fixed, sweeps


def _points(fixed: dict, sweeps: list) -> list[dict]:
    points = [dict(fixed)]
    for key, values in sweeps:
        points = [dict(p, **{key: v}) for p in points for v in values]
    return points


def _write_output(path: Optional[str], fmt: str, rows: list[dict], metrics: Optional[MetricsReport]) -> None:
    if fmt == "json":
        doc: dict = {"points": rows}
        if metrics is not None and len(rows) == 1:
            doc["metrics"] = json.loads(metrics.to_json())
        text = json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n"
    elif metrics is not None and len(rows) == 1:
        report = MetricsReport(metrics.ranks, dict(rows[0]["results"]))
        text = report.to_csv()
    else:
        swept = sorted({k for r in rows for k in r["overrides"]})
        cols = swept + sorted({k for r in rows for k in r["results"]} - set(swept))
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        for r in rows:
            merged = {**r["results"], **r["overrides"]}
            writer.writerow([_fmt(merged.get(c, "")) for c in cols])
        text = buf.getvalue()
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def cmd_run(args) -> int:
    try:
        fixed, sweeps = _split_sets(args.set or [])
        if args.seed is not None:
            fixed["scenario.seed"] = args.seed
        points = _points(fixed, sweeps)
        scenarios = [load_scenario(args.path, p) for p in points]
        for sc in scenarios:
            problems = validate(sc)
            if problems:
                raise ValidationError("; ".join(problems))
    except (ParseError, ValidationError, FileNotFoundError) as exc:
        print(f"error={type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVALID

    rows, code, last = [], EXIT_OK, None
    for point, sc in zip(points, scenarios):
        try:
            outcome = execute(sc, trace=bool(args.trace))
        except (SimError, RuntimeError, ValueError) as exc:
            print(f"status=fault\nreason={type(exc).__name__}: {exc}")
            return EXIT_FAULT
        last = outcome
        results = dict(outcome.results)
        results.setdefault("status", outcome.status)
        rows.append({"overrides": point, "results": results})
        if len(points) > 1:
            print("# " + " ".join(f"{k}={_fmt(v)}" for k, v in point.items()))
        for k in sorted(results):
            print(f"{k}={_fmt(results[k])}")
        expected_status = sc.expect.get("status", "idle")
        if outcome.status != "idle":
            print(f"reason={outcome.reason}")
            if outcome.status != expected_status:
                code = EXIT_FAULT
        if args.assert_:
            failures = check_expectations(sc.expect, results)
            for f in failures:
                print(f"assert-failed {f}")
            if failures:
                code = max(code, EXIT_ASSERT)
            elif code == EXIT_OK:
                print("assert=pass")
    if args.trace and last is not None and last.trace is not None:
        last.trace.dump(args.trace)
    _write_output(args.out, args.format, rows, last.metrics if last is not None else None)
    return code


def cmd_validate(args) -> int:
    try:
        sc = load_scenario(args.path)
        problems = validate(sc)
    except (ParseError, ValidationError, FileNotFoundError) as exc:
        print(f"error={type(exc).__name__}: {exc}")
        return EXIT_INVALID
    for p in problems:
        print(f"invalid: {p}")
    return EXIT_INVALID if problems else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trigsim", description="GPU-triggered coordination simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario")
    run.add_argument("path", nargs="?", help="scenario file or shipped scenario name")
    run.add_argument("--scenario", dest="scenario_path")
    run.add_argument("--set", action="append", metavar="K=V", help="override a parameter; a,b,c sweeps")
    run.add_argument("--trace", metavar="PATH")
    run.add_argument("--out", metavar="PATH")
    run.add_argument("--format", choices=("csv", "json"), default="csv")
    run.add_argument("--assert", dest="assert_", action="store_true", help="check the scenario's [expect] table")
    run.add_argument("--seed", type=int)
    run.set_defaults(func=cmd_run)

    val = sub.add_parser("validate", help="static checks only")
    val.add_argument("path", nargs="?")
    val.add_argument("--scenario", dest="scenario_path")
    val.set_defaults(func=cmd_validate)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    args.path = args.scenario_path or args.path
    if not args.path:
        parser.error("a scenario is required (positional or --scenario)")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
