"""Command-line harness: run workloads, solve scheduling instances, list presets.

Exit codes: 0 success, 2 invalid configuration, 3 deadlock, unrecoverable
failure or no feasible schedule.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from typing import List, Optional

from . import presets
from .config import SCHEMA_VERSION, ConfigValidationError, WorkloadConfig
from .core import ConfigError, StreamBatchError
from .sched import DeadlockError
from .session import Session
from .solver import SearchExhausted, solve

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_RUNTIME = 3

_SUMMARY_FIELDS = (
    "jct", "policy", "rows_in", "rows_out", "peak_memory_bytes", "memory_limit_bytes", "spilled_bytes",
    "tasks_launched", "tasks_reexecuted", "rollbacks", "num_outputs", "output_digest",
)


def load_config(source: str) -> WorkloadConfig:
    """``source`` is a JSON file path or a preset name."""
    if os.path.exists(source):
        return WorkloadConfig.load(source)
    if source in presets.PRESETS:
        return WorkloadConfig.from_dict(presets.get(source))
    raise ConfigValidationError("$", f"no such config file or preset: {source!r}")


def write_trace(path: str, trace: List[dict], meta: dict) -> None:
    with open(path, "w") as f:
        f.write(json.dumps({"schema_version": SCHEMA_VERSION, "kind": "header", **meta}, sort_keys=True) + "\n")
        for rec in trace:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def write_json(path: str, doc: dict) -> None:
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def run_workload(cfg: WorkloadConfig):
    session = Session(cfg.cluster, cfg.options, clock=cfg.clock, wall_time_scale=cfg.wall_time_scale)
    return session.run(cfg.dataset, cfg.failures)


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    cfg = cfg.with_overrides(policy=args.policy, mem_limit=args.mem_limit, seed=args.seed, clock=args.clock)
    result = run_workload(cfg)
    report = result.report.to_json()
    if args.trace:
        write_trace(args.trace, result.trace, {"preset": cfg.preset, "policy": cfg.options.policy,
                                               "seed": cfg.seed, "clock": cfg.clock})
    if args.report:
        write_json(args.report, {"schema_version": SCHEMA_VERSION, **report})
    print(json.dumps({k: report[k] for k in _SUMMARY_FIELDS}, sort_keys=True))
    return EXIT_OK


def cmd_solve(args) -> int:
    cfg = load_config(args.config)
    if cfg.solver is None:
        raise ConfigValidationError("solver", "config has no solver section")
    problem = cfg.solver
    changes = {}
    if args.long:
        full = presets.memlimit_full_solver()["solver"]
        changes.update(source_tasks=full["source_tasks"], horizon_ticks=full["horizon_ticks"])
    if args.horizon is not None:
        changes["horizon_ticks"] = args.horizon
    if changes:
        problem = dataclasses.replace(problem, **changes)
    res = solve(problem, max_states=args.max_states)
    if not res.feasible:
        print(f"no schedule finishes within {problem.horizon_ticks} ticks", file=sys.stderr)
        return EXIT_RUNTIME
    optimum = res.optimum_ticks * cfg.tick_seconds
    out = {"optimum_ticks": res.optimum_ticks, "optimum_seconds": optimum, "states_visited": res.visited}
    if args.trace:
        write_trace(args.trace, res.to_trace(problem, cfg.tick_seconds), {"preset": cfg.preset, "producer": "solver"})
    if args.compare:
        if cfg.options.read_num_partitions not in (None, problem.source_tasks):
            print("warning: solver instance and pipeline differ in source task count", file=sys.stderr)
        gaps = {}
        for policy in ("optimistic", "pessimistic"):
            jct = run_workload(cfg.with_overrides(policy=policy)).report.jct
            gaps[policy] = {"jct": jct, "gap_percent": round(100.0 * (jct - optimum) / optimum, 3)}
        out["compare"] = gaps
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def cmd_presets(args) -> int:
    if args.action == "list":
        width = max(len(n) for n in presets.PRESETS)
        for name in presets.PRESETS:
            print(f"{name:<{width}}  {presets.DESCRIPTIONS[name]}")
        return EXIT_OK
    if not args.name:
        raise ConfigValidationError("name", "presets show needs a preset name")
    try:
        print(json.dumps(presets.get(args.name), indent=2, sort_keys=True))
    except KeyError as e:
        raise ConfigValidationError("name", e.args[0]) from None
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="streambatch", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="execute a workload config or preset")
    r.add_argument("config", help="config JSON path or preset name")
    r.add_argument("--policy", choices=("pessimistic", "optimistic"))
    r.add_argument("--mem-limit", type=int, metavar="BYTES")
    r.add_argument("--seed", type=int)
    r.add_argument("--clock", choices=("virtual", "wall"))
    r.add_argument("--trace", metavar="PATH", help="write the event trace as JSON lines")
    r.add_argument("--report", metavar="PATH", help="write the full run report as JSON")
    r.set_defaults(fn=cmd_run)

    s = sub.add_parser("solve", help="compute the optimal schedule of the config's solver section")
    s.add_argument("config")
    s.add_argument("--horizon", type=int, metavar="T")
    s.add_argument("--compare", action="store_true", help="also run both policies and report the gap")
    s.add_argument("--long", action="store_true", help="use the full-size 160-task instance")
    s.add_argument("--max-states", type=int, default=2_000_000)
    s.add_argument("--trace", metavar="PATH", help="write the witness schedule as JSON lines")
    s.set_defaults(fn=cmd_solve)

    ps = sub.add_parser("presets", help="list or show the built-in workloads")
    ps.add_argument("action", choices=("list", "show"))
    ps.add_argument("name", nargs="?")
    ps.set_defaults(fn=cmd_presets)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_INVALID if e.code else EXIT_OK
    try:
        return args.fn(args)
    except (ConfigError, OSError) as e:
        print(f"invalid configuration: {e}", file=sys.stderr)
        return EXIT_INVALID
    except DeadlockError as e:
        print(f"deadlock: {e.args[0]}", file=sys.stderr)
        if e.state:
            print(json.dumps(e.state, sort_keys=True, default=str), file=sys.stderr)
        return EXIT_RUNTIME
    except SearchExhausted as e:
        print(f"solver: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except StreamBatchError as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
