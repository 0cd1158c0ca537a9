"""Workload configuration: one self-contained JSON document.

Schema (``schema_version`` 1)::

    {
      "schema_version": 1,
      "preset": "memlimit",                      # optional label
      "cluster": {
        "nodes": [{"id": "n0", "slots": {"CPU": 8, "GPU": 4}, "local_buffer_partitions": 1}],
        "shared_memory_bytes": 838860800,
        "spill_bandwidth_bytes_per_s": 0
      },
      "pipeline": {
        "read": {"files": [{"name": "f", "num_rows": 8000, "row_bytes": 1048576}],
                 "udf": {...}, "resources": {"CPU": 1}},
        "ops": [{"kind": "MapBatches", "udf": {...}, "resources": {"GPU": 1}, "batch_size": 100}],
        "consume": {"kind": "Iter"}              # or {"kind": "IterSplit", "n": 2}, {"kind": "Cache"}
      },
      "scheduler": {"policy": "optimistic", "target_partition_bytes": 104857600, ...},
      "failures": [{"at": 3.0, "kind": "kill_worker", "target": "n0/w1"},
                   {"at": 5.0, "kind": "add_node", "node": {"id": "n2", "slots": {"CPU": 4}}}],
      "clock": "virtual",
      "wall_time_scale": 1.0,
      "seed": 0,
      "solver": {"ops": [{"duration_ticks": 2, "input_partitions": 0, "output_partitions": 1,
                          "resource": "CPU"}],
                 "source_tasks": 3, "slots": {"CPU": 2}, "buffer_limit_partitions": 1,
                 "horizon_ticks": 100, "tick_seconds": 1.0}
    }

A ``udf`` is ``{"compute_seconds_per_unit", "unit", "output_rows_per_input_row",
"output_bytes_per_row", "deterministic_seed"}``; ratios may be written as
strings such as ``"1/3"``.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, fields
from fractions import Fraction
from typing import Any, List, Optional

from .core import (
    ClusterSpec,
    ConfigError,
    Dataset,
    LogicalOperator,
    NodeSpec,
    ResourceRequirement,
    SourceFile,
    WorkSpec,
    read,
)
from .planner import fuse
from .recovery import FailureEvent, validate_schedule
from .sched import SchedulerOptions
from .solver import SolverOp, SolverProblem

SCHEMA_VERSION = 1
OP_KINDS = ("Map", "MapBatches", "FlatMap", "Filter", "Limit", "Write")
CONSUME = ("Iter", "IterSplit", "Cache")


class ConfigValidationError(ConfigError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def _req(obj: dict, key: str, path: str, kind=None):
    if not isinstance(obj, dict):
        raise ConfigValidationError(path, "expected an object")
    if key not in obj:
        raise ConfigValidationError(f"{path}.{key}", "required field missing")
    return _typed(obj[key], f"{path}.{key}", kind)


def _opt(obj: dict, key: str, path: str, default, kind=None):
    if key not in obj or obj[key] is None:
        return default
    return _typed(obj[key], f"{path}.{key}", kind)


def _typed(value, path, kind):
    if kind is None:
        return value
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if kind is int and isinstance(value, bool):
        raise ConfigValidationError(path, "expected an integer")
    if not isinstance(value, kind):
        raise ConfigValidationError(path, f"expected {getattr(kind, '__name__', kind)}")
    return value


def _wrap(path: str, fn, *args, **kw):
    """Re-raise constructor errors with the field path attached."""
    try:
        return fn(*args, **kw)
    except ConfigValidationError:
        raise
    except (ConfigError, ValueError, TypeError) as e:
        raise ConfigValidationError(path, str(e)) from None


def parse_udf(obj: Optional[dict], path: str, seed_offset: int = 0) -> WorkSpec:
    if obj is None:
        return WorkSpec(deterministic_seed=seed_offset)
    if not isinstance(obj, dict):
        raise ConfigValidationError(path, "expected an object")
    known = {"compute_seconds_per_unit", "unit", "output_rows_per_input_row", "output_bytes_per_row",
             "deterministic_seed"}
    for k in obj:
        if k not in known:
            raise ConfigValidationError(f"{path}.{k}", "unknown field")
    ratio = obj.get("output_rows_per_input_row", 1)
    try:
        ratio = Fraction(ratio)
    except (ValueError, TypeError, ZeroDivisionError):
        raise ConfigValidationError(f"{path}.output_rows_per_input_row", "not a rational number") from None
    return _wrap(
        path,
        WorkSpec,
        compute_seconds_per_unit=_opt(obj, "compute_seconds_per_unit", path, 0.0, float),
        unit=_opt(obj, "unit", path, "per_row", str),
        output_rows_per_input_row=ratio,
        output_bytes_per_row=_opt(obj, "output_bytes_per_row", path, None, int),
        deterministic_seed=_opt(obj, "deterministic_seed", path, 0, int) + seed_offset,
    )


def udf_to_json(w: WorkSpec) -> dict:
    r = w.output_rows_per_input_row
    d = {
        "compute_seconds_per_unit": w.compute_seconds_per_unit,
        "unit": w.unit,
        "output_rows_per_input_row": r.numerator if r.denominator == 1 else f"{r.numerator}/{r.denominator}",
        "deterministic_seed": w.deterministic_seed,
    }
    if w.output_bytes_per_row is not None:
        d["output_bytes_per_row"] = w.output_bytes_per_row
    return d


def parse_resources(obj, path: str) -> ResourceRequirement:
    if obj is None:
        return ResourceRequirement()
    if not isinstance(obj, dict) or not obj:
        raise ConfigValidationError(path, "expected a non-empty map of resource amounts")
    for k, v in obj.items():
        _typed(v, f"{path}.{k}", float)
    return _wrap(path, ResourceRequirement.of, obj)


def parse_node(obj: dict, path: str) -> NodeSpec:
    nid = _req(obj, "id", path, str)
    slots = _req(obj, "slots", path, dict)
    for k, v in slots.items():
        _typed(v, f"{path}.slots.{k}", float)
    return _wrap(path, NodeSpec.of, nid, slots, _opt(obj, "local_buffer_partitions", path, 1, int))


def parse_cluster(obj: dict, path: str = "cluster") -> ClusterSpec:
    nodes = _req(obj, "nodes", path, list)
    if not nodes:
        raise ConfigValidationError(f"{path}.nodes", "at least one node is required")
    parsed = tuple(parse_node(n, f"{path}.nodes[{i}]") for i, n in enumerate(nodes))
    return _wrap(
        path,
        ClusterSpec,
        parsed,
        _req(obj, "shared_memory_bytes", path, int),
        _opt(obj, "spill_bandwidth_bytes_per_s", path, 0.0, float),
    )


def parse_pipeline(obj: dict, path: str = "pipeline", seed: int = 0) -> Dataset:
    rd = _req(obj, "read", path, dict)
    files = _req(rd, "files", f"{path}.read", list)
    parsed_files = []
    for i, f in enumerate(files):
        fp = f"{path}.read.files[{i}]"
        parsed_files.append(
            _wrap(fp, SourceFile, _req(f, "name", fp, str), _req(f, "num_rows", fp, int), _req(f, "row_bytes", fp, int))
        )
    ds = read(
        parsed_files,
        parse_udf(rd.get("udf"), f"{path}.read.udf", seed),
        parse_resources(rd.get("resources"), f"{path}.read.resources"),
        name=_opt(rd, "name", f"{path}.read", "", str),
    )
    for i, op in enumerate(_opt(obj, "ops", path, [], list)):
        op_path = f"{path}.ops[{i}]"
        kind = _req(op, "kind", op_path, str)
        if kind not in OP_KINDS:
            raise ConfigValidationError(f"{op_path}.kind", f"must be one of {OP_KINDS}")
        lop = _wrap(
            op_path,
            LogicalOperator,
            kind,
            parse_udf(op.get("udf"), f"{op_path}.udf", seed),
            parse_resources(op.get("resources"), f"{op_path}.resources"),
            stateful=_opt(op, "stateful", op_path, False, bool),
            batch_size=_opt(op, "batch_size", op_path, None, int),
            limit_n=_opt(op, "n", op_path, None, int) if kind == "Limit" else None,
            concurrency=_opt(op, "concurrency", op_path, None, int),
            init_seconds=_opt(op, "init_seconds", op_path, 0.0, float),
            name=_opt(op, "name", op_path, "", str),
        )
        ds = ds.then(lop)
    consume = _opt(obj, "consume", path, {"kind": "Iter"}, dict)
    ckind = _req(consume, "kind", f"{path}.consume", str)
    if ckind == "Iter":
        ds = ds.iter()
    elif ckind == "IterSplit":
        n = _req(consume, "n", f"{path}.consume", int)
        ds = _wrap(f"{path}.consume.n", ds.iter_split, n)
    elif ckind == "Cache":
        ds = ds.cache()
    else:
        raise ConfigValidationError(f"{path}.consume.kind", f"must be one of {CONSUME}")
    return ds


def parse_scheduler(obj: Optional[dict], path: str = "scheduler") -> SchedulerOptions:
    obj = obj or {}
    if not isinstance(obj, dict):
        raise ConfigValidationError(path, "expected an object")
    names = {f.name: f for f in fields(SchedulerOptions)}
    for k in obj:
        if k not in names:
            raise ConfigValidationError(f"{path}.{k}", "unknown field")
    return _wrap(path, SchedulerOptions, **obj)


def parse_failures(items: Optional[list], path: str = "failures") -> List[FailureEvent]:
    out = []
    for i, ev in enumerate(items or []):
        ep = f"{path}[{i}]"
        kind = _req(ev, "kind", ep, str)
        at = _req(ev, "at", ep, float)
        if kind == "add_node":
            out.append(_wrap(ep, FailureEvent, at, kind, node=parse_node(_req(ev, "node", ep, dict), f"{ep}.node")))
        else:
            out.append(_wrap(ep, FailureEvent, at, kind, _req(ev, "target", ep, str)))
    return _wrap(path, validate_schedule, out)


def parse_solver(obj: dict, path: str = "solver") -> SolverProblem:
    ops = []
    for i, op in enumerate(_req(obj, "ops", path, list)):
        op_path = f"{path}.ops[{i}]"
        ops.append(
            _wrap(
                op_path,
                SolverOp,
                _req(op, "duration_ticks", op_path, int),
                _opt(op, "input_partitions", op_path, 0 if i == 0 else 1, int),
                _opt(op, "output_partitions", op_path, 1, int),
                _opt(op, "resource", op_path, "CPU", str),
            )
        )
    slots = _req(obj, "slots", path, dict)
    return _wrap(
        path,
        SolverProblem,
        tuple(ops),
        _req(obj, "source_tasks", path, int),
        {k: _typed(v, f"{path}.slots.{k}", int) for k, v in slots.items()},
        _req(obj, "buffer_limit_partitions", path, int),
        _opt(obj, "horizon_ticks", path, 10_000, int),
    )


@dataclass
class WorkloadConfig:
    raw: dict
    cluster: ClusterSpec
    dataset: Dataset
    options: SchedulerOptions
    failures: List[FailureEvent] = field(default_factory=list)
    clock: str = "virtual"
    wall_time_scale: float = 1.0
    seed: int = 0
    preset: Optional[str] = None
    solver: Optional[SolverProblem] = None
    tick_seconds: float = 1.0

    @classmethod
    def from_dict(cls, raw: Any) -> "WorkloadConfig":
        if not isinstance(raw, dict):
            raise ConfigValidationError("$", "config must be a JSON object")
        version = raw.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ConfigValidationError("schema_version", f"expected {SCHEMA_VERSION}, got {version!r}")
        seed = _opt(raw, "seed", "$", 0, int)
        clock = _opt(raw, "clock", "$", "virtual", str)
        if clock not in ("virtual", "wall"):
            raise ConfigValidationError("clock", "must be 'virtual' or 'wall'")
        cluster = parse_cluster(_req(raw, "cluster", "$", dict))
        dataset = parse_pipeline(_req(raw, "pipeline", "$", dict), seed=seed)
        options = parse_scheduler(raw.get("scheduler"))
        _wrap("pipeline", fuse, dataset, options.enable_fusion)
        solver, tick = None, 1.0
        if raw.get("solver") is not None:
            solver = parse_solver(raw["solver"])
            tick = _opt(raw["solver"], "tick_seconds", "solver", 1.0, float)
        wall_scale = _opt(raw, "wall_time_scale", "$", 1.0, float)
        if wall_scale < 0:
            raise ConfigValidationError("wall_time_scale", "must be >= 0")
        return cls(
            raw=copy.deepcopy(raw),
            cluster=cluster,
            dataset=dataset,
            options=options,
            failures=parse_failures(raw.get("failures")),
            clock=clock,
            wall_time_scale=wall_scale,
            seed=seed,
            preset=raw.get("preset"),
            solver=solver,
            tick_seconds=tick,
        )

    @classmethod
    def load(cls, path: str) -> "WorkloadConfig":
        with open(path) as f:
            try:
                raw = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigValidationError("$", f"invalid JSON: {e}") from None
        return cls.from_dict(raw)

    def with_overrides(self, **changes) -> "WorkloadConfig":
        """Apply command-line style overrides to the raw document and re-validate."""
        raw = copy.deepcopy(self.raw)
        if changes.get("policy") is not None:
            raw.setdefault("scheduler", {})["policy"] = changes["policy"]
        if changes.get("mem_limit") is not None:
            raw["cluster"]["shared_memory_bytes"] = changes["mem_limit"]
        if changes.get("seed") is not None:
            raw["seed"] = changes["seed"]
        if changes.get("clock") is not None:
            raw["clock"] = changes["clock"]
        for k, v in (changes.get("scheduler") or {}).items():
            raw.setdefault("scheduler", {})[k] = v
        return WorkloadConfig.from_dict(raw)

    def dumps(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True)
