"""Named workloads sized to run on a laptop.

Every preset is a plain config document (see :mod:`streambatch.config`).
Memory limits are expressed in multiples of the target partition size.
"""

from __future__ import annotations

import math
from typing import Callable, Dict, Optional

from .core import MB

MEMLIMIT_PARTITION = 100 * MB
# Flushing happens once a buffer exceeds the target, so this yields 100-row partitions.
MEMLIMIT_TARGET = MEMLIMIT_PARTITION - 1
MEMLIMIT_LIMITS = (16, 8, 4, 2)
MEMLIMIT_TASKS = 160
MEMLIMIT_TIME_SCALE = 0.1
MEMLIMIT_OPTIMUM_SECONDS = (MEMLIMIT_TASKS * 5 + MEMLIMIT_TASKS * 5 * 0.5) / 8 * MEMLIMIT_TIME_SCALE
SWEEP_TARGETS_MB = (1, 8, 32, 128, 512, 2048)


def _node(nid, **slots):
    return {"id": nid, "slots": slots, "local_buffer_partitions": 1}


def fig6(policy: str = "optimistic") -> dict:
    """Three producer tasks feeding a single GPU consumer through a one-partition buffer."""
    return {
        "schema_version": 1,
        "preset": "fig6",
        "cluster": {"nodes": [_node("n0", CPU=2, GPU=1)], "shared_memory_bytes": 100,
                    "spill_bandwidth_bytes_per_s": 0},
        "pipeline": {
            "read": {"files": [{"name": "fig6", "num_rows": 3, "row_bytes": 100}],
                     "udf": {"compute_seconds_per_unit": 2.0, "unit": "per_partition"}, "name": "A"},
            "ops": [{"kind": "Map", "name": "B", "resources": {"GPU": 1},
                     "udf": {"compute_seconds_per_unit": 2.0, "unit": "per_partition"}}],
        },
        "scheduler": {"policy": policy, "target_partition_bytes": 100, "read_num_partitions": 3,
                      "budget_interval_seconds": 1.0},
        "solver": {
            "ops": [
                {"duration_ticks": 2, "input_partitions": 0, "output_partitions": 1, "resource": "CPU"},
                {"duration_ticks": 2, "input_partitions": 1, "output_partitions": 1, "resource": "GPU"},
            ],
            "source_tasks": 3, "slots": {"CPU": 2, "GPU": 1}, "buffer_limit_partitions": 1,
            "horizon_ticks": 50, "tick_seconds": 1.0,
        },
    }


def memlimit(limit_partitions: int = 8, policy: str = "optimistic", dynamic_repartition: bool = True,
             source_size_overestimate: float = 1.0, tasks: int = MEMLIMIT_TASKS,
             time_scale: float = MEMLIMIT_TIME_SCALE) -> dict:
    """Load (CPU) -> transform (CPU) -> inference (GPU) with every duration multiplied by ``time_scale``.

    The budget cadence is scaled too, so the run is the full-size workload on a compressed clock.
    """
    return {
        "schema_version": 1,
        "preset": "memlimit",
        "cluster": {"nodes": [_node("n0", CPU=8, GPU=4)],
                    "shared_memory_bytes": limit_partitions * MEMLIMIT_PARTITION,
                    "spill_bandwidth_bytes_per_s": 0},
        "pipeline": {
            "read": {"files": [{"name": "load", "num_rows": tasks * 500, "row_bytes": MB}],
                     "udf": {"compute_seconds_per_unit": 5.0 * time_scale, "unit": "per_partition"},
                     "name": "load"},
            "ops": [
                {"kind": "MapBatches", "name": "transform", "batch_size": 100,
                 "udf": {"compute_seconds_per_unit": 0.5 * time_scale, "unit": "per_batch"}},
                {"kind": "MapBatches", "name": "inference", "batch_size": 100, "resources": {"GPU": 1},
                 "udf": {"compute_seconds_per_unit": 0.5 * time_scale, "unit": "per_batch",
                         "output_bytes_per_row": 1024}},
            ],
        },
        "scheduler": {"policy": policy, "target_partition_bytes": MEMLIMIT_TARGET, "read_num_partitions": tasks,
                      "dynamic_repartition": dynamic_repartition,
                      "source_size_overestimate": source_size_overestimate,
                      "budget_interval_seconds": time_scale},
        "solver": {
            "ops": [
                {"duration_ticks": 10, "input_partitions": 0, "output_partitions": 5, "resource": "CPU"},
                {"duration_ticks": 1, "input_partitions": 1, "output_partitions": 1, "resource": "CPU"},
                {"duration_ticks": 1, "input_partitions": 1, "output_partitions": 1, "resource": "GPU"},
            ],
            "source_tasks": 16, "slots": {"CPU": 8, "GPU": 4}, "buffer_limit_partitions": limit_partitions,
            "horizon_ticks": 200, "tick_seconds": 0.5,
        },
    }


def memlimit_full_solver(limit_partitions: int = 16) -> dict:
    """Full-size solver instance: 160 loads, 800 transform and 800 inference units at 0.5 s ticks."""
    cfg = memlimit(limit_partitions)
    cfg["preset"] = "memlimit-full"
    cfg["solver"]["source_tasks"] = 160
    cfg["solver"]["horizon_ticks"] = 400
    return cfg


def fractional(static: bool = False, tasks: int = 48) -> dict:
    """Two CPU stages of 1 s and 2 s; ``static`` pins each stage to four slots."""
    s1 = {"CPU": 1, "s1": 1} if static else {"CPU": 1}
    s2 = {"CPU": 1, "s2": 1} if static else {"CPU": 1}
    slots = {"CPU": 8, "s1": 4, "s2": 4} if static else {"CPU": 8}
    return {
        "schema_version": 1,
        "preset": "fractional-static" if static else "fractional",
        "cluster": {"nodes": [_node("n0", **slots)], "shared_memory_bytes": 4 * tasks * MB},
        "pipeline": {
            "read": {"files": [{"name": "frac", "num_rows": tasks, "row_bytes": MB}], "resources": s1,
                     "udf": {"compute_seconds_per_unit": 1.0, "unit": "per_partition"}, "name": "stage1"},
            "ops": [{"kind": "Map", "name": "stage2", "resources": s2,
                     "udf": {"compute_seconds_per_unit": 2.0, "unit": "per_partition"}}],
        },
        "scheduler": {"policy": "optimistic", "target_partition_bytes": MB, "read_num_partitions": tasks,
                      "enable_fusion": False},
    }


def partition_sweep(target_mb: int = 128, rows: int = 8192) -> dict:
    """Two fused 10 ms/row stages over 1 MB rows; task and output overheads make tiny partitions slow."""
    target = target_mb * MB
    return {
        "schema_version": 1,
        "preset": "partition-sweep",
        "cluster": {"nodes": [_node("n0", CPU=8)], "shared_memory_bytes": 2 * rows * MB},
        "pipeline": {
            "read": {"files": [{"name": "sweep", "num_rows": rows, "row_bytes": MB}],
                     "udf": {"compute_seconds_per_unit": 0.01, "unit": "per_row"}, "name": "stage1"},
            "ops": [{"kind": "Map", "name": "stage2",
                     "udf": {"compute_seconds_per_unit": 0.01, "unit": "per_row"}}],
        },
        "scheduler": {"policy": "optimistic", "target_partition_bytes": target,
                      "read_num_partitions": max(1, math.ceil(rows * MB / target)),
                      "task_overhead_seconds": 0.05, "output_overhead_seconds": 0.01},
    }


def recovery(checkpoint_interval: Optional[float] = None) -> dict:
    """Three physical operators spread over two nodes, used for failure injection."""
    sched = {"policy": "optimistic", "target_partition_bytes": 4 * MB, "read_num_partitions": 12}
    if checkpoint_interval:
        sched["checkpoint_interval_seconds"] = checkpoint_interval
    return {
        "schema_version": 1,
        "preset": "recovery",
        "cluster": {"nodes": [_node("n0", CPU=2, GPU=2), _node("n1", CPU=4)],
                    "shared_memory_bytes": 256 * MB},
        "pipeline": {
            "read": {"files": [{"name": "rec", "num_rows": 96, "row_bytes": MB}],
                     "udf": {"compute_seconds_per_unit": 1.0, "unit": "per_partition"}, "name": "load"},
            "ops": [
                {"kind": "FlatMap", "name": "expand", "resources": {"GPU": 1},
                 "udf": {"compute_seconds_per_unit": 0.05, "unit": "per_row",
                         "output_rows_per_input_row": "3/2", "deterministic_seed": 7}},
                {"kind": "Map", "name": "encode", "resources": {"CPU": 1},
                 "udf": {"compute_seconds_per_unit": 0.5, "unit": "per_partition",
                         "output_bytes_per_row": MB // 2}},
            ],
        },
        "scheduler": sched,
        "failures": [],
    }


PRESETS: Dict[str, Callable[[], dict]] = {
    "fig6": fig6,
    "memlimit": memlimit,
    "memlimit-full": memlimit_full_solver,
    "fractional": fractional,
    "fractional-static": lambda: fractional(static=True),
    "partition-sweep": partition_sweep,
    "recovery": recovery,
}

DESCRIPTIONS = {
    "fig6": "3 CPU producers, 1 GPU consumer, 1-partition shared buffer (policy comparison)",
    "memlimit": "160-task load/transform/inference pipeline on a 1/10 clock, memory limit of 8 partitions",
    "memlimit-full": "full-size solver instance of the memlimit pipeline (long)",
    "fractional": "1 s / 2 s CPU stages sharing 8 slots dynamically",
    "fractional-static": "same stages with a static 4/4 slot split",
    "partition-sweep": "2-stage 8192 x 1 MB pipeline at 128 MB target partitions",
    "recovery": "3-operator pipeline over two nodes for failure injection",
}


def get(name: str) -> dict:
    try:
        return PRESETS[name]()
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
