"""Streaming batch execution over simulated heterogeneous clusters."""

from .config import ConfigValidationError, WorkloadConfig
from .core import (
    GB,
    MB,
    ClusterSpec,
    ConfigError,
    Dataset,
    LogicalOperator,
    NodeSpec,
    Partition,
    ResourceRequirement,
    Row,
    SourceFile,
    StreamBatchError,
    UnsupportedOperatorError,
    WorkSpec,
    read,
)
from .engine import Engine, RunReport, RunResult
from .planner import PhysicalPlan, fuse
from .recovery import FailureEvent, NondeterminismError, UnrecoverableError, random_schedule
from .sched import DeadlockError, SchedulerOptions
from .session import Session, run
from .solver import SearchExhausted, SolverOp, SolverProblem, SolverResult, solve
from .store import ObjectStore, UnschedulableError

__all__ = [
    "GB", "MB", "ClusterSpec", "ConfigError", "ConfigValidationError", "Dataset", "DeadlockError", "Engine",
    "FailureEvent", "LogicalOperator", "NodeSpec", "NondeterminismError", "ObjectStore", "Partition",
    "PhysicalPlan", "ResourceRequirement", "Row", "RunReport", "RunResult", "SchedulerOptions",
    "SearchExhausted", "Session", "SolverOp", "SolverProblem", "SolverResult", "SourceFile",
    "StreamBatchError", "UnrecoverableError", "UnschedulableError", "UnsupportedOperatorError",
    "WorkSpec", "WorkloadConfig", "fuse", "random_schedule", "read", "run", "solve",
]
