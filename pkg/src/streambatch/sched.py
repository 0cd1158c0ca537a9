"""Scheduling policies: pessimistic backpressure and the optimistic memory budget.

Everything here is pure bookkeeping over a snapshot of scheduler state; the
event loop that owns the state lives in :mod:`streambatch.engine`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import List, Optional, Sequence, Tuple

POLICIES = ("pessimistic", "optimistic")
EMA_SMOOTHING = 0.5
COLD_TASK_SECONDS = 1.0


class DeadlockError(RuntimeError):
    def __init__(self, message: str, state: Optional[dict] = None):
        super().__init__(message)
        self.state = state or {}


@dataclass
class OpRuntimeStats:
    """Run-time estimates for one physical operator (EMAs over completed tasks)."""

    op_id: int
    task_seconds: Optional[float] = None
    input_bytes: Optional[float] = None
    output_bytes: Optional[float] = None
    completed: int = 0
    buffered_outputs_bytes: int = 0
    smoothing: float = EMA_SMOOTHING

    def _ema(self, old, new):
        return new if old is None else self.smoothing * new + (1 - self.smoothing) * old

    def observe(self, seconds: float, in_bytes: int, out_bytes: int) -> None:
        self.task_seconds = self._ema(self.task_seconds, seconds)
        self.input_bytes = self._ema(self.input_bytes, in_bytes)
        self.output_bytes = self._ema(self.output_bytes, out_bytes)
        self.completed += 1

    @property
    def ratio(self) -> float:
        """Output:input size ratio; 1.0 until estimates exist."""
        if not self.input_bytes or self.output_bytes is None:
            return 1.0
        return self.output_bytes / self.input_bytes


@dataclass(frozen=True)
class OpEstimate:
    """Inputs to the budget update for one non-source operator."""

    slots: float  # E_i, available execution slots
    task_seconds: float  # T_i
    input_bytes: float = 1  # I_i
    output_bytes: float = 1  # O_i


def _div(a, b):
    # exact for integer and Fraction operands so worked examples stay integral
    if isinstance(a, (int, Fraction)) and isinstance(b, (int, Fraction)):
        return _norm(Fraction(a) / Fraction(b))
    return a / b


def _norm(x):
    return int(x) if isinstance(x, Fraction) and x.denominator == 1 else x


def processing_time(ops: Sequence[OpEstimate]) -> Tuple[list, list, float]:
    """Seconds the pipeline needs per source partition.

    ``ops`` are the non-source operators in pipeline order.  Returns the
    per-operator times, the cumulative output multipliers (starting with 1 for
    the source) and their sum.  An operator with no slots makes the total
    infinite.
    """
    alphas = [1]
    per_op = []
    total = 0
    for op in ops:
        if op.slots <= 0:
            p = math.inf
        else:
            p = _norm(_div(op.task_seconds, op.slots) * alphas[-1])
        per_op.append(p)
        total = total + p
        alphas.append(_norm(alphas[-1] * _div(op.output_bytes, op.input_bytes)))
    return per_op, alphas, _norm(total)


def update_budget(budget, source_partition_bytes, total_processing_time, capacity):
    """One replenishment tick.

    With no downstream estimate (``total_processing_time`` of 0 or None) the budget
    grows by one source partition per tick.  Result is clamped to ``[0, capacity]``.
    """
    if not total_processing_time:
        grown = budget + source_partition_bytes
    elif math.isinf(total_processing_time):
        grown = budget
    else:
        grown = budget + _div(source_partition_bytes, total_processing_time)
    return max(0, min(capacity, grown))


def source_gate(source_partition_bytes, capacity):
    """Budget needed to launch a source task; never more than the budget ceiling."""
    return min(source_partition_bytes, capacity)


@dataclass
class OpView:
    op_id: int
    is_source: bool = False
    has_input: bool = True
    has_resources: bool = True
    has_buffer_space: bool = True
    buffered_outputs_bytes: int = 0

    @property
    def qualified(self) -> bool:
        return self.has_input and self.has_resources and self.has_buffer_space


def select_operator_pessimistic(ops: Sequence[OpView]) -> Optional[int]:
    """Qualified operator with the fewest buffered output bytes; ties go to the lowest id."""
    q = [o for o in ops if o.qualified]
    if not q:
        return None
    return min(q, key=lambda o: (o.buffered_outputs_bytes, o.op_id)).op_id


def select_operator_optimistic(ops: Sequence[OpView], budget, source_partition_bytes, capacity=math.inf):
    """One round of the optimistic policy.

    A source task launches first if the budget covers its expected output and a
    slot is free; the remaining choice is the same argmin as the pessimistic
    policy over non-source operators.  Returns ``(launches, budget)``.
    """
    launches = []
    src = next((o for o in ops if o.is_source), None)
    if (
        src is not None
        and src.has_input
        and src.has_resources
        and budget >= source_gate(source_partition_bytes, capacity)
    ):
        launches.append(src.op_id)
        budget -= source_partition_bytes
        budget = max(budget, 0)
    # Resource views are not re-evaluated within a round; the event loop does that.
    rest = [o for o in ops if not o.is_source]
    pick = select_operator_pessimistic(rest)
    if pick is not None:
        launches.append(pick)
    return launches, budget


@dataclass
class QueuedPartition:
    pid: str
    size_bytes: int
    num_rows: int


def coalesce(queue: Sequence, target_bytes: int, batch_size: Optional[int] = None) -> List[list]:
    """Group consecutive queued partitions into task inputs.

    A group keeps growing while the next partition still fits under
    ``target_bytes`` or, for batch consumers, while it holds fewer than
    ``batch_size`` rows.  Partitions are never split here.
    """
    groups: List[list] = []
    cur: list = []
    nbytes = rows = 0
    for item in queue:
        if cur and not (
            nbytes + item.size_bytes <= target_bytes or (batch_size is not None and rows < batch_size)
        ):
            groups.append(cur)
            cur, nbytes, rows = [], 0, 0
        cur.append(item)
        nbytes += item.size_bytes
        rows += item.num_rows
    if cur:
        groups.append(cur)
    return groups


def first_group(queue: Sequence, target_bytes: int, batch_size: Optional[int] = None) -> list:
    """Same rule as :func:`coalesce`, but only builds the head group."""
    cur: list = []
    nbytes = rows = 0
    for item in queue:
        if cur and not (
            nbytes + item.size_bytes <= target_bytes or (batch_size is not None and rows < batch_size)
        ):
            break
        cur.append(item)
        nbytes += item.size_bytes
        rows += item.num_rows
    return cur


@dataclass
class SchedulerOptions:
    policy: str = "optimistic"
    target_partition_bytes: int = 128 * 2**20
    max_tasks_in_flight_per_slot: int = 1
    budget_interval_seconds: float = 1.0
    budget_accrual: str = "tick"  # tick | continuous
    source_size_overestimate: float = 1.0
    task_overhead_seconds: float = 0.0
    output_overhead_seconds: float = 0.0
    enable_fusion: bool = True
    dynamic_repartition: bool = True
    read_num_partitions: Optional[int] = None
    allow_source_reread: bool = True
    checkpoint_interval_seconds: Optional[float] = None
    throughput_window_seconds: float = 1.0
    max_time_seconds: float = 1e7

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}")
        if self.max_tasks_in_flight_per_slot < 1:
            raise ValueError("max_tasks_in_flight_per_slot must be >= 1")
        if self.target_partition_bytes < 1:
            raise ValueError("target_partition_bytes must be >= 1")
        if self.budget_accrual not in ("tick", "continuous"):
            raise ValueError("budget_accrual must be 'tick' or 'continuous'")
        if self.budget_interval_seconds <= 0:
            raise ValueError("budget_interval_seconds must be > 0")
