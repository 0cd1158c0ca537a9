"""Logical-to-physical planning: operator fusion, read partitioning, consumption lowering."""

from __future__ import annotations

import math
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

from .core import (
    ALL_TO_ALL_KINDS,
    CONSUME_KINDS,
    DEFAULT_TARGET_PARTITION_BYTES,
    MB,
    ClusterSpec,
    ConfigError,
    Dataset,
    LogicalOperator,
    ResourceRequirement,
    SourceFile,
    UnsupportedOperatorError,
)

FUSABLE = ("Read", "Map", "MapBatches", "FlatMap", "Filter", "Write")


@dataclass
class PhysicalOperator:
    id: int
    fused_chain: Tuple[LogicalOperator, ...]
    resources: ResourceRequirement
    is_source: bool
    downstream: Optional[int] = None
    actor_pool_size: Optional[int] = None
    kind: str = "map"  # "map" | "limit"

    @property
    def name(self) -> str:
        return "->".join(op.label for op in self.fused_chain)

    @property
    def stateful(self) -> bool:
        return any(op.stateful for op in self.fused_chain)

    @property
    def is_terminal(self) -> bool:
        return self.downstream is None

    @property
    def batch_size(self) -> Optional[int]:
        # The first batch op in the chain decides how inputs are coalesced.
        for op in self.fused_chain:
            if op.batch_size is not None:
                return op.batch_size
        return None

    @property
    def init_seconds(self) -> float:
        return max((op.init_seconds for op in self.fused_chain), default=0.0)

    @property
    def limit_n(self) -> Optional[int]:
        return self.fused_chain[0].limit_n if self.kind == "limit" else None


@dataclass(frozen=True)
class ReadTask:
    """One planned read partition: a row range over the concatenated files."""

    index: int
    slices: Tuple[Tuple[SourceFile, int, int], ...]  # (file, start, stop)

    @property
    def num_rows(self) -> int:
        return sum(stop - start for _, start, stop in self.slices)

    @property
    def estimated_bytes(self) -> int:
        return sum((stop - start) * f.row_bytes for f, start, stop in self.slices)

    def rows(self):
        for f, start, stop in self.slices:
            for i in range(start, stop):
                yield f.row(i)


@dataclass(frozen=True)
class ReadPlan:
    files: Tuple[SourceFile, ...]
    num_partitions: int
    target_partition_bytes: int = DEFAULT_TARGET_PARTITION_BYTES

    @property
    def total_bytes(self) -> int:
        return sum(f.estimated_bytes for f in self.files)

    @property
    def total_rows(self) -> int:
        return sum(f.num_rows for f in self.files)

    def tasks(self) -> List[ReadTask]:
        total = self.total_rows
        n = self.num_partitions
        bounds = [total * k // n for k in range(n + 1)]
        offsets, acc = [], 0
        for f in self.files:
            offsets.append(acc)
            acc += f.num_rows
        out = []
        for k in range(n):
            lo, hi = bounds[k], bounds[k + 1]
            slices = []
            for f, off in zip(self.files, offsets):
                s, e = max(lo, off), min(hi, off + f.num_rows)
                if s < e:
                    slices.append((f, s - off, e - off))
            out.append(ReadTask(k, tuple(slices)))
        return out


@dataclass
class PhysicalPlan:
    ops: List[PhysicalOperator]
    consumption: str  # Iter | IterSplit | Cache
    split_n: Optional[int] = None
    files: Tuple[SourceFile, ...] = ()

    @property
    def source(self) -> PhysicalOperator:
        return self.ops[0]

    @property
    def terminal(self) -> PhysicalOperator:
        return self.ops[-1]

    def dump(self, read_plan: Optional[ReadPlan] = None) -> str:
        lines = [f"consumption: {self.consumption}" + (f"({self.split_n})" if self.split_n else "")]
        for op in self.ops:
            tags = []
            if op.is_source:
                tags.append("source")
            if op.is_terminal:
                tags.append("terminal")
            if op.stateful:
                tags.append(f"actors={op.actor_pool_size}")
            tag = f" [{', '.join(tags)}]" if tags else ""
            lines.append(f"  op{op.id} {op.kind} {op.name} {op.resources}{tag}")
        if read_plan is not None:
            lines.append(
                f"read: {len(read_plan.files)} files, {read_plan.total_bytes} bytes, "
                f"{read_plan.num_partitions} partitions, target {read_plan.target_partition_bytes}"
            )
        return "\n".join(lines)


def _fusable(a: LogicalOperator, b: LogicalOperator) -> bool:
    return (
        a.kind in FUSABLE
        and b.kind in FUSABLE
        and b.kind != "Read"
        and a.resources == b.resources
        and a.stateful == b.stateful
    )


def fuse(dataset: Dataset, enable_fusion: bool = True) -> PhysicalPlan:
    """Compile a logical chain into physical operators, fusing adjacent compatible maps."""
    nodes = dataset.chain()
    if nodes[0].op.kind != "Read":
        raise ConfigError("pipeline must start with read")
    logical = [n.op for n in nodes]
    for op in logical:
        if op.kind in ALL_TO_ALL_KINDS:
            raise UnsupportedOperatorError(f"all-to-all operator {op.kind} is not supported")
    consumption, split_n = "Iter", None
    if logical[-1].kind in CONSUME_KINDS:
        consumption, split_n = logical[-1].kind, logical[-1].split_n
        logical = logical[:-1]
    for op in logical:
        if op.kind in CONSUME_KINDS:
            raise ConfigError(f"{op.kind} may only appear at the end of a pipeline")

    groups: List[List[LogicalOperator]] = []
    for op in logical:
        if op.kind == "Limit":
            groups.append([op])
        elif enable_fusion and groups and groups[-1][-1].kind != "Limit" and _fusable(groups[-1][-1], op):
            groups[-1].append(op)
        else:
            groups.append([op])

    ops = []
    for i, chain in enumerate(groups):
        head = chain[0]
        kind = "limit" if head.kind == "Limit" else "map"
        resources = ResourceRequirement.of({}) if kind == "limit" else head.resources
        pool = None
        if head.stateful:
            pool = max((op.concurrency or 1) for op in chain)
        ops.append(
            PhysicalOperator(
                id=i,
                fused_chain=tuple(chain),
                resources=resources,
                is_source=(i == 0),
                downstream=i + 1 if i + 1 < len(groups) else None,
                actor_pool_size=pool,
                kind=kind,
            )
        )
    return PhysicalPlan(ops, consumption, split_n, nodes[0].files)


def execution_slots(cluster: ClusterSpec, resources: ResourceRequirement) -> int:
    total = 0
    for node in cluster.nodes:
        slots = node.slot_dict()
        fits = [
            math.floor(slots.get(name, 0.0) / amount + 1e-9) for name, amount in resources.amounts if amount > 0
        ]
        total += min(fits) if fits else 0
    return total


def plan_read(
    files: Sequence[SourceFile],
    cluster: ClusterSpec,
    target_partition_bytes: int = DEFAULT_TARGET_PARTITION_BYTES,
    resources: ResourceRequirement = ResourceRequirement(),
) -> ReadPlan:
    """Choose enough read partitions to cover every slot, sized ≤ target and ≥ 1 MB."""
    files = tuple(files)
    if not files:
        raise ConfigError("read needs at least one file")
    slots = execution_slots(cluster, resources)
    if slots < 1:
        raise ConfigError("cluster has no slot for the source operator")
    total = sum(f.estimated_bytes for f in files)
    rows = sum(f.num_rows for f in files)
    if total == 0 or rows == 0:
        return ReadPlan(files, 1, target_partition_bytes)
    n = max(slots, math.ceil(total / target_partition_bytes))
    if total < MB:
        n = 1
    elif total / n < MB:
        n = max(1, total // MB)
    n = max(1, min(n, rows))
    return ReadPlan(files, n, target_partition_bytes)


class IterSplitCoordinator:
    """Hands each materialized output partition to exactly one of ``n`` readers.

    Readers call :meth:`pull`; whichever reader asks first gets the next partition.
    """

    def __init__(self, n: int):
        if n < 1:
            raise ConfigError("iter_split needs n >= 1")
        self.n = n
        self._queue = deque()
        self._closed = False
        self._cond = threading.Condition()
        self.assignments: List[List] = [[] for _ in range(n)]

    def offer(self, item) -> None:
        with self._cond:
            if self._closed:
                raise RuntimeError("coordinator is closed")
            self._queue.append(item)
            self._cond.notify()

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def pull(self, reader: int, timeout: Optional[float] = None):
        """Next partition for ``reader``, or ``None`` once the stream is exhausted."""
        if not 0 <= reader < self.n:
            raise IndexError(reader)
        with self._cond:
            while not self._queue and not self._closed:
                if not self._cond.wait(timeout):
                    raise TimeoutError("no partition available")
            if not self._queue:
                return None
            item = self._queue.popleft()
            self.assignments[reader].append(item)
            return item

    def stream(self, reader: int):
        while True:
            item = self.pull(reader)
            if item is None:
                return
            yield item


@dataclass
class Consumption:
    kind: str
    split_n: Optional[int] = None
    pin_outputs: bool = False
    coordinator: Optional[IterSplitCoordinator] = field(default=None, repr=False)


def lower_consumption(plan: PhysicalPlan, kind: Optional[str] = None) -> Consumption:
    kind = kind or plan.consumption
    if kind != plan.consumption:
        raise ConfigError(f"plan terminal is {plan.consumption}, not {kind}")
    if kind == "IterSplit":
        return Consumption(kind, plan.split_n, coordinator=IterSplitCoordinator(plan.split_n))
    if kind == "Cache":
        return Consumption(kind, pin_outputs=True)
    return Consumption("Iter")
