"""Task execution: generator tasks with executor-side repartitioning, slots and actor pools."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

from .core import (
    RESOURCE_SCALE,
    LogicalOperator,
    NodeSpec,
    Partition,
    ResourceRequirement,
    Row,
    StreamBatchError,
)


class TaskFailedError(StreamBatchError):
    def __init__(self, task_id: str, reason: str = ""):
        super().__init__(f"task {task_id} failed: {reason}")
        self.task_id = task_id


class InsufficientResourcesError(StreamBatchError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    id: str
    op_id: int
    input_pids: Tuple[str, ...]
    target_partition_bytes: int
    batch_size: Optional[int] = None
    seed: int = 0
    read_index: Optional[int] = None  # set for source tasks


@dataclass(frozen=True)
class Compute:
    seconds: float


@dataclass(frozen=True)
class Flush:
    partition: Partition


Step = Union[Compute, Flush]


class _Boundary:
    __repr__ = lambda self: "BOUNDARY"  # noqa: E731


BOUNDARY = _Boundary()


def slice_batches(inputs: Iterable[Union[Partition, Sequence[Row]]], batch_size: int) -> Iterator[List[Row]]:
    """Consecutive batches of exactly ``batch_size`` rows across partition boundaries."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    buf: List[Row] = []
    for part in inputs:
        rows = part.rows if isinstance(part, Partition) else part
        for row in rows:
            buf.append(row)
            if len(buf) == batch_size:
                yield buf
                buf = []
    if buf:
        yield buf


def _stage(upstream: Iterator, op: LogicalOperator) -> Iterator:
    """Apply one logical operator to a stream of rows, cost markers and boundaries."""
    work = op.udf
    cost = work.compute_seconds_per_unit
    unit = work.unit
    if unit == "per_batch" and op.batch_size is None:
        unit = "per_partition"

    if unit == "per_row":
        for item in upstream:
            if isinstance(item, Row):
                if cost:
                    yield cost
                yield from work.apply(item)
            else:
                yield item
        return

    if unit == "per_partition":
        buf: List[Row] = []
        for item in upstream:
            if isinstance(item, Row):
                buf.append(item)
            elif item is BOUNDARY:
                if cost:
                    yield cost
                for row in buf:
                    yield from work.apply(row)
                buf = []
                yield BOUNDARY
            else:
                yield item
        if buf:
            if cost:
                yield cost
            for row in buf:
                yield from work.apply(row)
        return

    # per_batch: batches cross input partition boundaries.
    size = op.batch_size
    buf = []
    for item in upstream:
        if isinstance(item, Row):
            buf.append(item)
            if len(buf) == size:
                if cost:
                    yield cost
                for row in buf:
                    yield from work.apply(row)
                buf = []
        elif item is not BOUNDARY:
            yield item
    if buf:
        if cost:
            yield cost
        for row in buf:
            yield from work.apply(row)
    yield BOUNDARY


def _input_stream(inputs: Sequence[Sequence[Row]]) -> Iterator:
    for rows in inputs:
        yield from rows
        yield BOUNDARY


def run_task(
    spec: TaskSpec,
    chain: Sequence[LogicalOperator],
    inputs: Sequence[Sequence[Row]],
    location: str = "",
) -> Iterator[Step]:
    """Run a fused UDF chain as a generator task.

    Output rows accumulate in a buffer; the buffer is flushed as a partition as
    soon as its size strictly exceeds the target, and once more at the end.
    Consecutive compute costs are merged, since only flushes are observable.
    Partition boundaries depend only on the input rows and the target size.
    """
    stream: Iterator = _input_stream(inputs)
    for op in chain:
        stream = _stage(stream, op)
    target = spec.target_partition_bytes
    pending = 0.0
    buf: List[Row] = []
    nbytes = 0
    index = 0
    for item in stream:
        if isinstance(item, Row):
            buf.append(item)
            nbytes += item.nominal_bytes
            if nbytes > target:
                if pending:
                    yield Compute(pending)
                    pending = 0.0
                yield Flush(Partition(tuple(buf), spec.id, index, location))
                index += 1
                buf, nbytes = [], 0
        elif item is not BOUNDARY:
            pending += item
    if pending:
        yield Compute(pending)
    if buf:
        yield Flush(Partition(tuple(buf), spec.id, index, location))


def run_task_to_completion(spec, chain, inputs, location="") -> Tuple[List[Partition], float]:
    """Drain a task; returns its partitions and total compute seconds."""
    parts, seconds = [], 0.0
    for step in run_task(spec, chain, inputs, location):
        if isinstance(step, Compute):
            seconds += step.seconds
        else:
            parts.append(step.partition)
    return parts, seconds


class ResourcePool:
    """Per-node slot accounting in fixed-point thousandths."""

    def __init__(self, nodes: Iterable[NodeSpec] = (), tasks_per_slot: int = 1):
        self.tasks_per_slot = tasks_per_slot
        self.total: Dict[str, Dict[str, int]] = {}
        self.free: Dict[str, Dict[str, int]] = {}
        for n in nodes:
            self.add_node(n)

    def add_node(self, node: NodeSpec) -> None:
        if node.node_id in self.total:
            raise ValueError(f"node {node.node_id} already present")
        slots = {k: int(round(v * RESOURCE_SCALE)) * self.tasks_per_slot for k, v in node.slots}
        self.total[node.node_id] = dict(slots)
        self.free[node.node_id] = dict(slots)

    def remove_node(self, node_id: str) -> None:
        if node_id not in self.total:
            raise KeyError(node_id)
        del self.total[node_id]
        del self.free[node_id]

    @property
    def nodes(self) -> List[str]:
        return list(self.total)

    def fits(self, node_id: str, req: ResourceRequirement) -> bool:
        free = self.free[node_id]
        return all(free.get(k, 0) >= v for k, v in req.fixed().items())

    def count_fits(self, req: ResourceRequirement, node_id: Optional[str] = None) -> int:
        """How many more tasks with ``req`` could start right now."""
        fixed = {k: v for k, v in req.fixed().items() if v > 0}
        total = 0
        for nid in [node_id] if node_id else self.nodes:
            free = self.free[nid]
            if not fixed:
                continue
            total += min(free.get(k, 0) // v for k, v in fixed.items())
        return total

    def acquire(self, req: ResourceRequirement, prefer: Sequence[str] = ()) -> Optional[str]:
        order = [n for n in prefer if n in self.free] + [n for n in self.nodes if n not in prefer]
        for nid in order:
            if self.fits(nid, req):
                free = self.free[nid]
                for k, v in req.fixed().items():
                    free[k] = free.get(k, 0) - v
                return nid
        return None

    def release(self, node_id: str, req: ResourceRequirement) -> None:
        if node_id not in self.free:
            return  # node already removed
        free = self.free[node_id]
        for k, v in req.fixed().items():
            free[k] = free.get(k, 0) + v
            assert free[k] <= self.total[node_id].get(k, 0)

    def held(self, resource: str) -> int:
        return sum(self.total[n].get(resource, 0) - self.free[n].get(resource, 0) for n in self.nodes)


@dataclass
class ActorWorker:
    id: str
    node: str
    inflight: int = 0
    tasks_run: int = 0
    initialized: bool = False


@dataclass
class ActorPool:
    op_id: int
    resources: ResourceRequirement
    init_seconds: float = 0.0
    workers: List[ActorWorker] = field(default_factory=list)
    max_inflight: int = 1

    @classmethod
    def create(cls, op_id, resources: ResourceRequirement, size: int, pool: ResourcePool, init_seconds=0.0,
               max_inflight=1) -> "ActorPool":
        """Acquire ``size`` workers' resources for the pool's lifetime."""
        actor_pool = cls(op_id, resources, init_seconds, max_inflight=max_inflight)
        for i in range(size):
            node = pool.acquire(resources)
            if node is None:
                actor_pool.release_all(pool)
                raise InsufficientResourcesError(
                    f"actor pool for op{op_id} needs {size} x {resources}, only {i} available"
                )
            actor_pool.workers.append(ActorWorker(f"op{op_id}-actor{i}", node))
        return actor_pool

    def release_all(self, pool: ResourcePool) -> None:
        for w in self.workers:
            pool.release(w.node, self.resources)
        self.workers.clear()

    def drop_node(self, node_id: str) -> List[ActorWorker]:
        gone = [w for w in self.workers if w.node == node_id]
        self.workers = [w for w in self.workers if w.node != node_id]
        return gone

    def grow(self, target_size: int, pool: ResourcePool) -> None:
        n = len(self.workers)
        while len(self.workers) < target_size:
            node = pool.acquire(self.resources)
            if node is None:
                return
            self.workers.append(ActorWorker(f"op{self.op_id}-actor{n}", node))
            n += 1

    def idle_worker(self) -> Optional[ActorWorker]:
        ready = [w for w in self.workers if w.inflight < self.max_inflight]
        if not ready:
            return None
        return min(ready, key=lambda w: (w.inflight, w.tasks_run, w.id))

    def dispatch(self) -> Tuple[ActorWorker, float]:
        """Pick the least-loaded worker; returns it and the init cost owed before its first task."""
        w = self.idle_worker()
        if w is None:
            raise InsufficientResourcesError(f"no idle actor in pool for op{self.op_id}")
        w.inflight += 1
        w.tasks_run += 1
        init = 0.0
        if not w.initialized:
            w.initialized = True
            init = self.init_seconds
        return w, init

    def finish(self, worker: ActorWorker) -> None:
        worker.inflight -= 1
