"""Discrete-event execution engine.

One logical control thread consumes an ordered event queue: task progress,
memory wake-ups, cluster changes and the budget timer.  Simulated tasks are
generators from :func:`streambatch.exec.run_task`; their compute time advances
the virtual clock, or is slept for real in wall-clock mode.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import math
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, FrozenSet, List, Optional, Sequence, Set

from .core import ClusterSpec, ConfigError, NodeSpec, Partition, StreamBatchError
from .exec import ActorPool, Compute, Flush, ResourcePool, TaskSpec, run_task
from .planner import Consumption, PhysicalOperator, PhysicalPlan, ReadPlan, lower_consumption, plan_read
from .recovery import (
    FailureEvent,
    LineageRecord,
    LineageTable,
    UnrecoverableError,
    checkpoint_cut,
    close_cut,
    validate_schedule,
)
from .sched import (
    COLD_TASK_SECONDS,
    DeadlockError,
    OpEstimate,
    OpRuntimeStats,
    OpView,
    SchedulerOptions,
    first_group,
    processing_time,
    select_operator_pessimistic,
    source_gate,
    update_budget,
)
from .store import ObjectStore, Ref, UnschedulableError

log = logging.getLogger(__name__)

# Event priorities within one timestamp.
P_TASK, P_WAKE, P_CLUSTER, P_TIMER, P_CHECKPOINT = 0, 1, 2, 3, 4
NO_SPLIT = 2**62


@dataclass
class PartMeta:
    pid: str
    size_bytes: int
    num_rows: int
    origins: FrozenSet[str]
    node: str
    lost: bool = False


@dataclass
class Job:
    """A task waiting to run outside the normal policy: a retry or a recovery."""

    spec: TaskSpec
    mode: str  # retry | recovery
    emit_from: int = 0
    wanted: Set[int] = field(default_factory=set)
    owned: List[str] = field(default_factory=list)
    missing: Set[str] = field(default_factory=set)
    launched: bool = False
    need_bytes: int = 0  # a preempted task waits until this much memory is free


@dataclass(eq=False)
class TaskRun:
    spec: TaskSpec
    op: PhysicalOperator
    mode: str
    node: str
    worker_id: str
    launched_at: float
    origins: FrozenSet[str]
    held: List[str]
    emit_from: int = 0
    wanted: Set[int] = field(default_factory=set)
    actor: object = None
    gen: object = None
    inputs: list = field(default_factory=list)
    fetch_queue: List[str] = field(default_factory=list)
    pending: Optional[Partition] = None
    waiting: str = ""  # "" | put | fetch
    cancelled: bool = False
    out_count: int = 0
    out_bytes: int = 0
    in_bytes: int = 0


@dataclass
class RunReport:
    jct: float
    policy: str
    rows_in: int
    rows_out: int
    peak_memory_bytes: int
    memory_limit_bytes: int
    spilled_bytes: int
    spill_seconds: float
    unspill_seconds: float
    op_tasks: Dict[str, int]
    op_mean_task_seconds: Dict[str, float]
    throughput: List[tuple]
    tasks_launched: int
    tasks_reexecuted: int
    reexecuted_task_ids: List[str]
    lost_partitions: List[str]
    failed_task_ids: List[str]
    preempted_task_ids: List[str]
    rollbacks: int
    rollback_tasks: int
    num_outputs: int
    output_digest: str
    source_tasks_launched: int
    lineage: dict = field(default_factory=dict, repr=False)

    def to_json(self) -> dict:
        d = dict(self.__dict__)
        d["throughput"] = [list(x) for x in self.throughput]
        return d


@dataclass
class RunResult:
    report: RunReport
    outputs: List[Partition]
    trace: List[dict]
    consumption: Consumption
    cached_refs: List[Ref] = field(default_factory=list)
    store: Optional[ObjectStore] = None
    lineage: Optional[LineageTable] = None

    def rows(self):
        for p in self.outputs:
            yield from p.rows


class Engine:
    def __init__(
        self,
        plan: PhysicalPlan,
        cluster: ClusterSpec,
        options: Optional[SchedulerOptions] = None,
        failures: Sequence[FailureEvent] = (),
        clock: str = "virtual",
        wall_time_scale: float = 1.0,
        initial_partitions: Optional[List[Partition]] = None,
        store: Optional[ObjectStore] = None,
    ):
        self.plan = plan
        self.cluster = cluster
        self.opt = options or SchedulerOptions()
        self.failures = validate_schedule(failures)
        if clock not in ("virtual", "wall"):
            raise ConfigError("clock must be 'virtual' or 'wall'")
        self.clock_mode = clock
        self.wall_scale = wall_time_scale
        self.ops = plan.ops
        self.consumption = lower_consumption(plan)
        self.store = store or ObjectStore(cluster.shared_memory_bytes, cluster.spill_bandwidth_bytes_per_s)
        self.capacity = self.store.capacity
        self.resources = ResourcePool(cluster.nodes, self.opt.max_tasks_in_flight_per_slot)
        self.node_specs: Dict[str, NodeSpec] = {n.node_id: n for n in cluster.nodes}
        self.lineage = LineageTable()
        self.stats = {op.id: OpRuntimeStats(op.id) for op in self.ops}
        self.queues: Dict[int, Deque[PartMeta]] = {op.id: deque() for op in self.ops}
        self.meta: Dict[str, PartMeta] = {}
        self.trace: List[dict] = []
        self.now = 0.0
        self._heap: list = []
        self._seq = itertools.count()
        self._task_seq = itertools.count()
        self.running: List[TaskRun] = []
        self.waiters: Deque[TaskRun] = deque()
        self.jobs: List[Job] = []
        self.recovering: Dict[str, list] = {}
        self.node_workers: Dict[str, Set[int]] = {n: set() for n in self.node_specs}
        self.pools: Dict[int, ActorPool] = {}
        self.outputs: List[Partition] = []
        self.output_origins: List[FrozenSet[str]] = []
        self.output_times: List[tuple] = []
        self.cached_refs: List[Ref] = []
        self.lost_cache: List[str] = []
        self.delivered: Dict[str, int] = {}
        self.completed_tasks: List[tuple] = []
        self.src_completed: Set[str] = set()
        self.op_durations: Dict[int, List[float]] = {op.id: [] for op in self.ops}
        self.op_task_counts: Dict[int, int] = {op.id: 0 for op in self.ops}
        self.limit_left: Dict[int, int] = {op.id: op.limit_n for op in self.ops if op.kind == "limit"}
        self.cut_off = -1  # ops <= cut_off stop producing once a limit is satisfied
        self.tasks_launched = 0
        self.source_launches = 0
        self.tasks_reexecuted = 0
        self.reexecuted_ids: List[str] = []
        self.failed_ids: List[str] = []
        self.preempted_ids: List[str] = []
        self.lost_pids: List[str] = []
        self.rollbacks = 0
        self.rollback_tasks = 0
        self.ckpt_done: Set[str] = set()
        self.finished = False
        self.rows_in = 0

        src = self.ops[0]
        if initial_partitions is not None:
            self.read_plan = None
            self.read_tasks = []
            self.source_pending: Deque[int] = deque()
            for p in initial_partitions:
                self._register(p, frozenset({p.producing_task}))
                self.rows_in += p.num_rows
            self.initial = list(initial_partitions)
        else:
            self.initial = None
            if self.opt.read_num_partitions:
                self.read_plan = ReadPlan(plan.files, self.opt.read_num_partitions, self.opt.target_partition_bytes)
            else:
                self.read_plan = plan_read(plan.files, cluster, self.opt.target_partition_bytes, src.resources)
            self.read_tasks = self.read_plan.tasks()
            self.source_pending = deque(range(len(self.read_tasks)))
            self.rows_in = self.read_plan.total_rows
        self.budget = float(self.capacity)
        self._rate = 0.0
        self._accrued_at = 0.0
        self._wakeup_at: Optional[float] = None
        self._budget_grew = False
        self._budget_stuck = False
        self._check_deadlock_at_tick = False
        self.src_estimate_observed: Optional[float] = None
        self.src_estimate_cold = self._cold_source_estimate()
        if self.opt.checkpoint_interval_seconds and any(op.kind == "limit" for op in self.ops):
            raise ConfigError("checkpoint emulation does not support limit")

    # ------------------------------------------------------------------ utils
    def emit(self, kind: str, **fields) -> None:
        rec = {"t": round(self.now, 9), "kind": kind}
        rec.update(fields)
        self.trace.append(rec)

    def _push(self, t: float, prio: int, fn, *args) -> None:
        heapq.heappush(self._heap, (t, prio, next(self._seq), fn, args))

    def _register(self, p: Partition, origins) -> PartMeta:
        m = PartMeta(p.id, p.size_bytes, p.num_rows, frozenset(origins), p.location)
        self.meta[p.id] = m
        return m

    def _cold_source_estimate(self) -> float:
        if not self.read_tasks:
            return float(self.opt.target_partition_bytes)
        rows = sum(t.num_rows for t in self.read_tasks) / len(self.read_tasks)
        size = sum(t.estimated_bytes for t in self.read_tasks) / len(self.read_tasks)
        row_bytes = size / rows if rows else 0.0
        for lop in self.ops[0].fused_chain:
            rows *= float(lop.udf.output_rows_per_input_row)
            if lop.udf.output_bytes_per_row is not None:
                row_bytes = lop.udf.output_bytes_per_row
        return max(rows * row_bytes, 1.0)

    @property
    def source_estimate(self) -> float:
        base = self.src_estimate_observed if self.src_estimate_observed is not None else self.src_estimate_cold
        return base * self.opt.source_size_overestimate

    def _downstream_queue_op(self, op: PhysicalOperator) -> Optional[int]:
        d = op.downstream
        while d is not None and self.ops[d].kind == "limit":
            d = self.ops[d].downstream
        return d

    def buffered_outputs(self, op: PhysicalOperator) -> int:
        d = self._downstream_queue_op(op)
        if d is None:
            return 0
        return sum(m.size_bytes for m in self.queues[d])

    def _running_of(self, op_id: int) -> List[TaskRun]:
        return [t for t in self.running if t.op.id == op_id]

    def op_finished(self, op_id: int) -> bool:
        """True when op ``op_id`` and everything upstream of it can produce nothing more."""
        if op_id < 0:
            return True
        if op_id <= self.cut_off:
            return not any(t.op.id <= op_id for t in self.running)
        if self.source_pending:
            return False
        for t in self.running:
            if t.op.id <= op_id:
                return False
        for j in self.jobs:
            if j.spec.op_id <= op_id:
                return False
        for k in range(1, op_id + 1):
            if self.queues[k]:
                return False
        for w in self.waiters:
            if w.op.id <= op_id:
                return False
        return True

    # --------------------------------------------------------------- views
    def _group(self, op: PhysicalOperator) -> list:
        q = self.queues[op.id]
        if not q or q[0].lost:
            return []
        group = first_group(q, self.opt.target_partition_bytes, op.batch_size)
        group = list(itertools.takewhile(lambda m: not m.lost, group))
        if not group:
            return []
        if len(group) < len(q) and not q[len(group)].lost:
            return group  # the next partition does not fit: the group is complete
        nbytes = sum(m.size_bytes for m in group)
        rows = sum(m.num_rows for m in group)
        full = nbytes >= self.opt.target_partition_bytes and (op.batch_size is None or rows >= op.batch_size)
        if full or self.op_finished(op.id - 1):
            return group
        if self.store.free_bytes < self.opt.target_partition_bytes:
            return group
        if not any(t.op.id < op.id for t in self.running) and not self.source_pending:
            return group
        if not any(t.op.id < op.id for t in self.running if not t.waiting) and not self.source_pending:
            return group
        if not any(t.op.id < op.id for t in self.running):
            return group
        return []

    def _has_resources(self, op: PhysicalOperator) -> bool:
        if op.id in self.pools:
            return self.pools[op.id].idle_worker() is not None
        return self.resources.count_fits(op.resources) >= 1

    def _has_buffer_space(self, op: PhysicalOperator, group_bytes: int) -> bool:
        if op.is_terminal and not self.consumption.pin_outputs:
            return True
        return self.store.free_bytes + group_bytes >= self.opt.target_partition_bytes

    def _view(self, op: PhysicalOperator) -> OpView:
        if op.is_source:
            has_input = bool(self.source_pending) and op.id > self.cut_off
            gbytes = 0
        else:
            group = self._group(op) if op.id > self.cut_off else []
            has_input = bool(group)
            gbytes = sum(m.size_bytes for m in group)
        return OpView(
            op.id,
            is_source=op.is_source,
            has_input=has_input,
            has_resources=self._has_resources(op),
            has_buffer_space=self._has_buffer_space(op, gbytes),
            buffered_outputs_bytes=self.buffered_outputs(op),
        )

    # ---------------------------------------------------------------- launch
    def _alloc_worker(self, node: str) -> str:
        busy = self.node_workers.setdefault(node, set())
        i = 0
        while i in busy:
            i += 1
        busy.add(i)
        return f"{node}/w{i}"

    def _free_worker(self, t: TaskRun) -> None:
        if t.actor is not None:
            self.pools[t.op.id].finish(t.actor)
            return
        node, _, idx = t.worker_id.rpartition("/w")
        self.node_workers.get(node, set()).discard(int(idx))
        self.resources.release(t.node, t.op.resources)

    def _place(self, op: PhysicalOperator, input_pids: Sequence[str]):
        """Acquire a slot (or actor). Returns (node, worker_id, actor, init_seconds) or None."""
        if op.id in self.pools:
            pool = self.pools[op.id]
            if pool.idle_worker() is None:
                return None
            w, init = pool.dispatch()
            return w.node, w.id, w, init
        share: Dict[str, int] = {}
        for pid in input_pids:
            m = self.meta.get(pid)
            if m is not None:
                share[m.node] = share.get(m.node, 0) + m.size_bytes
        prefer = sorted(share, key=lambda n: (-share[n], n))
        node = self.resources.acquire(op.resources, prefer)
        if node is None:
            return None
        return node, self._alloc_worker(node), None, 0.0

    def _launch(self, op, spec: TaskSpec, mode: str, held: List[str], emit_from=0, wanted=()) -> Optional[TaskRun]:
        placed = self._place(op, spec.input_pids)
        if placed is None:
            return None
        node, wid, actor, init = placed
        self.lineage.register(
            LineageRecord(spec.id, op.id, spec.input_pids, spec.target_partition_bytes, spec.read_index)
        )
        if spec.read_index is not None:
            origins = frozenset({spec.id})
        else:
            origins = frozenset().union(*(self.meta[p].origins for p in spec.input_pids)) if spec.input_pids else frozenset()
        t = TaskRun(spec, op, mode, node, wid, self.now, origins, list(held), emit_from, set(wanted), actor)
        for pid in t.held:
            self.store.pin(Ref(pid))
        self.running.append(t)
        self.tasks_launched += 1
        self.op_task_counts[op.id] += 1
        if op.is_source and mode == "normal":
            self.source_launches += 1
        self.emit("launch", task=spec.id, op=op.id, node=node, worker=wid, mode=mode,
                  bytes=sum(self.meta[p].size_bytes for p in spec.input_pids if p in self.meta))
        delay = self.opt.task_overhead_seconds + init
        self._push(self.now + delay, P_TASK, self._start, t)
        return t

    def _launch_source(self) -> bool:
        op = self.ops[0]
        idx = self.source_pending[0]
        spec = TaskSpec(f"r{idx}", op.id, (), self._target(), None, idx, read_index=idx)
        if self._launch(op, spec, "normal", []) is None:
            return False
        self.source_pending.popleft()
        return True

    def _launch_op(self, op: PhysicalOperator) -> bool:
        group = self._group(op)
        if not group:
            return False
        pids = tuple(m.pid for m in group)
        spec = TaskSpec(f"o{op.id}.{next(self._task_seq)}", op.id, pids, self._target(), op.batch_size)
        if self._launch(op, spec, "normal", list(pids)) is None:
            return False
        q = self.queues[op.id]
        for _ in group:
            q.popleft()
        return True

    def _target(self) -> int:
        return self.opt.target_partition_bytes if self.opt.dynamic_repartition else NO_SPLIT

    # ------------------------------------------------------------ task body
    def _start(self, t: TaskRun) -> None:
        if t.cancelled:
            return
        t.fetch_queue = list(t.spec.input_pids)
        self._fetch(t)

    def _fetch(self, t: TaskRun) -> None:
        cost = 0.0
        while t.fetch_queue:
            pid = t.fetch_queue[0]
            if not self.store.alive(pid):
                self._fail_task(t, f"input {pid} lost")
                return
            res = self.store.try_fetch(Ref(pid))
            if res is None:
                t.waiting = "fetch"
                self.waiters.append(t)
                return
            part, c = res
            cost += c
            t.inputs.append(part)
            t.in_bytes += part.size_bytes
            t.fetch_queue.pop(0)
        t.waiting = ""
        if t.spec.read_index is not None:
            inputs = [list(self.read_tasks[t.spec.read_index].rows())]
            t.in_bytes = self.read_tasks[t.spec.read_index].estimated_bytes
        else:
            inputs = [p.rows for p in t.inputs]
        t.gen = run_task(t.spec, t.op.fused_chain, inputs, t.node)
        if cost:
            self._push(self.now + cost, P_TASK, self._advance, t)
        else:
            self._advance(t)

    def _advance(self, t: TaskRun) -> None:
        if t.cancelled:
            return
        for step in t.gen:
            if isinstance(step, Compute):
                self._push(self.now + step.seconds, P_TASK, self._advance, t)
                return
            part = step.partition
            idx = part.output_index
            t.out_count += 1
            t.out_bytes += part.size_bytes
            if t.mode == "retry" and idx < t.emit_from:
                continue
            if t.mode == "recovery" and idx not in t.wanted:
                continue
            delay = self._deliver(t, part)
            if delay is None:
                return  # blocked waiting for memory
            delay += self.opt.output_overhead_seconds
            if delay > 0:
                self._push(self.now + delay, P_TASK, self._advance, t)
                return
        self._finish(t)

    def _deliver(self, t: TaskRun, part: Partition) -> Optional[float]:
        """Materialize one output. Returns seconds charged, or None if the task must wait."""
        to_store = not t.op.is_terminal or self.consumption.pin_outputs
        if t.mode == "recovery":
            owners = self.recovering.get(part.id, [])
            if not owners:
                return 0.0
            to_store = True
        if not to_store:
            self._on_output(t, part, None)
            return 0.0
        res = self.store.try_put(part, refs=1)
        if res is None:
            t.pending = part
            t.waiting = "put"
            self.waiters.append(t)
            self.emit("stall", task=t.spec.id, op=t.op.id, bytes=part.size_bytes)
            return None
        ref, cost = res
        self._on_output(t, part, ref)
        return cost

    def _on_output(self, t: TaskRun, part: Partition, ref: Optional[Ref]) -> None:
        m = self._register(part, t.origins)
        tid = t.spec.id
        self.delivered[tid] = max(self.delivered.get(tid, 0), part.output_index + 1)
        self.emit("output", task=tid, op=t.op.id, index=part.output_index, rows=part.num_rows,
                  bytes=part.size_bytes)
        if t.mode == "recovery":
            self._recovered(part, ref)
            return
        self._push_output(t.op, part, m, ref)

    def _push_output(self, op: PhysicalOperator, part: Optional[Partition], m: PartMeta, ref: Optional[Ref]) -> None:
        d = op.downstream
        if d is None:
            self._sink(part, m, ref)
            return
        if op.id <= self.cut_off:
            if ref is not None:
                self.store.drop_ref(ref)
            return
        dop = self.ops[d]
        if dop.kind == "limit":
            self._limit(dop, m)
            return
        self.queues[d].append(m)

    def _sink(self, part: Partition, m: PartMeta, ref: Optional[Ref]) -> None:
        self.outputs.append(part)
        self.output_origins.append(m.origins)
        self.output_times.append((self.now, part.num_rows))
        if self.consumption.pin_outputs and ref is not None:
            self.cached_refs.append(ref)
        elif ref is not None:
            self.store.drop_ref(ref)
        if self.consumption.coordinator is not None:
            self.consumption.coordinator.offer(part)

    def _limit(self, lop: PhysicalOperator, m: PartMeta) -> None:
        left = self.limit_left[lop.id]
        ref = Ref(m.pid)
        if left <= 0:
            if self.store.alive(m.pid):
                self.store.drop_ref(ref)
            return
        if m.num_rows <= left:
            self.limit_left[lop.id] = left - m.num_rows
            self._push_output(lop, self.store.entry(m.pid).partition if lop.is_terminal else None, m, ref)
        else:
            src = self.store.entry(m.pid).partition
            tid = f"limit{lop.id}.{next(self._task_seq)}"
            sliced = Partition(src.rows[:left], tid, 0, src.location)
            self.lineage.register(LineageRecord(tid, lop.id, (m.pid,), 0))
            self.lineage.record_output_count(tid, 1)
            self.store.drop_ref(ref)
            res = self.store.try_put(sliced)
            if res is None:
                raise UnschedulableError(f"no memory for limit slice {tid}")
            sm = self._register(sliced, m.origins)
            self.limit_left[lop.id] = 0
            self._push_output(lop, sliced, sm, res[0])
        if self.limit_left[lop.id] <= 0:
            self._cut(lop.id)

    def _cut(self, limit_op: int) -> None:
        """The limit is satisfied: stop everything upstream of it."""
        self.cut_off = max(self.cut_off, limit_op)
        self.source_pending.clear()
        for k in range(1, limit_op + 1):
            while self.queues[k]:
                m = self.queues[k].popleft()
                if self.store.alive(m.pid):
                    self.store.drop_ref(Ref(m.pid))
        self.jobs = [j for j in self.jobs if j.spec.op_id > limit_op]
        self.emit("limit_reached", op=limit_op)

    def _finish(self, t: TaskRun) -> None:
        self.running.remove(t)
        self._free_worker(t)
        for pid in t.held:
            if self.store.alive(pid):
                self.store.unpin(Ref(pid))
                self.store.drop_ref(Ref(pid))
        self.lineage.record_output_count(t.spec.id, t.out_count)
        dur = self.now - t.launched_at
        if t.mode == "normal":
            self.stats[t.op.id].observe(dur, t.in_bytes, t.out_bytes)
            self.op_durations[t.op.id].append(dur)
            if t.op.is_source:
                self.src_completed.add(t.spec.id)
                obs = self.src_estimate_observed
                self.src_estimate_observed = t.out_bytes if obs is None else 0.5 * t.out_bytes + 0.5 * obs
        elif t.op.is_source:
            self.src_completed.add(t.spec.id)
        self.completed_tasks.append((t.spec.id, t.origins))
        self.emit("done", task=t.spec.id, op=t.op.id, outputs=t.out_count, bytes=t.out_bytes, mode=t.mode)
        self._wake()

    # -------------------------------------------------------------- memory
    def _wake(self) -> None:
        while self.waiters:
            t = self.waiters[0]
            if t.cancelled:
                self.waiters.popleft()
                continue
            if t.waiting == "put":
                part = t.pending
                res = self.store.try_put(part, refs=1)
                if res is None:
                    return
                self.waiters.popleft()
                t.pending, t.waiting = None, ""
                ref, cost = res
                self._on_output(t, part, ref)
                self._push(self.now + cost + self.opt.output_overhead_seconds, P_WAKE, self._advance, t)
            else:
                pid = t.fetch_queue[0]
                if not self.store.alive(pid):
                    self.waiters.popleft()
                    self._fail_task(t, f"input {pid} lost")
                    continue
                res = self.store.try_fetch(Ref(pid))
                if res is None:
                    return
                self.waiters.popleft()
                t.waiting = ""
                # re-run the fetch loop from the current head; charge the wait as zero extra
                self._push(self.now, P_WAKE, self._fetch_resume, t, res)

    def _fetch_resume(self, t: TaskRun, res) -> None:
        if t.cancelled:
            return
        part, cost = res
        t.inputs.append(part)
        t.in_bytes += part.size_bytes
        t.fetch_queue.pop(0)
        if cost:
            self._push(self.now + cost, P_TASK, self._fetch, t)
        else:
            self._fetch(t)

    # ------------------------------------------------------------ recovery
    def _make_job(self, spec: TaskSpec, mode: str, owned: List[str], emit_from=0, wanted=()) -> Job:
        job = Job(spec, mode, emit_from, set(wanted), list(owned))
        for pid in spec.input_pids:
            if not self.store.alive(pid):
                if pid in job.owned:
                    job.owned.remove(pid)
                job.missing.add(pid)
                self._request(pid, job)
        self.jobs.append(job)
        return job

    def _request(self, pid: str, owner) -> None:
        first = pid not in self.recovering
        self.recovering.setdefault(pid, []).append(owner)
        if not first:
            return
        tid = self.lineage.producer(pid)
        if tid not in self.lineage:
            raise UnrecoverableError(f"no lineage for partition {pid}")
        rec = self.lineage[tid]
        idx = int(pid.rsplit("#", 1)[1])
        if rec.read_index is not None and not self.opt.allow_source_reread:
            raise UnrecoverableError(f"source {tid} cannot be re-read")
        for j in self.jobs:
            if j.spec.id == tid and j.mode == "recovery" and not j.launched:
                j.wanted.add(idx)
                return
        op = self.ops[rec.op_id]
        spec = TaskSpec(tid, rec.op_id, rec.input_pids, rec.target_partition_bytes, op.batch_size,
                        read_index=rec.read_index)
        owned = []
        for inp in rec.input_pids:
            if self.store.alive(inp):
                self.store.add_ref(Ref(inp))
                owned.append(inp)
        self.emit("recover", task=tid, index=idx)
        self._make_job(spec, "recovery", owned, wanted={idx})

    def _recovered(self, part: Partition, ref: Ref) -> None:
        owners = self.recovering.pop(part.id, [])
        if not owners:
            self.store.drop_ref(ref)
            return
        if len(owners) > 1:
            self.store.add_ref(ref, len(owners) - 1)
        for o in owners:
            if isinstance(o, Job):
                o.missing.discard(part.id)
                o.owned.append(part.id)
            elif isinstance(o, PartMeta):
                o.lost = False
            elif o == "cache":
                self.cached_refs.append(ref)

    def _run_limit_job(self, job: Job) -> None:
        (pid,) = job.spec.input_pids
        src = self.store.entry(pid).partition
        rec = self.lineage[job.spec.id]
        n = self.meta[job.spec.id + "#0"].num_rows if job.spec.id + "#0" in self.meta else len(src.rows)
        sliced = Partition(src.rows[:n], job.spec.id, 0, src.location)
        for p in job.owned:
            self.store.drop_ref(Ref(p))
        res = self.store.try_put(sliced)
        if res is None:
            raise UnschedulableError("no memory to rebuild limit slice")
        self._recovered(sliced, res[0])
        self.lineage.record_output_count(rec.task_id, 1)

    def _launch_jobs(self) -> None:
        for job in list(self.jobs):
            if job.missing or job.launched or job.need_bytes > self.store.free_bytes:
                continue
            op = self.ops[job.spec.op_id]
            if op.kind == "limit":
                self.jobs.remove(job)
                self._run_limit_job(job)
                continue
            t = self._launch(op, job.spec, job.mode, job.owned, job.emit_from, job.wanted)
            if t is None:
                continue
            job.launched = True
            self.jobs.remove(job)
            self.tasks_reexecuted += 1
            self.reexecuted_ids.append(job.spec.id)

    def _cancel(self, t: TaskRun) -> None:
        t.cancelled = True
        if t in self.running:
            self.running.remove(t)
        self._free_worker(t)
        for pid in t.held:
            if self.store.alive(pid):
                self.store.unpin(Ref(pid))
        if t in self.waiters:
            self.waiters.remove(t)

    def _fail_task(self, t: TaskRun, reason: str) -> None:
        self._cancel(t)
        self.failed_ids.append(t.spec.id)
        self.emit("failed", task=t.spec.id, op=t.op.id, reason=reason)
        if t.mode == "recovery":
            self._make_job(t.spec, "recovery", t.held, wanted=t.wanted)
        else:
            self._make_job(t.spec, "retry", t.held, emit_from=self.delivered.get(t.spec.id, 0))

    def _preempt(self) -> bool:
        """Free the slot of a task stuck on a full store so a starved downstream operator can drain it.

        The victim is retried later from its next undelivered output, which is
        safe because task output is deterministic.
        """
        starved = [
            op for op in self.ops[1:]
            if op.kind != "limit" and op.id > self.cut_off and op.id not in self.pools
            and not self._has_resources(op) and self._group(op)
        ]
        blocked = [t for t in self.running if t.waiting == "put" and t.actor is None and t.mode != "recovery"]
        blocked.sort(key=lambda t: (t.op.id, -t.launched_at, t.spec.id))
        for t in blocked:
            free = self.resources.free.get(t.node, {})
            have = t.op.resources.fixed()
            if not any(
                op.id > t.op.id and all(free.get(k, 0) + have.get(k, 0) >= v for k, v in op.resources.fixed().items())
                for op in starved
            ):
                continue
            need = t.pending.size_bytes
            self._cancel(t)
            job = self._make_job(t.spec, "retry", t.held, emit_from=self.delivered.get(t.spec.id, 0))
            job.need_bytes = need
            self.preempted_ids.append(t.spec.id)
            self.emit("preempt", task=t.spec.id, op=t.op.id, bytes=need)
            return True
        return False

    def _handle_lost(self, pids: List[str]) -> None:
        lost = set(pids)
        self.lost_pids.extend(sorted(lost))
        for t in list(self.running):
            t.held = [p for p in t.held if p not in lost]
            if t.waiting == "fetch" and t.fetch_queue and t.fetch_queue[0] in lost:
                self._fail_task(t, f"input {t.fetch_queue[0]} lost")
        for job in self.jobs:
            for p in [p for p in job.owned if p in lost]:
                job.owned.remove(p)
                job.missing.add(p)
                self._request(p, job)
        for k, q in self.queues.items():
            for m in q:
                if m.pid in lost and not m.lost:
                    m.lost = True
                    self._request(m.pid, m)
        keep = []
        for ref in self.cached_refs:
            if ref.pid in lost:
                self.lost_cache.append(ref.pid)
            else:
                keep.append(ref)
        self.cached_refs = keep

    # ------------------------------------------------------ cluster changes
    def _cluster_event(self, ev: FailureEvent) -> None:
        self.emit("cluster", event=ev.kind, target=ev.target or (ev.node.node_id if ev.node else ""))
        ckpt = bool(self.opt.checkpoint_interval_seconds)
        if ev.kind == "kill_worker":
            victims = [t for t in self.running if t.worker_id == ev.target]
            if ckpt:
                self._rollback("kill_worker")
                return
            for t in victims:
                self._fail_task(t, "worker killed")
        elif ev.kind == "remove_node":
            nid = ev.target
            if nid not in self.resources.total:
                raise ConfigError(f"remove_node: unknown node {nid!r}")
            victims = [t for t in self.running if t.node == nid]
            self.resources.remove_node(nid)
            self.node_workers.pop(nid, None)
            for pool in self.pools.values():
                pool.drop_node(nid)
            if ckpt:
                self.store.mark_lost(nid)
                self._rollback("remove_node")
                return
            for t in victims:
                self._fail_task(t, "node removed")
            self._handle_lost(self.store.mark_lost(nid))
        else:
            node = ev.node
            if node.node_id in self.resources.total:
                raise ConfigError(f"add_node: node {node.node_id!r} already present")
            self.resources.add_node(node)
            self.node_specs[node.node_id] = node
            self.node_workers[node.node_id] = set()
            for op_id, pool in self.pools.items():
                pool.grow(self.ops[op_id].actor_pool_size, self.resources)
            if ckpt:
                self._rollback("add_node")

    # ------------------------------------------------------- checkpointing
    def _live_origins(self):
        for q in self.queues.values():
            for m in q:
                yield m.origins
        for t in self.running:
            yield t.origins
        for j in self.jobs:
            yield frozenset().union(*(self.meta[p].origins for p in j.spec.input_pids if p in self.meta))

    def _checkpoint(self) -> None:
        if self.finished:
            return
        self.ckpt_done = checkpoint_cut(self.src_completed, self._live_origins())
        self.emit("checkpoint", sources_done=len(self.ckpt_done))
        self._push(self.now + self.opt.checkpoint_interval_seconds, P_CHECKPOINT, self._checkpoint)

    def _rollback(self, reason: str) -> None:
        done = close_cut(self.ckpt_done, self.output_origins)
        redo = 0
        for t in list(self.running):
            self._cancel(t)
            redo += 1
        kept = []
        for tid, origins in self.completed_tasks:
            if origins <= done:
                kept.append((tid, origins))
            else:
                redo += 1
        self.completed_tasks = kept
        keep_out = [i for i, o in enumerate(self.output_origins) if o <= done]
        self.outputs = [self.outputs[i] for i in keep_out]
        self.output_origins = [self.output_origins[i] for i in keep_out]
        self.output_times = [self.output_times[i] for i in keep_out]
        kept_refs = {r.pid for r in self.cached_refs if self.meta[r.pid].origins <= done}
        self.cached_refs = [r for r in self.cached_refs if r.pid in kept_refs]
        for pid in self.store.pids():
            if pid not in kept_refs:
                self.store.discard(pid)
        for q in self.queues.values():
            q.clear()
        self.jobs.clear()
        self.waiters.clear()
        self.recovering.clear()
        self.src_completed = set(done)
        self.source_pending = deque(
            i for i in range(len(self.read_tasks)) if f"r{i}" not in done
        )
        for tid in list(self.delivered):
            self.delivered.pop(tid)
        self.ckpt_done = set(done)
        self.rollbacks += 1
        self.rollback_tasks += redo
        self.tasks_reexecuted += redo
        self.emit("rollback", reason=reason, tasks=redo, sources_kept=len(done))

    # -------------------------------------------------------------- budget
    def _processing_time(self) -> float:
        ests = []
        S = self.source_estimate / self.opt.source_size_overestimate
        for op in self.ops[1:]:
            if op.kind == "limit":
                continue
            st = self.stats[op.id]
            if op.id in self.pools:
                E = len(self.pools[op.id].workers) * self.opt.max_tasks_in_flight_per_slot
            else:
                E = self.resources.count_fits(op.resources) + len(self._running_of(op.id))
            if st.completed == 0 or not st.input_bytes:
                ests.append(OpEstimate(E, COLD_TASK_SECONDS, 1, 1))
            else:
                T = st.task_seconds * S / st.input_bytes
                ests.append(OpEstimate(E, T, st.input_bytes, st.output_bytes or 0))
        if not ests:
            return 0.0
        return processing_time(ests)[2]

    def _tick(self) -> None:
        if self.finished:
            return
        P = self._processing_time()
        before = self.budget
        if self.opt.policy == "optimistic":
            if self.opt.budget_accrual == "continuous":
                self._accrue()
                self._rate = update_budget(0.0, self.source_estimate, P, math.inf)
            else:
                self.budget = update_budget(self.budget, self.source_estimate, P, self.capacity)
        if self.opt.budget_accrual == "continuous":
            self._budget_grew = self._rate > 0 and self.budget < self.capacity
        else:
            self._budget_grew = self.budget > before
        self._budget_stuck = self.opt.policy == "pessimistic" or (
            not self._budget_grew and (self.budget >= self.capacity or math.isinf(P))
        )
        self.emit(
            "tick",
            budget=round(self.budget, 3),
            P=None if math.isinf(P) else round(P, 6),
            store_bytes=self.store.usage,
            running=len(self.running),
            queued={str(k): len(q) for k, q in self.queues.items() if q},
        )
        self._push(self.now + self.opt.budget_interval_seconds, P_TIMER, self._tick)
        self._check_deadlock_at_tick = True

    def _accrue(self) -> None:
        """Spread the per-second replenishment evenly between timer ticks."""
        dt = self.now - self._accrued_at
        if dt > 0 and self._rate:
            self.budget = min(float(self.capacity), self.budget + self._rate * dt)
        self._accrued_at = self.now

    # ------------------------------------------------------------ schedule
    def _schedule(self) -> int:
        launched = 0
        if self.opt.policy == "optimistic" and self.opt.budget_accrual == "continuous":
            self._accrue()
        self._launch_jobs()
        src = self.ops[0]
        while True:
            if self.opt.policy == "optimistic" and self.source_pending and src.id > self.cut_off:
                est = self.source_estimate
                if self.budget + 1 >= source_gate(est, self.capacity) and self._has_resources(src):
                    if self._launch_source():
                        self.budget = max(0.0, self.budget - est)
                        launched += 1
                        continue
            views = [
                self._view(op)
                for op in self.ops
                if op.kind != "limit" and not (self.opt.policy == "optimistic" and op.is_source)
            ]
            if self.initial is not None:
                views = [v for v in views if not v.is_source]
            pick = select_operator_pessimistic(views)
            if pick is None:
                break
            qualified = {str(v.op_id): v.buffered_outputs_bytes for v in views if v.qualified}
            if len(qualified) > 1:
                self.emit("decide", op=pick, candidates=qualified)
            op = self.ops[pick]
            ok = self._launch_source() if op.is_source else self._launch_op(op)
            if not ok:
                break
            launched += 1
        if self.opt.policy == "optimistic" and self.opt.budget_accrual == "continuous":
            self._plan_budget_wakeup()
        self._release_pools()
        return launched

    def _plan_budget_wakeup(self) -> None:
        """Schedule a pass for when the accruing budget will cover the next source task."""
        src = self.ops[0]
        if not self.source_pending or src.id <= self.cut_off or not self._rate:
            return
        if not self._has_resources(src):
            return
        gap = source_gate(self.source_estimate, self.capacity) - self.budget
        if gap <= 1:  # one byte of slack absorbs rounding in the accrual
            return
        at = self.now + max(gap / self._rate, 1e-6)
        if self._wakeup_at is not None and self.now < self._wakeup_at <= at:
            return
        self._wakeup_at = at
        self._push(at, P_TIMER, self._budget_wakeup)

    def _budget_wakeup(self) -> None:
        self._wakeup_at = None

    def _release_pools(self) -> None:
        for op_id in list(self.pools):
            if self.op_finished(op_id):
                self.pools.pop(op_id).release_all(self.resources)

    def _work_remaining(self) -> bool:
        if self.source_pending and self.cut_off < 0:
            return True
        if self.running or self.jobs or self.waiters or self.recovering:
            return True
        return any(self.queues.values())

    def _state_dump(self) -> dict:
        return {
            "time": self.now,
            "budget": self.budget,
            "store_usage": self.store.usage,
            "store_capacity": self.capacity,
            "source_pending": len(self.source_pending),
            "running": [(t.spec.id, t.waiting) for t in self.running],
            "queues": {k: [m.pid for m in q] for k, q in self.queues.items() if q},
            "jobs": [(j.spec.id, j.mode, sorted(j.missing)) for j in self.jobs],
            "free_slots": {n: dict(f) for n, f in self.resources.free.items()},
        }

    # ----------------------------------------------------------------- run
    def run(self) -> RunResult:
        for op in self.ops:
            if op.stateful:
                self.pools[op.id] = ActorPool.create(
                    op.id, op.resources, op.actor_pool_size or 1, self.resources, op.init_seconds,
                    self.opt.max_tasks_in_flight_per_slot,
                )
        if self.initial is not None:
            for p in self.initial:
                res = self.store.try_put(p)
                if res is None:
                    raise UnschedulableError("cached input does not fit in memory")
                self._push_output(self.ops[0], p, self.meta[p.id], res[0])
        if self.cut_off < 0:
            for op in self.ops:
                if op.kind == "limit" and op.limit_n == 0:
                    self._cut(op.id)
        for ev in self.failures:
            self._push(ev.at_time, P_CLUSTER, self._cluster_event, ev)
        self._push(self.opt.budget_interval_seconds, P_TIMER, self._tick)
        if self.opt.checkpoint_interval_seconds:
            self.ckpt_done = set()
            self._push(self.opt.checkpoint_interval_seconds, P_CHECKPOINT, self._checkpoint)
        if self.opt.budget_accrual == "continuous":
            self._rate = update_budget(0.0, self.source_estimate, self._processing_time(), math.inf)
        self.emit("start", policy=self.opt.policy, budget=self.budget,
                  read_partitions=len(self.read_tasks))
        self._schedule()
        while True:
            if not self._work_remaining():
                if self.lost_cache:
                    for pid in self.lost_cache:
                        self._request(pid, "cache")
                    self.lost_cache = []
                    self._schedule()
                    continue
                break
            if not self._heap:
                raise DeadlockError("no events pending but work remains", self._state_dump())
            t = self._heap[0][0]
            if t > self.opt.max_time_seconds:
                raise DeadlockError("simulation time limit exceeded", self._state_dump())
            if self.clock_mode == "wall" and t > self.now:
                time.sleep((t - self.now) * self.wall_scale)
            self.now = t
            self._check_deadlock_at_tick = False
            while self._heap and self._heap[0][0] == t:
                _, _, _, fn, args = heapq.heappop(self._heap)
                fn(*args)
            launched = self._schedule()
            if self._check_deadlock_at_tick and not launched and self._work_remaining():
                active = [e for e in self._heap if e[1] not in (P_TIMER, P_CHECKPOINT)]
                if not active and self._budget_stuck:
                    if self._preempt():
                        self._schedule()
                        continue
                    raise DeadlockError("scheduler cannot make progress", self._state_dump())
        self.finished = True
        if self.consumption.coordinator is not None:
            self.consumption.coordinator.close()
        self.emit("end", jct=self.now)
        return RunResult(self._report(), self.outputs, self.trace, self.consumption, list(self.cached_refs),
                         self.store, self.lineage)

    def _report(self) -> RunReport:
        import hashlib

        # Row multiset: partition boundaries depend on timing, row contents do not.
        h = hashlib.blake2b(digest_size=16)
        rows = sorted((r.nominal_bytes, r.payload) for p in self.outputs for r in p.rows)
        for size, payload in rows:
            h.update(size.to_bytes(8, "little"))
            h.update(len(payload).to_bytes(4, "little"))
            h.update(payload)
        rows_out = sum(p.num_rows for p in self.outputs)
        w = self.opt.throughput_window_seconds
        series = []
        if self.output_times:
            nwin = int(math.ceil(self.now / w)) if self.now > 0 else 1
            counts = [0] * max(nwin, 1)
            for ts, rows in self.output_times:
                k = min(int(ts // w), len(counts) - 1)
                counts[k] += rows
            series = [(round((k + 1) * w, 9), c / w) for k, c in enumerate(counts)]
        names = {op.id: f"op{op.id}:{op.name}" for op in self.ops}
        return RunReport(
            jct=self.now,
            policy=self.opt.policy,
            rows_in=self.rows_in,
            rows_out=rows_out,
            peak_memory_bytes=self.store.peak_usage,
            memory_limit_bytes=self.capacity,
            spilled_bytes=self.store.spilled_bytes,
            spill_seconds=self.store.spill_seconds,
            unspill_seconds=self.store.unspill_seconds,
            op_tasks={names[k]: v for k, v in self.op_task_counts.items()},
            op_mean_task_seconds={
                names[k]: (sum(v) / len(v) if v else 0.0) for k, v in self.op_durations.items()
            },
            throughput=series,
            tasks_launched=self.tasks_launched,
            tasks_reexecuted=self.tasks_reexecuted,
            reexecuted_task_ids=list(self.reexecuted_ids),
            lost_partitions=list(self.lost_pids),
            failed_task_ids=list(self.failed_ids),
            preempted_task_ids=list(self.preempted_ids),
            rollbacks=self.rollbacks,
            rollback_tasks=self.rollback_tasks,
            num_outputs=len(self.outputs),
            output_digest=h.hexdigest(),
            source_tasks_launched=self.source_launches,
            lineage=self.lineage.as_dict(),
        )
