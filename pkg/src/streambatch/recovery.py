"""Lineage records, failure schedules and checkpoint-rollback bookkeeping."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Set, Tuple

from .core import ConfigError, NodeSpec, StreamBatchError


class NondeterminismError(StreamBatchError):
    pass


class UnrecoverableError(StreamBatchError):
    pass


@dataclass
class LineageRecord:
    task_id: str
    op_id: int
    input_pids: Tuple[str, ...]
    target_partition_bytes: int
    read_index: Optional[int] = None
    recorded_output_count: Optional[int] = None


class LineageTable:
    def __init__(self):
        self.records: Dict[str, LineageRecord] = {}

    def __contains__(self, task_id):
        return task_id in self.records

    def __getitem__(self, task_id) -> LineageRecord:
        return self.records[task_id]

    def register(self, record: LineageRecord) -> None:
        existing = self.records.get(record.task_id)
        if existing is None:
            self.records[record.task_id] = record

    def record_output_count(self, task_id: str, count: int) -> None:
        """Store the output count on first success; any later mismatch is fatal."""
        rec = self.records[task_id]
        if rec.recorded_output_count is None:
            rec.recorded_output_count = count
        elif rec.recorded_output_count != count:
            raise NondeterminismError(
                f"task {task_id} produced {count} outputs on replay, "
                f"{rec.recorded_output_count} on its first run"
            )

    def producer(self, pid: str) -> str:
        return pid.rsplit("#", 1)[0]

    def ancestors(self, pids: Iterable[str]) -> Set[str]:
        """Task ids that produced ``pids`` or, transitively, their inputs."""
        out: Set[str] = set()
        stack = [self.producer(p) for p in pids]
        while stack:
            t = stack.pop()
            if t in out or t not in self.records:
                continue
            out.add(t)
            stack.extend(self.producer(p) for p in self.records[t].input_pids)
        return out

    def as_dict(self) -> dict:
        return {
            t: {"op": r.op_id, "inputs": list(r.input_pids), "outputs": r.recorded_output_count}
            for t, r in sorted(self.records.items())
        }


FAILURE_KINDS = ("kill_worker", "remove_node", "add_node")


@dataclass(frozen=True)
class FailureEvent:
    at_time: float
    kind: str
    target: str = ""  # worker id or node id
    node: Optional[NodeSpec] = None  # add_node only

    def __post_init__(self):
        if self.kind not in FAILURE_KINDS:
            raise ConfigError(f"unknown failure kind {self.kind!r}")
        if self.at_time < 0:
            raise ConfigError("failure times must be >= 0")
        if self.kind == "add_node" and self.node is None:
            raise ConfigError("add_node needs a node spec")

    def to_json(self) -> dict:
        d = {"at": self.at_time, "kind": self.kind}
        if self.kind == "add_node":
            d["node"] = {"id": self.node.node_id, "slots": self.node.slot_dict(),
                         "local_buffer_partitions": self.node.local_buffer_partitions}
        else:
            d["target"] = self.target
        return d


def validate_schedule(events: Iterable[FailureEvent]) -> List[FailureEvent]:
    events = list(events)
    times = [e.at_time for e in events]
    if times != sorted(times):
        raise ConfigError("failure events must be sorted by time")
    return events


def random_schedule(rng: random.Random, nodes: Sequence[NodeSpec], horizon: float,
                    max_events: int = 4) -> List[FailureEvent]:
    """A random mix of worker kills, node removals and node additions before ``horizon``.

    Every removed node is later replaced by a fresh node with the same slots, so
    the pipeline always remains schedulable.
    """
    present = {n.node_id: (n, 0.0) for n in nodes}  # node, time it joins
    events: List[FailureEvent] = []
    fresh = 0
    t = 0.0
    for _ in range(rng.randint(1, max_events)):
        t = round(t + rng.uniform(0.0, horizon / max_events), 3)
        live = sorted(nid for nid, (_, at) in present.items() if at <= t)
        kind = rng.choice(FAILURE_KINDS)
        if kind == "remove_node" and len(live) < 2:
            kind = "kill_worker"
        if kind == "kill_worker":
            nid = rng.choice(live)
            width = int(sum(present[nid][0].slot_dict().values()))
            events.append(FailureEvent(t, "kill_worker", f"{nid}/w{rng.randrange(max(1, width))}"))
        elif kind == "remove_node":
            nid = rng.choice(live)
            gone, _ = present.pop(nid)
            events.append(FailureEvent(t, "remove_node", nid))
            fresh += 1
            back = NodeSpec(f"x{fresh}", gone.slots, gone.local_buffer_partitions)
            at = round(t + rng.uniform(0.0, horizon / max_events), 3)
            present[back.node_id] = (back, at)
            events.append(FailureEvent(at, "add_node", node=back))
        else:
            fresh += 1
            base = rng.choice(list(nodes))
            extra = NodeSpec(f"x{fresh}", base.slots, base.local_buffer_partitions)
            present[extra.node_id] = (extra, t)
            events.append(FailureEvent(t, "add_node", node=extra))
    events.sort(key=lambda e: e.at_time)
    return events


def checkpoint_cut(completed_sources: Iterable[str], live_origins: Iterable[FrozenSet[str]]) -> Set[str]:
    """Source tasks whose data has fully drained out of the pipeline."""
    busy: Set[str] = set()
    for origins in live_origins:
        busy |= origins
    return {s for s in completed_sources if s not in busy}


def close_cut(done: Set[str], emitted: Iterable[FrozenSet[str]]) -> Set[str]:
    """Shrink ``done`` until no emitted output mixes kept and rolled-back sources."""
    done = set(done)
    emitted = list(emitted)
    changed = True
    while changed:
        changed = False
        for origins in emitted:
            if not origins <= done and origins & done:
                done -= origins
                changed = True
    return done
