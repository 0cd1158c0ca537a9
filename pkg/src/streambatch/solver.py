"""Discrete-time optimal scheduler for fixed-duration pipeline instances.

A best-first search over execution states.  Executors of one resource kind
are interchangeable, so states are canonicalized by sorting them; two states
with the same progress at the same tick have the same optimal future, so only
the first one reached is expanded.
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .core import ConfigError, StreamBatchError


class SearchExhausted(StreamBatchError):
    def __init__(self, visited: int):
        super().__init__(f"search budget exhausted after {visited} states")
        self.visited = visited


@dataclass(frozen=True)
class SolverOp:
    duration_ticks: int
    input_partitions: int
    output_partitions: int
    resource: str = "CPU"

    def __post_init__(self):
        if self.duration_ticks < 1:
            raise ConfigError("duration_ticks must be >= 1")
        if self.input_partitions < 0 or self.output_partitions < 0:
            raise ConfigError("partition counts must be >= 0")


@dataclass(frozen=True)
class SolverProblem:
    ops: Tuple[SolverOp, ...]
    source_tasks: int
    slots: Tuple[Tuple[str, int], ...]
    buffer_limit_partitions: int
    horizon_ticks: int = 10_000

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple(self.ops))
        if isinstance(self.slots, dict):
            object.__setattr__(self, "slots", tuple(sorted(self.slots.items())))
        if not self.ops:
            raise ConfigError("solver problem needs at least one operator")
        if self.source_tasks < 0 or self.buffer_limit_partitions < 0 or self.horizon_ticks < 0:
            raise ConfigError("counts must be >= 0")
        for op in self.ops[1:]:
            if op.input_partitions < 1:
                raise ConfigError("non-source operators need input_partitions >= 1")
        self.task_counts()  # validates divisibility

    def slot_dict(self) -> Dict[str, int]:
        return dict(self.slots)

    @property
    def kinds(self) -> Tuple[str, ...]:
        return tuple(k for k, _ in self.slots)

    def task_counts(self) -> List[int]:
        counts = [self.source_tasks]
        for prev, op in zip(self.ops, self.ops[1:]):
            produced = counts[-1] * prev.output_partitions
            if produced % op.input_partitions:
                raise ConfigError("partition counts do not divide evenly between operators")
            counts.append(produced // op.input_partitions)
        return counts


# An executor is (op, remaining_ticks, pending_outputs); idle executors are not stored.
Executor = Tuple[int, int, int]


@dataclass(frozen=True)
class SolverState:
    tick: int
    executors: Tuple[Tuple[Executor, ...], ...]  # one sorted tuple per resource kind
    avail: Tuple[int, ...]  # buffered input partitions per operator
    launched: Tuple[int, ...]

    def buffer_used(self, problem: SolverProblem) -> int:
        held = 0
        for group in self.executors:
            for op, rem, _ in group:
                if rem > 0 and op > 0:
                    held += problem.ops[op].input_partitions
        return sum(self.avail) + held


def canonicalize(state: SolverState) -> SolverState:
    return SolverState(
        state.tick,
        tuple(tuple(sorted(group)) for group in state.executors),
        state.avail,
        state.launched,
    )


def memo_key(state: SolverState) -> tuple:
    s = canonicalize(state)
    return (s.tick, s.executors, s.avail, s.launched)


@dataclass
class SolverResult:
    optimum_ticks: Optional[int]
    witness: List[Tuple[int, int, int]] = field(default_factory=list)  # (tick, op, launches)
    visited: int = 0

    @property
    def feasible(self) -> bool:
        return self.optimum_ticks is not None

    def to_trace(self, problem: SolverProblem, tick_seconds: float = 1.0) -> List[dict]:
        out = []
        for tick, op, n in self.witness:
            out.append({"t": tick * tick_seconds, "kind": "launch", "op": op, "count": n,
                        "resource": problem.ops[op].resource})
        if self.optimum_ticks is not None:
            out.append({"t": self.optimum_ticks * tick_seconds, "kind": "end", "jct_ticks": self.optimum_ticks})
        return out


def initial_state(problem: SolverProblem) -> SolverState:
    return SolverState(0, tuple(() for _ in problem.kinds), (0,) * len(problem.ops), (0,) * len(problem.ops))


def is_done(problem: SolverProblem, state: SolverState, counts: Sequence[int]) -> bool:
    return tuple(counts) == state.launched and not any(state.executors)


def _launch_options(problem, state, counts):
    """Every feasible vector of launch counts, one entry per operator."""
    slots = problem.slot_dict()
    kind_index = {k: i for i, k in enumerate(problem.kinds)}
    per_kind = []
    for k in problem.kinds:
        idle = slots[k] - len(state.executors[kind_index[k]])
        ops = [i for i, op in enumerate(problem.ops) if op.resource == k]
        caps = []
        for i in ops:
            cap = counts[i] - state.launched[i]
            if i > 0:
                cap = min(cap, state.avail[i] // problem.ops[i].input_partitions)
            caps.append(max(0, min(cap, idle)))
        choices = []
        for combo in itertools.product(*(range(c + 1) for c in caps)):
            if sum(combo) <= idle:
                choices.append(list(zip(ops, combo)))
        per_kind.append(choices)
    for pick in itertools.product(*per_kind):
        vec = [0] * len(problem.ops)
        for choice in pick:
            for i, n in choice:
                vec[i] = n
        yield tuple(vec)


def step(problem: SolverProblem, state: SolverState, launch: Sequence[int]) -> SolverState:
    """Launch, advance one tick, free finished inputs, then drain pending outputs."""
    kind_index = {k: i for i, k in enumerate(problem.kinds)}
    groups = [list(g) for g in state.executors]
    avail = list(state.avail)
    launched = list(state.launched)
    for i, n in enumerate(launch):
        if not n:
            continue
        op = problem.ops[i]
        launched[i] += n
        if i > 0:
            avail[i] -= n * op.input_partitions
        groups[kind_index[op.resource]].extend([(i, op.duration_ticks, 0)] * n)
    last = len(problem.ops) - 1
    advanced = []
    for g in groups:
        ng = []
        for op, rem, pend in g:
            if rem > 0:
                rem -= 1
                if rem == 0:
                    pend = problem.ops[op].output_partitions if op != last else 0
            ng.append((op, rem, pend))
        advanced.append(ng)
    held = sum(problem.ops[op].input_partitions for g in advanced for op, rem, _ in g if rem > 0 and op > 0)
    space = problem.buffer_limit_partitions - sum(avail) - held
    blocked = sorted(
        ((pend, op, gi, idx) for gi, g in enumerate(advanced) for idx, (op, rem, pend) in enumerate(g)
         if rem == 0 and pend > 0)
    )
    for pend, op, gi, idx in blocked:
        if space <= 0:
            break
        moved = min(space, pend)
        space -= moved
        avail[op + 1] += moved
        o, r, p = advanced[gi][idx]
        advanced[gi][idx] = (o, r, p - moved)
    final = tuple(tuple(sorted(e for e in g if e[1] > 0 or e[2] > 0)) for g in advanced)
    return SolverState(state.tick + 1, final, tuple(avail), tuple(launched))


def lower_bound(problem: SolverProblem, state: SolverState, counts: Sequence[int]) -> int:
    """Admissible estimate of the completion tick: per-kind remaining work over slots."""
    slots = problem.slot_dict()
    kind_index = {k: i for i, k in enumerate(problem.kinds)}
    bound = state.tick
    for k in problem.kinds:
        work = 0
        longest = 0
        for op, rem, _ in state.executors[kind_index[k]]:
            work += rem
            longest = max(longest, rem)
        for i, op in enumerate(problem.ops):
            if op.resource == k:
                left = counts[i] - state.launched[i]
                work += left * op.duration_ticks
                if left:
                    longest = max(longest, op.duration_ticks)
        if work:
            bound = max(bound, state.tick + max(longest, math.ceil(work / slots[k])))
    if any(p for g in state.executors for _, _, p in g):
        bound = max(bound, state.tick + 1)
    return bound


def solve(problem: SolverProblem, max_states: int = 2_000_000, use_memo: bool = True) -> SolverResult:
    """Minimum number of ticks to finish every task, with one witness schedule."""
    counts = problem.task_counts()
    for k in {op.resource for op in problem.ops}:
        if problem.slot_dict().get(k, 0) < 1 and counts[[op.resource for op in problem.ops].index(k)] > 0:
            return SolverResult(None)
    start = initial_state(problem)
    if is_done(problem, start, counts):
        return SolverResult(0)
    parents: List[tuple] = [(None, None, 0)]  # (parent id, launch vector, tick)
    seq = itertools.count()
    heap = [(0, 0, next(seq), 0, start)]
    seen = {memo_key(start)} if use_memo else None
    best: Optional[int] = None
    best_id = None
    visited = 0
    while heap:
        _, tick, _, sid, state = heapq.heappop(heap)
        if best is not None and lower_bound(problem, state, counts) >= best:
            continue
        visited += 1
        if visited > max_states:
            raise SearchExhausted(visited)
        for launch in _launch_options(problem, state, counts):
            nxt = step(problem, state, launch)
            if nxt.tick > problem.horizon_ticks:
                continue
            if nxt.buffer_used(problem) > problem.buffer_limit_partitions:
                raise AssertionError("buffer invariant violated")
            if seen is not None:
                key = memo_key(nxt)
                if key in seen:
                    continue
                seen.add(key)
            parents.append((sid, launch, state.tick))
            nid = len(parents) - 1
            if is_done(problem, nxt, counts):
                if best is None or nxt.tick < best:
                    best, best_id = nxt.tick, nid
                continue
            if best is not None and lower_bound(problem, nxt, counts) >= best:
                continue
            completed = sum(nxt.launched) - sum(len(g) for g in nxt.executors)
            heapq.heappush(heap, (-completed, nxt.tick, next(seq), nid, nxt))
    if best is None:
        return SolverResult(None, visited=visited)
    witness = []
    node = best_id
    while node is not None and parents[node][1] is not None:
        pid, launch, tick = parents[node]
        for op, n in enumerate(launch):
            if n:
                witness.append((tick, op, n))
        node = pid
    witness.sort()
    return SolverResult(best, witness, visited)
