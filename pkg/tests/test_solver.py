import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_jct, random_instance
from streambatch import WorkloadConfig
from streambatch.core import ConfigError
from streambatch.presets import fig6
from streambatch.solver import (
    SearchExhausted,
    SolverOp,
    SolverProblem,
    SolverState,
    canonicalize,
    initial_state,
    memo_key,
    solve,
    step,
)


def problem(durs, ins, outs, kinds, src, slots, buf, horizon=200):
    ops = tuple(SolverOp(d, i, o, k) for d, i, o, k in zip(durs, ins, outs, kinds))
    return SolverProblem(ops, src, slots, buf, horizon)


def test_single_operator_four_tasks():
    p = problem([2], [0], [1], ["CPU"], 4, {"CPU": 2}, 10)
    assert solve(p).optimum_ticks == 4


def test_fig6_witness_overlaps_third_producer():
    p = WorkloadConfig.from_dict(fig6()).solver
    res = solve(p)
    assert res.optimum_ticks == 8
    assert res.witness == [(0, 0, 1), (2, 0, 1), (2, 1, 1), (4, 0, 1), (4, 1, 1), (6, 1, 1)]
    launches = res.to_trace(p)
    assert launches[-1] == {"t": 8.0, "kind": "end", "jct_ticks": 8}


def test_empty_problem_is_immediate():
    assert solve(problem([1], [0], [1], ["CPU"], 0, {"CPU": 1}, 1)).optimum_ticks == 0


def test_missing_resource_is_infeasible():
    p = problem([1, 1], [0, 1], [1, 1], ["CPU", "GPU"], 2, {"CPU": 1, "GPU": 0}, 2)
    assert not solve(p).feasible


def test_horizon_too_short():
    p = problem([3], [0], [1], ["CPU"], 4, {"CPU": 1}, 2, horizon=11)
    assert solve(p).optimum_ticks is None
    assert solve(problem([3], [0], [1], ["CPU"], 4, {"CPU": 1}, 2, horizon=12)).optimum_ticks == 12


def test_state_budget_is_explicit():
    p = problem([1, 2, 1], [0, 1, 1], [2, 1, 1], ["CPU", "CPU", "GPU"], 8, {"CPU": 3, "GPU": 1}, 3)
    with pytest.raises(SearchExhausted) as info:
        solve(p, max_states=5)
    assert info.value.visited == 6


def test_uneven_counts_are_rejected():
    with pytest.raises(ConfigError):
        problem([1, 1], [0, 2], [1, 1], ["CPU", "CPU"], 3, {"CPU": 1}, 2)


def _random_state(rng):
    cpu = tuple((rng.randint(0, 2), rng.randint(0, 3), rng.randint(0, 2)) for _ in range(rng.randint(0, 4)))
    gpu = tuple((rng.randint(0, 2), rng.randint(0, 3), rng.randint(0, 2)) for _ in range(rng.randint(0, 2)))
    return SolverState(rng.randint(0, 9), (cpu, gpu), (0, 1, 0), (1, 1, 0))


@settings(max_examples=100)
@given(st.randoms(use_true_random=False))
def test_canonicalize_is_idempotent_and_symmetric(rng):
    s = _random_state(rng)
    c = canonicalize(s)
    assert canonicalize(c) == c
    shuffled = SolverState(s.tick, tuple(tuple(rng.sample(g, len(g))) for g in s.executors), s.avail, s.launched)
    assert canonicalize(shuffled) == c
    # executors never move between resource kinds
    assert [sorted(g) for g in s.executors] == [list(g) for g in c.executors]


def test_distinct_executor_multisets_stay_distinct():
    a = SolverState(3, (((0, 1, 0), (0, 2, 0)), ()), (0,), (2,))
    b = SolverState(3, (((0, 1, 0), (0, 1, 0)), ()), (0,), (2,))
    assert canonicalize(a) != canonicalize(b)
    assert memo_key(a) != memo_key(b)


def test_memo_key_includes_tick():
    a = SolverState(3, (((0, 1, 0),), ()), (0,), (1,))
    b = SolverState(4, (((0, 1, 0),), ()), (0,), (1,))
    assert memo_key(a) != memo_key(b)


def test_different_histories_share_a_key():
    # both tasks at tick 0 then idle, or one per tick: same progress at tick 2
    p = problem([1], [0], [1], ["CPU"], 2, {"CPU": 2}, 2)
    s0 = initial_state(p)
    x = step(p, step(p, s0, (2,)), (0,))
    y = step(p, step(p, s0, (1,)), (1,))
    assert x == y and memo_key(x) == memo_key(y)


def _instances(n, seed, max_tasks=10):
    rng = random.Random(seed)
    return [random_instance(rng, max_tasks) for _ in range(n)]


@pytest.mark.parametrize("inst", _instances(25, 11), ids=lambda i: f"{len(i[0])}ops")
def test_matches_brute_force(inst):
    durs, ins, outs, kinds, src, slots, buf, horizon = inst
    assert solve(problem(durs, ins, outs, kinds, src, slots, buf, horizon)).optimum_ticks == \
        brute_force_jct(durs, ins, outs, kinds, src, slots, buf, horizon)


@pytest.mark.parametrize("inst", _instances(20, 23, max_tasks=8), ids=lambda i: f"{len(i[0])}ops")
def test_memo_does_not_change_the_optimum(inst):
    durs, ins, outs, kinds, src, slots, buf, horizon = inst
    p = problem(durs, ins, outs, kinds, src, slots, buf, horizon)
    assert solve(p).optimum_ticks == solve(p, use_memo=False).optimum_ticks


@pytest.mark.parametrize("inst", _instances(20, 37), ids=lambda i: f"{len(i[0])}ops")
def test_monotone_in_slots_and_buffer(inst):
    durs, ins, outs, kinds, src, slots, buf, horizon = inst
    base = solve(problem(durs, ins, outs, kinds, src, slots, buf, horizon)).optimum_ticks
    for k in slots:
        more = dict(slots)
        more[k] += 1
        assert solve(problem(durs, ins, outs, kinds, src, more, buf, horizon)).optimum_ticks <= base
    smaller = buf - 1
    if smaller >= max([1] + ins[1:]):
        tighter = solve(problem(durs, ins, outs, kinds, src, slots, smaller, 4 * horizon)).optimum_ticks
        assert tighter is None or tighter >= base


def test_solver_bounds_the_policies():
    from streambatch.cli import run_workload

    cfg = WorkloadConfig.from_dict(fig6())
    optimum = solve(cfg.solver).optimum_ticks * cfg.tick_seconds
    for policy in ("optimistic", "pessimistic"):
        assert run_workload(cfg.with_overrides(policy=policy)).report.jct >= optimum
