import dataclasses
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streambatch import (
    GB,
    MB,
    ClusterSpec,
    ConfigError,
    FailureEvent,
    NodeSpec,
    NondeterminismError,
    SchedulerOptions,
    Session,
    SourceFile,
    UnrecoverableError,
    WorkloadConfig,
    random_schedule,
    read,
)
from streambatch.core import WorkSpec
from streambatch.presets import recovery
from streambatch.recovery import LineageRecord, LineageTable, checkpoint_cut, close_cut, validate_schedule


def run(failures=(), checkpoint=None, **overrides):
    cfg = WorkloadConfig.from_dict(recovery(checkpoint))
    opts = dataclasses.replace(cfg.options, **overrides)
    return Session(cfg.cluster, opts).run(cfg.dataset, failures)


@pytest.fixture(scope="module")
def baseline():
    return run().report


def test_lineage_output_counts():
    table = LineageTable()
    table.register(LineageRecord("t0", 1, ("r0#0",), 128))
    table.record_output_count("t0", 3)
    table.record_output_count("t0", 3)
    assert table["t0"].recorded_output_count == 3
    with pytest.raises(NondeterminismError):
        table.record_output_count("t0", 2)


def test_ancestors_walk_inputs():
    table = LineageTable()
    table.register(LineageRecord("r0", 0, (), 1, read_index=0))
    table.register(LineageRecord("r1", 0, (), 1, read_index=1))
    table.register(LineageRecord("a", 1, ("r0#0", "r1#0"), 1))
    table.register(LineageRecord("b", 2, ("a#1",), 1))
    assert table.ancestors(["b#0"]) == {"b", "a", "r0", "r1"}
    assert table.ancestors(["r1#3"]) == {"r1"}


def test_failure_events_validate():
    with pytest.raises(ConfigError):
        FailureEvent(-1, "kill_worker", "n0/w0")
    with pytest.raises(ConfigError):
        FailureEvent(1, "explode")
    with pytest.raises(ConfigError):
        FailureEvent(1, "add_node")
    with pytest.raises(ConfigError):
        validate_schedule([FailureEvent(2, "kill_worker", "a"), FailureEvent(1, "kill_worker", "a")])


def test_checkpoint_cut_helpers():
    live = [frozenset({"r1"}), frozenset({"r2", "r3"})]
    assert checkpoint_cut({"r0", "r1", "r2"}, live) == {"r0"}
    # an output mixing a kept and a dropped source drags both out of the cut
    assert close_cut({"r0", "r1"}, [frozenset({"r1", "r2"}), frozenset({"r0"})]) == {"r0"}


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_random_schedules_are_well_formed(seed):
    nodes = [NodeSpec.of("n0", {"CPU": 2, "GPU": 2}), NodeSpec.of("n1", {"CPU": 4})]
    events = random_schedule(random.Random(seed), nodes, 5.0)
    validate_schedule(events)
    present = {"n0", "n1"}
    for ev in events:
        if ev.kind == "add_node":
            assert ev.node.node_id not in present
            present.add(ev.node.node_id)
        elif ev.kind == "remove_node":
            assert ev.target in present and len(present) >= 2
            present.remove(ev.target)
        else:
            assert ev.target.split("/w")[0] in present
    assert present


def test_kill_worker_mid_task(baseline):
    res = run([FailureEvent(0.5, "kill_worker", "n0/w0")]).report
    assert res.failed_task_ids == ["r0"]
    assert res.reexecuted_task_ids == ["r0"]
    assert res.output_digest == baseline.output_digest


def test_kill_idle_worker_changes_nothing(baseline):
    # nothing runs on n1 after every source has finished there
    res = run([FailureEvent(5.4, "kill_worker", "n1/w3")]).report
    assert res.tasks_reexecuted == 0 and res.lost_partitions == []
    assert res.jct == baseline.jct and res.output_digest == baseline.output_digest


def test_remove_node_regenerates_lost_partitions(baseline):
    res = run([FailureEvent(2.5, "remove_node", "n1")])
    rep = res.report
    assert len(rep.lost_partitions) == 8
    assert set(rep.reexecuted_task_ids) <= res.lineage.ancestors(rep.lost_partitions)
    assert rep.output_digest == baseline.output_digest
    assert rep.jct > baseline.jct


def test_remove_then_readd_only_redoes_lost_work(baseline):
    res = run([
        FailureEvent(2.5, "remove_node", "n1"),
        FailureEvent(3.0, "add_node", node=NodeSpec.of("n1b", {"CPU": 4})),
    ]).report
    assert res.output_digest == baseline.output_digest
    assert 0 < res.tasks_reexecuted < res.tasks_launched - res.tasks_reexecuted
    assert res.rollbacks == 0


def test_empty_node_add_is_a_no_op(baseline):
    res = run([FailureEvent(1.0, "add_node", node=NodeSpec.of("z", {"CPU": 0}))]).report
    assert res.jct == baseline.jct and res.tasks_launched == baseline.tasks_launched


def test_unknown_node_removal():
    with pytest.raises(ConfigError):
        run([FailureEvent(1.0, "remove_node", "nope")])


def test_no_reread_is_unrecoverable():
    with pytest.raises(UnrecoverableError):
        run([FailureEvent(2.5, "remove_node", "n1")], allow_source_reread=False)


def test_added_node_raises_throughput_within_two_windows():
    cluster = ClusterSpec((NodeSpec.of("n0", {"CPU": 2}),), GB)
    ds = read([SourceFile("f", 400, MB)]).map(WorkSpec(1.0))
    opts = SchedulerOptions(target_partition_bytes=MB - 1, throughput_window_seconds=2.0)
    base = Session(cluster, opts).run(ds.iter()).report
    grown = Session(cluster, opts).run(ds.iter(), [FailureEvent(10.0, "add_node", node=NodeSpec.of("n1", {"CPU": 4}))])
    series = dict(grown.report.throughput)
    before = series[10.0]
    assert series[14.0] > before
    assert grown.report.jct < base.jct
    assert grown.report.output_digest == base.output_digest


def test_checkpoint_rollback_scales_with_time_since_checkpoint(baseline):
    early = run([FailureEvent(2.01, "kill_worker", "n1/w0")], checkpoint=1.0)
    late = run([FailureEvent(2.9, "kill_worker", "n1/w0")], checkpoint=1.0)
    for res in (early, late):
        (rb,) = [e for e in res.trace if e["kind"] == "rollback"]
        # with an empty cut every task launched so far is rolled back
        launched = sum(1 for e in res.trace[: res.trace.index(rb)] if e["kind"] == "launch")
        assert rb["sources_kept"] == 0
        assert rb["tasks"] == launched
        assert res.report.output_digest == baseline.output_digest
    assert early.report.rollback_tasks < late.report.rollback_tasks


def test_checkpoint_mode_rolls_back_on_node_add(baseline):
    add = [FailureEvent(2.5, "add_node", node=NodeSpec.of("x", {"CPU": 2}))]
    assert run(add).report.rollbacks == 0
    res = run(add, checkpoint=1.0).report
    assert res.rollbacks == 1 and res.tasks_reexecuted > 0
    assert res.output_digest == baseline.output_digest


def test_lineage_beats_checkpoint_on_the_same_failure():
    failure = [FailureEvent(2.5, "remove_node", "n1"),
               FailureEvent(3.0, "add_node", node=NodeSpec.of("n1b", {"CPU": 4}))]
    assert run(failure).report.tasks_reexecuted < run(failure, checkpoint=1.0).report.tasks_reexecuted


@settings(max_examples=12, deadline=None)
@given(st.integers(0, 10**6))
def test_random_failures_preserve_output(seed):
    base = run().report
    nodes = WorkloadConfig.from_dict(recovery()).cluster.nodes
    events = random_schedule(random.Random(seed), nodes, base.jct)
    res = run(events)
    rep = res.report
    assert rep.output_digest == base.output_digest
    allowed = res.lineage.ancestors(rep.lost_partitions) | set(rep.failed_task_ids) | set(rep.preempted_task_ids)
    assert set(rep.reexecuted_task_ids) <= allowed


def test_replay_is_deterministic(baseline):
    a = run([FailureEvent(2.5, "remove_node", "n1")])
    b = run([FailureEvent(2.5, "remove_node", "n1")])
    assert a.trace == b.trace
