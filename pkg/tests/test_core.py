from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streambatch import MB, ClusterSpec, NodeSpec, Session, SourceFile, read
from streambatch.core import (
    ConfigError,
    Dataset,
    LogicalOperator,
    Partition,
    ResourceRequirement,
    Row,
    WorkSpec,
)


def test_partition_sizes_follow_rows():
    rows = tuple(Row(bytes([i]), 10 + i) for i in range(5))
    p = Partition(rows, "t0", 2, "n0")
    assert p.num_rows == 5
    assert p.size_bytes == sum(10 + i for i in range(5))
    assert p.id == "t0#2"


def test_row_rejects_negative_size():
    with pytest.raises(ConfigError):
        Row(b"", -1)


def test_resource_requirement_defaults_to_one_cpu():
    assert ResourceRequirement.of({}).as_dict() == {"CPU": 1.0}
    assert ResourceRequirement.of(GPU=0.5).as_dict() == {"GPU": 0.5}


@pytest.mark.parametrize("bad", [{"CPU": -1}, {"CPU": float("inf")}, {"CPU": float("nan")}])
def test_resource_requirement_validation(bad):
    with pytest.raises(ConfigError):
        ResourceRequirement.of(bad)


def test_operator_argument_rules():
    with pytest.raises(ConfigError):
        LogicalOperator("MapBatches")
    with pytest.raises(ConfigError):
        LogicalOperator("Map", batch_size=4)
    with pytest.raises(ConfigError):
        LogicalOperator("IterSplit", split_n=0)
    with pytest.raises(ConfigError):
        LogicalOperator("Limit", limit_n=-1)
    with pytest.raises(ConfigError):
        LogicalOperator("Explode")


def test_builder_is_lazy():
    ds = read([SourceFile("f", 10, MB)])
    assert ds.depth == 1
    chain = ds.map(WorkSpec(1.0)).map_batches(WorkSpec(1.0), batch_size=32)
    assert chain.depth == 3
    assert chain.op.batch_size == 32
    assert not chain.is_trigger
    assert chain.iter().is_trigger


def test_same_calls_build_equal_datasets():
    def build():
        return read([SourceFile("f", 10, MB)]).map(WorkSpec(0.5)).filter(WorkSpec(output_rows_per_input_row="1/2"))

    assert build() == build()
    assert hash(build()) == hash(build())


def test_triggers_cannot_be_extended():
    ds = read([SourceFile("f", 1, 1)]).iter()
    with pytest.raises(ConfigError):
        ds.map()


def test_limit_zero_yields_no_rows():
    cluster = ClusterSpec((NodeSpec.of("n0", {"CPU": 2}),), 64 * MB)
    result = Session(cluster).run(read([SourceFile("f", 100, 1000)]).limit(0))
    assert result.report.rows_out == 0
    assert result.outputs == []


def test_workspec_ratio_parsing():
    w = WorkSpec(output_rows_per_input_row="3/2")
    assert w.output_rows_per_input_row == Fraction(3, 2)
    with pytest.raises(ConfigError):
        WorkSpec(unit="per_hour")
    with pytest.raises(ConfigError):
        WorkSpec(compute_seconds_per_unit=-1)


@settings(max_examples=50, deadline=None)
@given(st.binary(max_size=16), st.fractions(min_value=0, max_value=5, max_denominator=7), st.integers(0, 99))
def test_workspec_apply_is_pure(payload, ratio, seed):
    w = WorkSpec(output_rows_per_input_row=ratio, deterministic_seed=seed)
    row = Row(payload, 7)
    first = list(w.apply(row))
    assert first == list(w.apply(row))
    whole = ratio.numerator // ratio.denominator
    assert whole <= len(first) <= whole + 1


def test_fractional_fanout_converges_to_ratio():
    w = WorkSpec(output_rows_per_input_row="1/3", deterministic_seed=3)
    f = SourceFile("f", 30000, 1)
    produced = sum(w.fanout(f.row(i)) for i in range(f.num_rows))
    assert abs(produced / f.num_rows - 1 / 3) < 0.02


def test_custom_byte_hook():
    w = WorkSpec(fn=lambda b: [b, b[::-1]])
    out = list(w.apply(Row(b"ab", 2)))
    assert [r.payload for r in out] == [b"ab", b"ba"]
    assert all(r.nominal_bytes == 2 for r in out)


def test_dataset_store_untouched_before_run():
    cluster = ClusterSpec((NodeSpec.of("n0", {"CPU": 1}),), MB)
    session = Session(cluster)
    ds = read([SourceFile("f", 3, 10)]).map()
    assert isinstance(ds, Dataset)
    assert session.history == []
