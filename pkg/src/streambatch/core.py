"""Shared domain types: rows, partitions, resources, work specs and the lazy Dataset."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import Callable, Iterator, Mapping, Optional, Sequence, Tuple

MB = 2**20
GB = 2**30
DEFAULT_TARGET_PARTITION_BYTES = 128 * MB

# Fixed-point scale for fractional resource amounts.
RESOURCE_SCALE = 1000


class StreamBatchError(Exception):
    """Base class for engine errors."""


class ConfigError(StreamBatchError, ValueError):
    pass


class UnsupportedOperatorError(StreamBatchError):
    pass


@dataclass(frozen=True)
class Row:
    payload: bytes
    nominal_bytes: int

    def __post_init__(self):
        if self.nominal_bytes < 0:
            raise ConfigError("nominal_bytes must be >= 0")

    @property
    def accounted_bytes(self) -> int:
        return self.nominal_bytes


@dataclass(frozen=True, eq=False)
class Partition:
    """An immutable batch of rows. Identity is ``(producing_task, output_index)``."""

    rows: Tuple[Row, ...]
    producing_task: str
    output_index: int
    location: str = ""

    @property
    def id(self) -> str:
        return f"{self.producing_task}#{self.output_index}"

    @property
    def num_rows(self) -> int:
        return len(self.rows)

    @cached_property
    def size_bytes(self) -> int:
        return sum(r.nominal_bytes for r in self.rows)

    def content_digest(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        for r in self.rows:
            h.update(r.nominal_bytes.to_bytes(8, "little"))
            h.update(len(r.payload).to_bytes(4, "little"))
            h.update(r.payload)
        return h.hexdigest()

    def __eq__(self, other):
        if not isinstance(other, Partition):
            return NotImplemented
        return self.id == other.id and self.rows == other.rows

    def __hash__(self):
        return hash(self.id)

    def __repr__(self):
        return f"Partition({self.id}, rows={self.num_rows}, bytes={self.size_bytes}, at={self.location!r})"


@dataclass(frozen=True)
class ResourceRequirement:
    amounts: Tuple[Tuple[str, float], ...] = (("CPU", 1.0),)

    def __post_init__(self):
        if not self.amounts:
            raise ConfigError("resource requirement needs at least one entry")
        for name, amount in self.amounts:
            if not math.isfinite(amount) or amount < 0:
                raise ConfigError(f"invalid amount for resource {name!r}: {amount}")
        object.__setattr__(self, "amounts", tuple(sorted((str(k), float(v)) for k, v in self.amounts)))

    @classmethod
    def of(cls, mapping: Optional[Mapping[str, float]] = None, **kwargs) -> "ResourceRequirement":
        merged = dict(mapping or {})
        merged.update(kwargs)
        if not merged:
            merged = {"CPU": 1.0}
        return cls(tuple(merged.items()))

    def as_dict(self) -> dict:
        return dict(self.amounts)

    def fixed(self) -> dict:
        """Amounts in thousandths, as integers."""
        return {k: int(round(v * RESOURCE_SCALE)) for k, v in self.amounts}

    @property
    def primary(self) -> str:
        """The resource with the largest amount; used to label executors."""
        return max(self.amounts, key=lambda kv: (kv[1], kv[0] == "GPU"))[0]

    def __str__(self):
        return "{" + ", ".join(f"{k}:{v:g}" for k, v in self.amounts) + "}"


def _digest(*parts: bytes) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    for p in parts:
        h.update(len(p).to_bytes(4, "little"))
        h.update(p)
    return h.digest()


def _unit_fraction(payload: bytes, seed: int) -> Fraction:
    d = _digest(b"fanout", seed.to_bytes(8, "little", signed=True), payload)
    return Fraction(int.from_bytes(d[:8], "little"), 2**64)


UNITS = ("per_row", "per_partition", "per_batch")


@dataclass(frozen=True)
class WorkSpec:
    """Declarative stand-in for a UDF: a compute cost plus a deterministic row transform.

    ``output_bytes_per_row`` of ``None`` keeps the input row's size.  ``fn`` is an
    optional pure ``bytes -> sequence of bytes`` hook; when given it replaces the
    synthetic fan-out and output sizes follow the payload lengths.
    """

    compute_seconds_per_unit: float = 0.0
    unit: str = "per_row"
    output_rows_per_input_row: Fraction = Fraction(1)
    output_bytes_per_row: Optional[int] = None
    deterministic_seed: int = 0
    fn: Optional[Callable[[bytes], Sequence[bytes]]] = field(default=None, compare=False)

    def __post_init__(self):
        if self.compute_seconds_per_unit < 0 or not math.isfinite(self.compute_seconds_per_unit):
            raise ConfigError("compute_seconds_per_unit must be finite and >= 0")
        if self.unit not in UNITS:
            raise ConfigError(f"unit must be one of {UNITS}, got {self.unit!r}")
        ratio = Fraction(self.output_rows_per_input_row)
        if ratio < 0:
            raise ConfigError("output_rows_per_input_row must be >= 0")
        object.__setattr__(self, "output_rows_per_input_row", ratio)
        if self.output_bytes_per_row is not None and self.output_bytes_per_row < 0:
            raise ConfigError("output_bytes_per_row must be >= 0")

    def fanout(self, row: Row) -> int:
        r = self.output_rows_per_input_row
        whole = r.numerator // r.denominator
        frac = r - whole
        if frac and _unit_fraction(row.payload, self.deterministic_seed) < frac:
            whole += 1
        return whole

    def apply(self, row: Row) -> Iterator[Row]:
        if self.fn is not None:
            for out in self.fn(row.payload):
                yield Row(bytes(out), len(out))
            return
        size = row.nominal_bytes if self.output_bytes_per_row is None else self.output_bytes_per_row
        seed = self.deterministic_seed.to_bytes(8, "little", signed=True)
        for k in range(self.fanout(row)):
            yield Row(_digest(seed, row.payload, k.to_bytes(4, "little")), size)

    @property
    def byte_ratio(self) -> Fraction:
        """Nominal output:input byte ratio for rows of unknown size (planning estimate)."""
        return self.output_rows_per_input_row


IDENTITY_WORK = WorkSpec()


@dataclass(frozen=True)
class SourceFile:
    """Synthetic input file of ``num_rows`` rows, each ``row_bytes`` nominal bytes."""

    name: str
    num_rows: int
    row_bytes: int

    def __post_init__(self):
        if self.num_rows < 0 or self.row_bytes < 0:
            raise ConfigError(f"file {self.name!r}: counts must be >= 0")

    @property
    def estimated_bytes(self) -> int:
        return self.num_rows * self.row_bytes

    def row(self, index: int) -> Row:
        return Row(_digest(b"src", self.name.encode(), index.to_bytes(8, "little")), self.row_bytes)


MAP_KINDS = ("Read", "Map", "MapBatches", "FlatMap", "Filter", "Write")
CONSUME_KINDS = ("Iter", "IterSplit", "Cache")
ALL_TO_ALL_KINDS = ("Sort", "GroupBy", "RandomShuffle", "Repartition")
KINDS = MAP_KINDS + ("Limit",) + CONSUME_KINDS + ALL_TO_ALL_KINDS


@dataclass(frozen=True)
class LogicalOperator:
    kind: str
    udf: WorkSpec = IDENTITY_WORK
    resources: ResourceRequirement = ResourceRequirement()
    stateful: bool = False
    batch_size: Optional[int] = None
    limit_n: Optional[int] = None
    split_n: Optional[int] = None
    concurrency: Optional[int] = None
    init_seconds: float = 0.0
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown operator kind {self.kind!r}")
        if (self.batch_size is not None) != (self.kind == "MapBatches"):
            raise ConfigError("batch_size is required for MapBatches and only for it")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if (self.split_n is not None) != (self.kind == "IterSplit"):
            raise ConfigError("split_n is required for IterSplit and only for it")
        if self.kind == "IterSplit" and self.split_n < 1:
            raise ConfigError("iter_split needs n >= 1")
        if self.kind == "Limit" and (self.limit_n is None or self.limit_n < 0):
            raise ConfigError("limit needs n >= 0")
        if self.stateful and self.concurrency is not None and self.concurrency < 1:
            raise ConfigError("actor pool size must be >= 1")

    @property
    def label(self) -> str:
        return self.name or self.kind

    @property
    def is_trigger(self) -> bool:
        return self.kind in CONSUME_KINDS


@dataclass(frozen=True)
class Dataset:
    """A lazy expression node. Nothing runs until a session executes a consumption node."""

    op: LogicalOperator
    upstream: Optional["Dataset"] = None
    files: Tuple[SourceFile, ...] = ()

    @property
    def depth(self) -> int:
        return 1 if self.upstream is None else 1 + self.upstream.depth

    @property
    def is_trigger(self) -> bool:
        return self.op.is_trigger

    def chain(self) -> list:
        node, out = self, []
        while node is not None:
            out.append(node)
            node = node.upstream
        return out[::-1]

    def then(self, op: LogicalOperator) -> "Dataset":
        if self.is_trigger and self.op.kind != "Cache":
            raise ConfigError(f"cannot extend a {self.op.kind} node")
        return Dataset(op, self)

    def map(self, udf: WorkSpec = IDENTITY_WORK, resources=None, **kw) -> "Dataset":
        return self.then(LogicalOperator("Map", udf, _res(resources), **kw))

    def flat_map(self, udf: WorkSpec, resources=None, **kw) -> "Dataset":
        return self.then(LogicalOperator("FlatMap", udf, _res(resources), **kw))

    def filter(self, udf: WorkSpec, resources=None, **kw) -> "Dataset":
        return self.then(LogicalOperator("Filter", udf, _res(resources), **kw))

    def map_batches(self, udf: WorkSpec, batch_size: int, resources=None, **kw) -> "Dataset":
        return self.then(LogicalOperator("MapBatches", udf, _res(resources), batch_size=batch_size, **kw))

    def limit(self, n: int) -> "Dataset":
        return self.then(LogicalOperator("Limit", limit_n=n))

    def write(self, udf: WorkSpec = IDENTITY_WORK, resources=None) -> "Dataset":
        return self.then(LogicalOperator("Write", udf, _res(resources)))

    def iter(self) -> "Dataset":
        return self.then(LogicalOperator("Iter"))

    def iter_split(self, n: int) -> "Dataset":
        return self.then(LogicalOperator("IterSplit", split_n=n))

    def cache(self) -> "Dataset":
        return self.then(LogicalOperator("Cache"))


def _res(resources) -> ResourceRequirement:
    if resources is None:
        return ResourceRequirement()
    if isinstance(resources, ResourceRequirement):
        return resources
    return ResourceRequirement.of(resources)


def read(files: Sequence[SourceFile], udf: WorkSpec = IDENTITY_WORK, resources=None, **kw) -> Dataset:
    if not isinstance(files, (list, tuple)):
        files = [files]
    return Dataset(LogicalOperator("Read", udf, _res(resources), **kw), None, tuple(files))


@dataclass(frozen=True)
class NodeSpec:
    node_id: str
    slots: Tuple[Tuple[str, float], ...]
    local_buffer_partitions: int = 1

    @classmethod
    def of(cls, node_id: str, slots: Mapping[str, float], local_buffer_partitions: int = 1) -> "NodeSpec":
        return cls(node_id, tuple(sorted((k, float(v)) for k, v in slots.items())), local_buffer_partitions)

    def slot_dict(self) -> dict:
        return dict(self.slots)


@dataclass(frozen=True)
class ClusterSpec:
    nodes: Tuple[NodeSpec, ...]
    shared_memory_bytes: int
    spill_bandwidth_bytes_per_s: float = 0.0

    def __post_init__(self):
        if self.shared_memory_bytes <= 0:
            raise ConfigError("shared_memory_bytes must be > 0")
        if self.spill_bandwidth_bytes_per_s < 0:
            raise ConfigError("spill_bandwidth_bytes_per_s must be >= 0")
        ids = [n.node_id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate node ids")
        for n in self.nodes:
            if not any(v > 0 for _, v in n.slots):
                raise ConfigError(f"node {n.node_id!r} has no slots")

    def total_slots(self, resource: str) -> float:
        return sum(n.slot_dict().get(resource, 0.0) for n in self.nodes)
