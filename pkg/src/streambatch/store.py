"""Simulated shared-memory object store with reference counting and LRU spilling."""

from __future__ import annotations

import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

from .core import Partition, StreamBatchError


class StoreError(StreamBatchError):
    pass


class UnschedulableError(StoreError):
    """A single partition is larger than the whole shared memory pool."""


class DanglingReferenceError(StoreError, KeyError):
    pass


class RefcountError(StoreError):
    pass


class LostPartitionError(DanglingReferenceError):
    """The partition existed but was destroyed by a node failure."""


@dataclass(frozen=True)
class Ref:
    pid: str


@dataclass
class StoreEntry:
    partition: Partition
    size_bytes: int
    refcount: int
    state: str  # in_memory | spilled
    location: str
    pins: int = 0


class ObjectStore:
    """Holds materialized partitions under a global byte capacity.

    ``try_put``/``try_fetch`` never block and report the simulated seconds the
    caller must be charged for spilling; ``put``/``get`` block the calling
    thread and charge an optional clock.
    """

    def __init__(self, capacity_bytes: int, spill_bandwidth_bytes_per_s: float = 0.0, clock=None):
        if capacity_bytes <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity_bytes
        self.spill_bandwidth = spill_bandwidth_bytes_per_s
        self.clock = clock
        self._entries: Dict[str, StoreEntry] = {}
        self._lru: "OrderedDict[str, None]" = OrderedDict()
        self._lost: set = set()
        self._cond = threading.Condition(threading.RLock())
        self.usage = 0
        self.peak_usage = 0
        self.spilled_bytes = 0
        self.unspilled_bytes = 0
        self.spill_seconds = 0.0
        self.unspill_seconds = 0.0
        self.lost_bytes = 0

    # -- introspection -------------------------------------------------
    @property
    def free_bytes(self) -> int:
        return self.capacity - self.usage

    @property
    def spill_enabled(self) -> bool:
        return self.spill_bandwidth > 0

    def entry(self, pid: str) -> StoreEntry:
        with self._cond:
            try:
                return self._entries[pid]
            except KeyError:
                raise self._dangling(pid) from None

    def alive(self, pid: str) -> bool:
        return pid in self._entries

    def __len__(self):
        return len(self._entries)

    def pids(self) -> List[str]:
        return list(self._entries)

    def metrics(self) -> dict:
        return {
            "usage_bytes": self.usage,
            "peak_usage_bytes": self.peak_usage,
            "spilled_bytes": self.spilled_bytes,
            "unspilled_bytes": self.unspilled_bytes,
            "spill_seconds": self.spill_seconds,
            "unspill_seconds": self.unspill_seconds,
            "lost_bytes": self.lost_bytes,
        }

    def _dangling(self, pid):
        if pid in self._lost:
            return LostPartitionError(pid)
        return DanglingReferenceError(pid)

    # -- memory management --------------------------------------------
    def _make_room(self, needed: int) -> Optional[float]:
        """Spill LRU unpinned entries until ``needed`` bytes fit. None if impossible."""
        if needed <= self.free_bytes:
            return 0.0
        if not self.spill_enabled:
            return None
        victims, freed = [], 0
        for pid in self._lru:
            e = self._entries[pid]
            if e.pins:
                continue
            victims.append(e)
            freed += e.size_bytes
            if self.free_bytes + freed >= needed:
                break
        if self.free_bytes + freed < needed:
            return None
        for e in victims:
            pid = e.partition.id
            del self._lru[pid]
            e.state = "spilled"
            self.usage -= e.size_bytes
            self.spilled_bytes += e.size_bytes
        cost = freed / self.spill_bandwidth
        self.spill_seconds += cost
        return cost

    def _admit(self, e: StoreEntry) -> None:
        e.state = "in_memory"
        self._lru[e.partition.id] = None
        self.usage += e.size_bytes
        self.peak_usage = max(self.peak_usage, self.usage)
        assert self.usage <= self.capacity

    # -- put -------------------------------------------------------------
    def try_put(self, partition: Partition, refs: int = 1) -> Optional[Tuple[Ref, float]]:
        size = partition.size_bytes
        if size > self.capacity:
            raise UnschedulableError(
                f"partition {partition.id} ({size} bytes) exceeds shared memory ({self.capacity} bytes)"
            )
        with self._cond:
            pid = partition.id
            if pid in self._entries:
                raise StoreError(f"partition {pid} already stored")
            cost = self._make_room(size)
            if cost is None:
                return None
            e = StoreEntry(partition, size, refs, "in_memory", partition.location)
            self._entries[pid] = e
            self._lost.discard(pid)
            self._admit(e)
            return Ref(pid), cost

    def put(self, partition: Partition, block: bool = True, timeout: Optional[float] = None) -> Ref:
        with self._cond:
            while True:
                res = self.try_put(partition)
                if res is not None:
                    break
                if not block:
                    raise StoreError("store full")
                if not self._cond.wait(timeout):
                    raise TimeoutError("put timed out waiting for memory")
        ref, cost = res
        self._charge(cost)
        return ref

    # -- references ----------------------------------------------------
    def add_ref(self, ref: Ref, n: int = 1) -> None:
        with self._cond:
            e = self._entries.get(ref.pid)
            if e is None:
                raise self._dangling(ref.pid)
            e.refcount += n

    def drop_ref(self, ref: Ref) -> None:
        with self._cond:
            e = self._entries.get(ref.pid)
            if e is None:
                raise self._dangling(ref.pid)
            if e.refcount <= 0:
                raise RefcountError(f"refcount of {ref.pid} would go below zero")
            e.refcount -= 1
            if e.refcount == 0:
                self._delete(e)

    def _delete(self, e: StoreEntry) -> None:
        pid = e.partition.id
        del self._entries[pid]
        if e.state == "in_memory":
            del self._lru[pid]
            self.usage -= e.size_bytes
        self._cond.notify_all()

    def pin(self, ref: Ref) -> None:
        with self._cond:
            self.entry(ref.pid).pins += 1

    def unpin(self, ref: Ref) -> None:
        with self._cond:
            e = self._entries.get(ref.pid)
            if e is None:
                return
            if e.pins <= 0:
                raise RefcountError(f"unbalanced unpin of {ref.pid}")
            e.pins -= 1
            self._cond.notify_all()

    # -- get ---------------------------------------------------------------
    def try_fetch(self, ref: Ref) -> Optional[Tuple[Partition, float]]:
        with self._cond:
            e = self._entries.get(ref.pid)
            if e is None:
                raise self._dangling(ref.pid)
            if e.refcount < 1:
                raise DanglingReferenceError(ref.pid)
            if e.state == "in_memory":
                self._lru.move_to_end(ref.pid)
                return e.partition, 0.0
            e.pins += 1  # not a victim of its own un-spill
            try:
                spill_cost = self._make_room(e.size_bytes)
            finally:
                e.pins -= 1
            if spill_cost is None:
                return None
            self._admit(e)
            cost = e.size_bytes / self.spill_bandwidth
            self.unspilled_bytes += e.size_bytes
            self.unspill_seconds += cost
            return e.partition, spill_cost + cost

    def get(self, ref: Ref, timeout: Optional[float] = None) -> Partition:
        with self._cond:
            while True:
                res = self.try_fetch(ref)
                if res is not None:
                    break
                if not self._cond.wait(timeout):
                    raise TimeoutError("get timed out waiting for memory")
        part, cost = res
        self._charge(cost)
        return part

    def _charge(self, seconds: float) -> None:
        if self.clock is not None and seconds:
            self.clock.sleep(seconds)

    # -- failures ----------------------------------------------------------
    def mark_lost(self, node_id: str) -> List[str]:
        """Destroy every entry located on ``node_id`` (memory and local spill)."""
        with self._cond:
            lost = [pid for pid, e in self._entries.items() if e.location == node_id]
            for pid in lost:
                e = self._entries[pid]
                self.lost_bytes += e.size_bytes
                self._delete(e)
                self._lost.add(pid)
            return lost

    def discard(self, pid: str) -> None:
        """Forcefully remove an entry regardless of its refcount (pipeline rollback)."""
        with self._cond:
            e = self._entries.get(pid)
            if e is not None:
                self._delete(e)
