"""Workload classification and engine planning.

A round's aggregation load is S = w_s * n (single-update size times party
count). Loads at or below safety_factor * node memory run on the in-memory
local engine; anything larger goes to the partitioned distributed engine.
The safety factor (default 0.5) accounts for working memory beyond the raw
inputs: accumulators, decode buffers and framework overhead mean a node
falls over well before S reaches its nominal memory size.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .codec import encoded_update_size
from .errors import CapacityExceeded
from .model import ModelSchema

# Client id assumed when estimating w_s before any update has arrived.
NOMINAL_CLIENT_ID = "client-000000"

MIB = 1024 * 1024


@dataclass(frozen=True)
class CapacityConfig:
    node_memory_budget_bytes: int
    core_count: int
    safety_factor: float = 0.5
    distributed_available: bool = True
    worker_count: int = 4
    worker_memory_budget_bytes: int = 512 * MIB
    target_partition_bytes: int = 64 * MIB

    def __post_init__(self):
        if self.node_memory_budget_bytes <= 0:
            raise ValueError("node_memory_budget_bytes must be positive")
        if not 0 < self.safety_factor <= 1:
            raise ValueError("safety_factor must be in (0, 1]")
        if self.core_count <= 0 or self.worker_count < 0:
            raise ValueError("core_count must be positive, worker_count non-negative")
        if self.worker_memory_budget_bytes <= 0 or self.target_partition_bytes <= 0:
            raise ValueError("worker memory and partition target must be positive")


@dataclass(frozen=True)
class WorkloadDescriptor:
    update_size_bytes: int
    party_count: int

    def __post_init__(self):
        if self.update_size_bytes <= 0 or self.party_count <= 0:
            raise ValueError("update size and party count must be positive")

    @property
    def total_bytes(self) -> int:
        return self.update_size_bytes * self.party_count


class WorkloadClass(Enum):
    SMALL = "small"
    LARGE = "large"


@dataclass(frozen=True)
class LocalPlan:
    chunk_count: int


@dataclass(frozen=True)
class DistributedPlan:
    partition_count: int
    worker_count: int


EnginePlan = LocalPlan | DistributedPlan


def estimate_update_size(schema: ModelSchema, client_id: str = NOMINAL_CLIENT_ID) -> int:
    """Exact encoded size of one update for this schema (w_s)."""
    return encoded_update_size(schema, client_id)


def classify(w: WorkloadDescriptor, c: CapacityConfig) -> WorkloadClass:
    """Small iff S fits within the derated node budget; the boundary is inclusive."""
    if w.total_bytes <= c.safety_factor * c.node_memory_budget_bytes:
        return WorkloadClass.SMALL
    return WorkloadClass.LARGE


def plan(w: WorkloadDescriptor, c: CapacityConfig) -> EnginePlan:
    """Turn a classification into an execution plan.

    Small workloads get one chunk per party up to the core count. Large
    workloads get at least one partition per worker, more if partitions
    would otherwise exceed the target partition size.
    """
    if classify(w, c) is WorkloadClass.SMALL:
        return LocalPlan(chunk_count=min(c.core_count, w.party_count))
    if not c.distributed_available or c.worker_count == 0:
        raise CapacityExceeded(
            f"workload of {w.total_bytes} bytes exceeds "
            f"{c.safety_factor:g} * {c.node_memory_budget_bytes} bytes "
            "and no distributed backend is available"
        )
    by_target = -(-w.total_bytes // c.target_partition_bytes)  # ceil div
    return DistributedPlan(
        partition_count=max(c.worker_count, by_target),
        worker_count=c.worker_count,
    )
