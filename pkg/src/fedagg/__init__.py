"""Elastic model-aggregation service for federated learning.

Small rounds fuse in-memory and data-parallel on one node; large rounds go
through a partitioned, fault-tolerant map/reduce engine backed by a shared
blob store. The dispatcher picks the engine per round from the workload
size S = w_s * n against the node's memory budget.
"""

from .dispatch import CapacityConfig, DistributedPlan, LocalPlan, WorkloadClass, WorkloadDescriptor, classify, estimate_update_size, plan
from .fusion import (
    FusionAlgo,
    FusionConfig,
    PartialAggregate,
    Summation,
    finalize,
    max_relative_difference,
    partial_accumulate,
    partial_merge,
    partial_new,
    sequential_fuse,
)
from .model import Dtype, GlobalModel, LayerSpec, LayerTensor, ModelSchema, ModelUpdate, check_compatible, schema_of, synth_update

__all__ = [
    "CapacityConfig",
    "DistributedPlan",
    "Dtype",
    "FusionAlgo",
    "FusionConfig",
    "GlobalModel",
    "LayerSpec",
    "LayerTensor",
    "LocalPlan",
    "ModelSchema",
    "ModelUpdate",
    "PartialAggregate",
    "Summation",
    "WorkloadClass",
    "WorkloadDescriptor",
    "check_compatible",
    "classify",
    "estimate_update_size",
    "finalize",
    "max_relative_difference",
    "partial_accumulate",
    "partial_merge",
    "partial_new",
    "plan",
    "schema_of",
    "sequential_fuse",
    "synth_update",
]

__version__ = "0.1.0"
