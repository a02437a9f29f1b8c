"""In-memory data-parallel fusion for workloads that fit on one node.

Updates are sorted by client_id, split into contiguous chunks, folded into
per-chunk partials on a thread pool, and merged in ascending chunk index on
the calling thread. Chunk boundaries depend only on the sorted order, so a
fixed (update multiset, chunk_count) pair produces identical output bytes
no matter how the pool schedules the chunks.

NumPy releases the GIL inside its elementwise loops, so chunk folds of
non-trivial tensors genuinely overlap on multicore hosts.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

from .codec import encoded_update_size
from .errors import EmptyInput, MemoryCapExceeded
from .fusion import FusionConfig, finalize, fold_updates, partial_merge
from .model import GlobalModel, ModelUpdate, check_compatible, schema_of


@dataclass(frozen=True)
class PhaseTimings:
    """Wall-clock breakdown of one fusion run, in seconds."""

    read_partition_s: float
    sum_s: float
    reduce_s: float
    finalize_s: float
    total_s: float

    def __post_init__(self):
        parts = (self.read_partition_s, self.sum_s, self.reduce_s, self.finalize_s)
        if any(p < 0 for p in parts) or self.total_s < 0:
            raise ValueError("phase timings must be non-negative")
        if any(p > self.total_s for p in parts):
            raise ValueError("total_s must be >= each component")


def _chunk_bounds(n: int, chunks: int) -> list[tuple[int, int]]:
    """Contiguous near-equal split of range(n) into `chunks` pieces."""
    base, extra = divmod(n, chunks)
    bounds = []
    start = 0
    for i in range(chunks):
        size = base + (1 if i < extra else 0)
        bounds.append((start, start + size))
        start += size
    return bounds


def fuse_local(
    updates: Sequence[ModelUpdate],
    cfg: FusionConfig,
    chunk_count: int,
    round_no: int = 0,
    memory_cap_bytes: int | None = None,
) -> tuple[GlobalModel, PhaseTimings]:
    """Fuse all updates in memory, data-parallel across `chunk_count` chunks.

    Raises MemoryCapExceeded when the encoded input size exceeds the engine's
    own cap; this is the engine refusing a dispatcher misclassification, not
    a best-effort attempt.
    """
    t0 = time.perf_counter()
    if not updates:
        raise EmptyInput("no updates to fuse")
    if chunk_count < 1:
        raise ValueError("chunk_count must be >= 1")

    schema = schema_of(updates[0])
    for u in updates[1:]:
        check_compatible(schema, schema_of(u))
    if memory_cap_bytes is not None:
        total = sum(encoded_update_size(schema_of(u), u.client_id) for u in updates)
        if total > memory_cap_bytes:
            raise MemoryCapExceeded(
                f"input of {total} bytes exceeds local engine cap of {memory_cap_bytes} bytes"
            )

    ordered = sorted(updates, key=lambda u: u.client_id)
    chunks = min(chunk_count, len(ordered))
    bounds = _chunk_bounds(len(ordered), chunks)
    t_read = time.perf_counter()

    def fold(span: tuple[int, int]):
        return fold_updates(schema, ordered[span[0] : span[1]], cfg)

    if chunks == 1:
        partials = [fold(bounds[0])]
    else:
        with ThreadPoolExecutor(max_workers=chunks) as pool:
            partials = list(pool.map(fold, bounds))
    t_sum = time.perf_counter()

    merged = partials[0]
    for p in partials[1:]:
        merged = partial_merge(merged, p)
    t_reduce = time.perf_counter()

    model = finalize(merged, cfg, round_no)
    t_final = time.perf_counter()

    timings = PhaseTimings(
        read_partition_s=t_read - t0,
        sum_s=t_sum - t_read,
        reduce_s=t_reduce - t_sum,
        finalize_s=t_final - t_reduce,
        total_s=t_final - t0,
    )
    return model, timings


@dataclass
class LocalEngine:
    """Engine facade used by the coordinator; enforces its own memory cap."""

    memory_cap_bytes: int | None = None

    def fuse(self, updates, cfg, plan, round_no=0):
        return fuse_local(
            updates,
            cfg,
            chunk_count=plan.chunk_count,
            round_no=round_no,
            memory_cap_bytes=self.memory_cap_bytes,
        )
