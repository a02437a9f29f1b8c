"""Partitioned map/reduce fusion for workloads that exceed one node's memory.

The driver packs update blobs into balanced partitions (greedy
longest-processing-time), hands each partition to a worker as a map task
(read + decode + fold into one partial aggregate), and merges the resulting
partials in ascending partition id. Workers that crash or stall past the
task timeout get their partitions re-enqueued with a bumped attempt count;
results are deduplicated by partition id, so retries and duplicate
executions cannot double-count. Map tasks fold keys in sorted order and the
reduce order is fixed, which makes the final bytes independent of worker
scheduling for a given partition plan.

Workers here are in-process threads behind a message-passing boundary;
TaskSpec/TaskResult have a binary framing so the same protocol can cross a
process boundary unchanged.
"""

from __future__ import annotations

import heapq
import logging
import queue
import struct
import threading
import time
import uuid
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

from . import codec
from .engine_local import PhaseTimings
from .errors import (
    DuplicatePartition,
    JobFailed,
    MissingPartition,
    NoWorkers,
    OversizedEntry,
    SchemaMismatch,
)
from .fusion import (
    FusionAlgo,
    FusionConfig,
    PartialAggregate,
    Summation,
    UpdateFolder,
    decode_partial,
    encode_partial,
    finalize,
    partial_merge,
)
from .model import Dtype, GlobalModel, check_compatible, schema_of
from .store import BlobStore, publish_global

logger = logging.getLogger(__name__)

MAGIC_TASK_SPEC = b"FTSK"
MAGIC_TASK_RESULT = b"FTRS"


# --- partitioning ---------------------------------------------------------------

@dataclass(frozen=True)
class Partition:
    partition_id: int
    keys: tuple[str, ...]
    bytes: int


@dataclass(frozen=True)
class PartitionPlan:
    partitions: tuple[Partition, ...]

    def key_set(self) -> set[str]:
        return {k for p in self.partitions for k in p.keys}


def make_partitions(
    entries: Sequence[tuple[str, int]],
    target_bytes: int,
    worker_memory_budget: int,
) -> PartitionPlan:
    """Greedy LPT packing of (key, size) entries into balanced partitions.

    Entries are sorted by (size desc, key asc) and each is placed in the
    currently lightest bin, starting from ceil(total/target) bins and adding
    bins until no partition exceeds the worker memory budget. Deterministic
    for a fixed entry set.
    """
    if not entries:
        raise ValueError("cannot partition an empty entry list")
    for key, size in entries:
        if size <= 0:
            raise ValueError(f"entry {key!r} has non-positive size {size}")
        if size > worker_memory_budget:
            raise OversizedEntry(key, size, worker_memory_budget)
    total = sum(size for _, size in entries)
    ordered = sorted(entries, key=lambda e: (-e[1], e[0]))
    bin_count = max(1, -(-total // target_bytes))
    while True:
        loads = [(0, i) for i in range(bin_count)]  # (load, bin index); heap
        heapq.heapify(loads)
        assignment: list[list[str]] = [[] for _ in range(bin_count)]
        sizes = [0] * bin_count
        for key, size in ordered:
            load, idx = heapq.heappop(loads)
            assignment[idx].append(key)
            sizes[idx] = load + size
            heapq.heappush(loads, (load + size, idx))
        if max(sizes) <= worker_memory_budget or bin_count >= len(entries):
            break
        bin_count += 1
    partitions = tuple(
        Partition(partition_id=i, keys=tuple(sorted(keys)), bytes=sizes[i])
        for i, keys in enumerate(assignment)
        if keys
    )
    # Re-number densely in case trailing bins stayed empty.
    partitions = tuple(
        Partition(partition_id=i, keys=p.keys, bytes=p.bytes)
        for i, p in enumerate(partitions)
    )
    return PartitionPlan(partitions)


# --- task protocol ---------------------------------------------------------------

@dataclass(frozen=True)
class TaskSpec:
    partition_id: int
    keys: tuple[str, ...]
    fusion: FusionConfig
    attempt: int = 1


@dataclass(frozen=True)
class TaskTimings:
    read_s: float
    sum_s: float


@dataclass(frozen=True, eq=False)
class TaskResult:
    partition_id: int
    partial_bytes: bytes
    timings: TaskTimings

    def partial(self) -> PartialAggregate:
        return decode_partial(self.partial_bytes)


def encode_task_spec(t: TaskSpec) -> bytes:
    w = codec.RecordWriter(MAGIC_TASK_SPEC)
    w.u16(codec.VERSION)
    w.u16(0)
    w.u32(t.partition_id)
    w.u32(t.attempt)
    w.u8(t.fusion.algo.wire_code)
    w.u8(0 if t.fusion.summation is Summation.NAIVE else 1)
    w.u8(255 if t.fusion.output_dtype is None else t.fusion.output_dtype.wire_code)
    w.raw(struct.pack("<d", t.fusion.epsilon))
    w.u32(len(t.keys))
    for k in t.keys:
        kb = k.encode("utf-8")
        w.u16(len(kb))
        w.raw(kb)
    return w.finish()


def decode_task_spec(buf: bytes) -> TaskSpec:
    r = codec.check_frame(buf, MAGIC_TASK_SPEC)
    pid = r.u32("partition_id")
    attempt = r.u32("attempt")
    algo_code = r.u8("algo")
    algo = next(a for a in FusionAlgo if a.wire_code == algo_code)
    summation = Summation.NAIVE if r.u8("summation") == 0 else Summation.COMPENSATED
    od = r.u8("output_dtype")
    out_dtype = None if od == 255 else Dtype.from_wire(od)
    (epsilon,) = struct.unpack("<d", r.take(8, "epsilon"))
    keys = []
    for i in range(r.u32("key_count")):
        klen = r.u16(f"key[{i}].len")
        keys.append(r.take(klen, f"key[{i}]").decode("utf-8"))
    r.done()
    cfg = FusionConfig(algo=algo, epsilon=epsilon, summation=summation, output_dtype=out_dtype)
    return TaskSpec(pid, tuple(keys), cfg, attempt)


def encode_task_result(t: TaskResult) -> bytes:
    w = codec.RecordWriter(MAGIC_TASK_RESULT)
    w.u16(codec.VERSION)
    w.u16(0)
    w.u32(t.partition_id)
    w.raw(struct.pack("<dd", t.timings.read_s, t.timings.sum_s))
    w.u64(len(t.partial_bytes))
    w.raw(t.partial_bytes)
    return w.finish()


def decode_task_result(buf: bytes) -> TaskResult:
    r = codec.check_frame(buf, MAGIC_TASK_RESULT)
    pid = r.u32("partition_id")
    read_s, sum_s = struct.unpack("<dd", r.take(16, "timings"))
    n = r.u64("partial_len")
    partial = r.take(n, "partial_bytes")
    r.done()
    return TaskResult(pid, bytes(partial), TaskTimings(read_s, sum_s))


# --- map task ----------------------------------------------------------------------

def run_map_task(t: TaskSpec, store: BlobStore) -> TaskResult:
    """Decode the partition's blobs and fold them into one partial aggregate.

    Keys are processed in ascending order and only one blob is held in
    memory at a time, so the task's footprint stays near the largest single
    update plus the accumulator. Re-running the same spec yields
    byte-identical results.
    """
    read_s = 0.0
    sum_s = 0.0
    folder: UpdateFolder | None = None
    for key in sorted(t.keys):
        t0 = time.perf_counter()
        data = store.get(key)
        try:
            u = codec.decode_update(data)
        except codec.CodecError as e:
            raise type(e)(f"{key}: {e}") from None
        t1 = time.perf_counter()
        if folder is None:
            folder = UpdateFolder(schema_of(u), t.fusion)
        try:
            folder.add(u)
        except SchemaMismatch as e:
            raise SchemaMismatch(f"{key}: {e}") from None
        t2 = time.perf_counter()
        read_s += t1 - t0
        sum_s += t2 - t1
    if folder is None:
        raise ValueError("map task has no keys")
    return TaskResult(
        t.partition_id, encode_partial(folder.partial()), TaskTimings(read_s, sum_s)
    )


# --- reduce -------------------------------------------------------------------------

def reduce_results(
    results: Sequence[TaskResult],
    cfg: FusionConfig,
    expected_partitions: int | None = None,
    round_no: int = 0,
) -> GlobalModel:
    """Merge partials in ascending partition id, then finalize."""
    seen: dict[int, TaskResult] = {}
    for r in results:
        if r.partition_id in seen:
            raise DuplicatePartition(r.partition_id)
        seen[r.partition_id] = r
    count = expected_partitions if expected_partitions is not None else len(seen)
    merged: PartialAggregate | None = None
    for pid in range(count):
        if pid not in seen:
            raise MissingPartition(pid)
        partial = seen[pid].partial()
        if merged is None:
            merged = partial
        else:
            check_compatible(merged.schema, partial.schema)
            merged = partial_merge(merged, partial)
    if merged is None:
        raise MissingPartition(0)
    return finalize(merged, cfg, round_no)


# --- worker pool ----------------------------------------------------------------------

class WorkerCrashed(Exception):
    """Raised by a fault hook to simulate a worker dying mid-task."""


# fault hook: called as hook(worker_name, spec) before the task body runs;
# it may sleep (straggler), raise WorkerCrashed (kill), or raise anything
# else (task failure).
FaultHook = Callable[[str, TaskSpec], None]


@dataclass
class _Envelope:
    kind: str  # "done" | "task_error" | "crash" | "pong"
    worker: str
    job_id: str
    spec: TaskSpec | None = None
    result: TaskResult | None = None
    error: BaseException | None = None
    duration_s: float = 0.0


class WorkerPool:
    """Fixed set of in-process map workers fed through per-worker inboxes.

    All coordination goes through immutable message values: the driver
    pushes (job_id, TaskSpec) into a worker's inbox and the worker answers
    on the shared event queue. Nothing else is shared.
    """

    def __init__(self, store: BlobStore, worker_count: int, fault_hook: FaultHook | None = None):
        self.store = store
        self.worker_count = worker_count
        self.fault_hook = fault_hook
        self.events: "queue.Queue[_Envelope]" = queue.Queue()
        self._inboxes: dict[str, queue.Queue] = {}
        self._threads: dict[str, threading.Thread] = {}
        self._live: dict[str, bool] = {}
        self._lock = threading.Lock()
        self._started = False

    def start(self) -> float:
        """Spin up workers and wait for each to answer a health ping; idempotent."""
        t0 = time.perf_counter()
        if self.worker_count < 1:
            raise NoWorkers("worker pool configured with zero workers")
        if self._started:
            return 0.0
        for i in range(self.worker_count):
            name = f"w{i}"
            inbox: queue.Queue = queue.Queue()
            thread = threading.Thread(target=self._worker_loop, args=(name, inbox), daemon=True)
            self._inboxes[name] = inbox
            self._threads[name] = thread
            self._live[name] = True
            thread.start()
        for name in list(self._inboxes):
            self._inboxes[name].put(("ping", "", None))
        pending = set(self._inboxes)
        while pending:
            try:
                env = self.events.get(timeout=10.0)
            except queue.Empty:
                raise NoWorkers(f"workers failed health check: {sorted(pending)}") from None
            if env.kind == "pong":
                pending.discard(env.worker)
        self._started = True
        return time.perf_counter() - t0

    def stop(self) -> None:
        with self._lock:
            names = [n for n, live in self._live.items() if live]
        for name in names:
            self._inboxes[name].put(("stop", "", None))
        for name in names:
            self._threads[name].join(timeout=5.0)
        self._started = False
        self._inboxes.clear()
        self._threads.clear()
        self._live.clear()

    def live_workers(self) -> list[str]:
        with self._lock:
            return sorted(n for n, live in self._live.items() if live)

    def submit(self, worker: str, job_id: str, spec: TaskSpec) -> None:
        self._inboxes[worker].put(("task", job_id, spec))

    def _worker_loop(self, name: str, inbox: queue.Queue) -> None:
        while True:
            kind, job_id, spec = inbox.get()
            if kind == "stop":
                return
            if kind == "ping":
                self.events.put(_Envelope("pong", name, job_id))
                continue
            t0 = time.perf_counter()
            try:
                if self.fault_hook is not None:
                    self.fault_hook(name, spec)
                result = run_map_task(spec, self.store)
            except WorkerCrashed as e:
                with self._lock:
                    self._live[name] = False
                self.events.put(_Envelope("crash", name, job_id, spec=spec, error=e))
                return
            except BaseException as e:  # task failure; worker survives
                self.events.put(_Envelope("task_error", name, job_id, spec=spec, error=e))
                continue
            self.events.put(
                _Envelope(
                    "done", name, job_id, spec=spec, result=result,
                    duration_s=time.perf_counter() - t0,
                )
            )


# --- job driver -----------------------------------------------------------------------

class PartitionState(Enum):
    PENDING = "pending"
    RUNNING = "running"
    DONE = "done"
    FAILED = "failed"


@dataclass
class PartitionStatus:
    state: PartitionState = PartitionState.PENDING
    attempts: int = 0
    worker: str | None = None


@dataclass
class JobState:
    job_id: str
    round: int
    plan: PartitionPlan
    status: dict[int, PartitionStatus] = field(default_factory=dict)
    started_at: float = 0.0
    finished_at: float = 0.0

    def completed(self) -> bool:
        return all(s.state is PartitionState.DONE for s in self.status.values())


@dataclass(frozen=True)
class JobConfig:
    max_attempts: int = 3
    # None means adaptive: 10x the EWMA of completed task durations,
    # never below min_task_timeout_s.
    task_timeout_s: float | None = None
    min_task_timeout_s: float = 30.0
    timeout_factor: float = 10.0
    ewma_alpha: float = 0.3


def run_job(
    plan: PartitionPlan,
    cfg: FusionConfig,
    pool: WorkerPool,
    store: BlobStore,
    round_no: int,
    job_cfg: JobConfig = JobConfig(),
    publish: bool = True,
) -> tuple[GlobalModel, PhaseTimings, JobState]:
    """Run all map tasks with retry-based fault tolerance, then reduce.

    The driver is a single-owner state machine: it alone mutates job state,
    workers only exchange messages with it. Completion requires exactly one
    accepted result per partition; late duplicates from stragglers are
    dropped by partition-id dedup, so the reduce input (and therefore the
    output bytes) depends only on the plan.
    """
    t_start = time.perf_counter()
    job_id = uuid.uuid4().hex
    state = JobState(job_id=job_id, round=round_no, plan=plan, started_at=time.time())
    for p in plan.partitions:
        state.status[p.partition_id] = PartitionStatus()

    live = pool.live_workers()
    if not live:
        raise NoWorkers("no live workers to run the job")

    pending: list[TaskSpec] = [
        TaskSpec(p.partition_id, p.keys, cfg, attempt=1) for p in plan.partitions
    ]
    pending.reverse()  # pop() from the tail yields ascending partition order
    idle: list[str] = live.copy()
    running: dict[str, tuple[TaskSpec, float]] = {}
    results: dict[int, TaskResult] = {}
    ewma: float | None = None

    def current_timeout() -> float:
        if job_cfg.task_timeout_s is not None:
            return job_cfg.task_timeout_s
        if ewma is None:
            return job_cfg.min_task_timeout_s
        return max(job_cfg.min_task_timeout_s, job_cfg.timeout_factor * ewma)

    def bump_or_fail(spec: TaskSpec, reason: str) -> None:
        st = state.status[spec.partition_id]
        if spec.partition_id in results:
            return
        if spec.attempt >= job_cfg.max_attempts:
            st.state = PartitionState.FAILED
            raise JobFailed(spec.partition_id, spec.attempt, reason)
        st.state = PartitionState.PENDING
        pending.append(TaskSpec(spec.partition_id, spec.keys, spec.fusion, spec.attempt + 1))

    while len(results) < len(plan.partitions):
        while pending and idle:
            spec = pending.pop()
            if spec.partition_id in results:
                continue  # partition already satisfied by a late straggler result
            worker = idle.pop(0)
            st = state.status[spec.partition_id]
            st.state = PartitionState.RUNNING
            st.attempts = spec.attempt
            st.worker = worker
            running[worker] = (spec, time.perf_counter())
            pool.submit(worker, job_id, spec)

        if not running:
            if pending and not idle:
                raise NoWorkers(
                    f"all workers dead with {len(pending)} partitions outstanding"
                )
            if not pending:
                raise RuntimeError("job stalled: incomplete results with no work in flight")
            continue

        timeout = current_timeout()
        now = time.perf_counter()
        wait = min(
            (start + timeout - now for _, start in running.values()),
            default=timeout,
        )
        try:
            env = pool.events.get(timeout=max(0.01, min(wait, 0.5)))
        except queue.Empty:
            env = None

        if env is None:
            now = time.perf_counter()
            for worker, (spec, start) in list(running.items()):
                if now - start > current_timeout():
                    logger.warning(
                        "task for partition %d on %s exceeded %.1fs; reassigning",
                        spec.partition_id, worker, current_timeout(),
                    )
                    del running[worker]  # worker is a straggler; events may still arrive
                    bump_or_fail(spec, f"timeout after {current_timeout():.1f}s")
            continue

        if env.job_id != job_id:
            continue  # stale message from a previous job

        stale = env.worker not in running or running.get(env.worker, (None,))[0] is not env.spec
        if env.worker in running and running[env.worker][0] is env.spec:
            del running[env.worker]

        if env.kind == "done":
            assert env.result is not None and env.spec is not None
            if env.spec.partition_id not in results:
                results[env.spec.partition_id] = env.result
                state.status[env.spec.partition_id].state = PartitionState.DONE
                ewma = env.duration_s if ewma is None else (
                    job_cfg.ewma_alpha * env.duration_s + (1 - job_cfg.ewma_alpha) * ewma
                )
            if env.worker in pool.live_workers() and env.worker not in idle:
                idle.append(env.worker)
                idle.sort()
        elif env.kind == "task_error":
            assert env.spec is not None
            if env.worker not in idle:
                idle.append(env.worker)
                idle.sort()
            if not stale:
                bump_or_fail(env.spec, repr(env.error))
        elif env.kind == "crash":
            assert env.spec is not None
            logger.warning("worker %s crashed on partition %d", env.worker, env.spec.partition_id)
            if env.worker in idle:
                idle.remove(env.worker)
            if not pool.live_workers() and len(results) < len(plan.partitions):
                raise NoWorkers("all workers crashed")
            if not stale:
                bump_or_fail(env.spec, f"worker {env.worker} crashed")

    t_map_end = time.perf_counter()
    ordered_results = [results[p.partition_id] for p in plan.partitions]
    model = reduce_results(ordered_results, cfg, len(plan.partitions), round_no)
    t_reduce_end = time.perf_counter()
    if publish:
        publish_global(store, round_no, model)
    t_total_end = time.perf_counter()
    state.finished_at = time.time()

    # The map phase interleaves reads and accumulation across workers; split
    # its wall time by the measured proportion of each kind of work.
    map_wall = t_map_end - t_start
    read_work = sum(r.timings.read_s for r in ordered_results)
    sum_work = sum(r.timings.sum_s for r in ordered_results)
    work = read_work + sum_work
    read_frac = read_work / work if work > 0 else 0.5
    timings = PhaseTimings(
        read_partition_s=map_wall * read_frac,
        sum_s=map_wall * (1.0 - read_frac),
        reduce_s=t_reduce_end - t_map_end,
        finalize_s=t_total_end - t_reduce_end,
        total_s=t_total_end - t_start,
    )
    return model, timings, state


# --- engine facade -----------------------------------------------------------------------

class DistributedEngine:
    """Owns the worker pool and turns a round's stored updates into a model."""

    def __init__(
        self,
        store: BlobStore,
        worker_count: int,
        worker_memory_budget: int,
        target_partition_bytes: int,
        job_cfg: JobConfig = JobConfig(),
        fault_hook: FaultHook | None = None,
    ):
        self.store = store
        self.worker_count = worker_count
        self.worker_memory_budget = worker_memory_budget
        self.target_partition_bytes = target_partition_bytes
        self.job_cfg = job_cfg
        self._pool: WorkerPool | None = None
        self._fault_hook = fault_hook

    def warmup(self) -> float:
        """Start (or confirm) the worker pool; returns spin-up seconds."""
        if self.worker_count < 1:
            raise NoWorkers("distributed engine configured with zero workers")
        if self._pool is None:
            self._pool = WorkerPool(self.store, self.worker_count, self._fault_hook)
        return self._pool.start()

    @property
    def workers_live(self) -> int:
        return len(self._pool.live_workers()) if self._pool is not None else 0

    def fuse_round(
        self,
        round_no: int,
        cfg: FusionConfig,
        entries: Sequence[tuple[str, int]],
        publish: bool = True,
    ) -> tuple[GlobalModel, PhaseTimings, JobState]:
        self.warmup()
        assert self._pool is not None
        plan = make_partitions(entries, self.target_partition_bytes, self.worker_memory_budget)
        return run_job(plan, cfg, self._pool, self.store, round_no, self.job_cfg, publish)

    def shutdown(self) -> None:
        if self._pool is not None:
            self._pool.stop()
            self._pool = None
