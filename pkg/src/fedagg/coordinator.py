"""Round lifecycle: collect updates, monitor the threshold/timeout, fuse, publish.

One coordinator owns the round state. Clients either POST updates directly
into an in-memory inbox (Direct mode) or write blobs to the shared store
(Store mode); the inbox implements the same count/list contract as the
store, so a single monitor loop serves both. When the predicted next-round
load crosses the capacity boundary, the coordinator preemptively advertises
Store mode for round R+1; a hysteresis guard keeps the mode from flapping
when registration oscillates around the boundary.
"""

from __future__ import annotations

import json
import logging
import math
import threading
import time
from dataclasses import dataclass, field, replace
from enum import Enum

from . import codec
from .dispatch import (
    CapacityConfig,
    LocalPlan,
    WorkloadClass,
    WorkloadDescriptor,
    classify,
    estimate_update_size,
)
from .dispatch import plan as dispatch_plan
from .engine_distributed import DistributedEngine
from .engine_local import LocalEngine, PhaseTimings
from .errors import (
    CapacityExceeded,
    CodecError,
    DuplicateKey,
    InsufficientParties,
    NotYetPublished,
    RoundClosed,
    SchemaMismatch,
    StoreUnavailable,
    ValidationFailed,
    WrongMode,
)
from .fusion import FusionConfig
from .model import GlobalModel, ModelSchema, check_compatible, schema_of
from .store import (
    BlobStore,
    MemoryStore,
    RoundPaths,
    count_updates,
    fetch_global_bytes,
    list_update_keys,
    publish_global,
    put_update,
)

logger = logging.getLogger(__name__)


class SubmissionMode(Enum):
    DIRECT = "direct"
    STORE = "store"


class RoundStatus(Enum):
    COLLECTING = "collecting"
    FUSING = "fusing"
    PUBLISHED = "published"
    FAILED = "failed"


@dataclass
class RoundConfig:
    round: int
    threshold: int | float  # absolute count, or fraction of registered in (0, 1]
    timeout_s: float
    min_parties: int = 1
    fusion: FusionConfig = field(default_factory=FusionConfig)
    submission_mode: SubmissionMode = SubmissionMode.DIRECT
    poll_interval_s: float = 0.05

    def __post_init__(self):
        if self.round < 0:
            raise ValueError("round must be non-negative")
        if self.min_parties < 1:
            raise ValueError("min_parties must be >= 1")
        if self.timeout_s <= self.poll_interval_s:
            raise ValueError("timeout_s must exceed poll_interval_s")
        if isinstance(self.threshold, bool) or (
            isinstance(self.threshold, int) and self.threshold < self.min_parties
        ):
            raise ValueError("absolute threshold must be an int >= min_parties")
        if isinstance(self.threshold, float) and not 0 < self.threshold <= 1:
            raise ValueError("fractional threshold must be in (0, 1]")

    def effective_threshold(self, registered: int | None = None) -> int:
        if isinstance(self.threshold, int):
            return self.threshold
        if registered is None:
            raise ValueError("fractional threshold needs the registered client count")
        return max(self.min_parties, math.ceil(self.threshold * registered))


@dataclass
class RoundState:
    received: int = 0
    registered: int = 0
    status: RoundStatus = RoundStatus.COLLECTING
    mode_next: SubmissionMode = SubmissionMode.DIRECT
    small_streak: int = 0  # consecutive Small predictions; drives hysteresis


@dataclass(frozen=True)
class MonitorOutcome:
    triggered: bool
    count: int


def monitor(collector: BlobStore, cfg: RoundConfig, registered: int | None = None) -> MonitorOutcome:
    """Poll the update count until the threshold is met or the timeout passes.

    Store hiccups are retried at the poll cadence; only a store that never
    answered within the whole window raises StoreUnavailable.
    """
    threshold = cfg.effective_threshold(registered)
    start = time.monotonic()
    deadline = start + cfg.timeout_s
    last_count: int | None = None
    last_error: StoreUnavailable | None = None
    while True:
        try:
            last_count = count_updates(collector, cfg.round)
            last_error = None
        except StoreUnavailable as e:
            last_error = e
            logger.warning("monitor: store unavailable (%s); retrying", e)
        if last_count is not None and last_count >= threshold:
            return MonitorOutcome(triggered=True, count=last_count)
        now = time.monotonic()
        if now >= deadline:
            if last_count is None:
                raise last_error or StoreUnavailable("no successful count before timeout")
            return MonitorOutcome(triggered=False, count=last_count)
        time.sleep(min(cfg.poll_interval_s, deadline - now))


@dataclass
class Engines:
    local: LocalEngine
    distributed: DistributedEngine | None = None


@dataclass
class RoundResult:
    round: int
    outcome: MonitorOutcome
    engine: str
    snapshot: tuple[str, ...]
    model: GlobalModel
    timings: PhaseTimings
    schema: ModelSchema  # the input-update schema, not the (possibly recast) output's


def run_round(
    cfg: RoundConfig,
    capacity: CapacityConfig,
    store: BlobStore,
    engines: Engines,
    collector: BlobStore | None = None,
    registered: int | None = None,
    on_snapshot=None,
) -> RoundResult:
    """Execute one round: monitor, snapshot, classify, fuse, publish.

    The fused multiset is exactly the committed set at trigger time; updates
    landing later stay out of this round. `on_snapshot` is a test hook
    invoked right after the snapshot is taken.
    """
    src = collector if collector is not None else store
    outcome = monitor(src, cfg, registered)
    if outcome.count < cfg.min_parties:
        raise InsufficientParties(outcome.count, cfg.min_parties)

    snapshot = list_update_keys(src, cfg.round)
    if on_snapshot is not None:
        on_snapshot(tuple(k for k, _ in snapshot))

    w_s = max(size for _, size in snapshot)
    workload = WorkloadDescriptor(update_size_bytes=w_s, party_count=len(snapshot))
    engine_plan = dispatch_plan(workload, capacity)

    if isinstance(engine_plan, LocalPlan):
        updates = [codec.decode_update(src.get(key)) for key, _ in snapshot]
        input_schema = schema_of(updates[0])
        model, timings = engines.local.fuse(updates, cfg.fusion, engine_plan, cfg.round)
        publish_global(store, cfg.round, model)
        engine_name = "local"
    else:
        if engines.distributed is None:
            raise CapacityExceeded("workload is Large but no distributed engine is configured")
        if src is not store:
            # Direct-mode collection that outgrew the node: stage blobs into
            # the shared store so workers can read them.
            for key, _ in snapshot:
                if not store.exists(key):
                    store.put_atomic(key, src.get(key))
        input_schema = schema_of(codec.decode_update(src.get(snapshot[0][0])))
        model, timings, _ = engines.distributed.fuse_round(
            cfg.round, cfg.fusion, snapshot, publish=True
        )
        engine_name = "distributed"

    return RoundResult(
        round=cfg.round,
        outcome=outcome,
        engine=engine_name,
        snapshot=tuple(k for k, _ in snapshot),
        model=model,
        timings=timings,
        schema=input_schema,
    )


def decide_next_mode(
    state: RoundState, capacity: CapacityConfig, schema: ModelSchema | None
) -> SubmissionMode:
    """Predict round R+1's load and pick its submission mode, with hysteresis.

    Large predictions switch to Store immediately; switching back to Direct
    requires two consecutive Small predictions, so oscillating registration
    flips the mode at most once per two rounds. Mutates state.mode_next and
    state.small_streak.
    """
    if schema is None:
        return state.mode_next
    predicted = classify(
        WorkloadDescriptor(
            update_size_bytes=estimate_update_size(schema),
            party_count=max(1, state.registered),
        ),
        capacity,
    )
    if predicted is WorkloadClass.LARGE:
        state.small_streak = 0
        state.mode_next = SubmissionMode.STORE
    else:
        state.small_streak += 1
        if state.mode_next is SubmissionMode.STORE and state.small_streak >= 2:
            state.mode_next = SubmissionMode.DIRECT
    return state.mode_next


def warmup_distributed(engines: Engines) -> float:
    """Spin up (or confirm) the worker pool; returns the spin-up seconds."""
    from .errors import NoWorkers

    if engines.distributed is None:
        raise NoWorkers("no distributed engine configured")
    return engines.distributed.warmup()


class Coordinator:
    """Owns the round sequence and serves submissions/snapshots to handlers.

    step_round() runs one full collect->fuse->publish cycle on the calling
    thread (the serve loop runs it forever); submit() and the read-side
    accessors are safe to call concurrently from HTTP handlers.
    """

    def __init__(
        self,
        store: BlobStore,
        capacity: CapacityConfig,
        engines: Engines,
        base_config: RoundConfig,
        initial_mode: SubmissionMode = SubmissionMode.DIRECT,
    ):
        self.store = store
        self.capacity = capacity
        self.engines = engines
        self.base_config = base_config
        self.inbox = MemoryStore()
        self.state = RoundState(mode_next=initial_mode)
        self.schema: ModelSchema | None = None
        self.current_round = base_config.round
        self.results: dict[int, RoundResult] = {}
        self.failures: dict[int, str] = {}
        self._model_cache: dict[int, bytes] = {}
        self._known_clients: set[str] = set()
        self._manual_registered = 0
        self._round_mode: dict[int, SubmissionMode] = {}
        self._lock = threading.Lock()

    # --- registration ----------------------------------------------------------

    def register_client(self, client_id: str) -> None:
        with self._lock:
            self._known_clients.add(client_id)
            self.state.registered = self._registered_locked()

    def set_registered(self, n: int) -> None:
        with self._lock:
            self._manual_registered = n
            self.state.registered = self._registered_locked()

    def _registered_locked(self) -> int:
        return max(self._manual_registered, len(self._known_clients))

    @property
    def registered(self) -> int:
        with self._lock:
            return self._registered_locked()

    # --- round lifecycle ----------------------------------------------------------

    def round_config(self, round_no: int) -> RoundConfig:
        return replace(
            self.base_config,
            round=round_no,
            submission_mode=self._round_mode.get(round_no, self.state.mode_next),
        )

    def open_round(self) -> RoundConfig:
        """Freeze the round's mode and advertise it in the manifest."""
        with self._lock:
            round_no = self.current_round
            mode = self._round_mode.setdefault(round_no, self.state.mode_next)
            self.state.status = RoundStatus.COLLECTING
            self.state.received = 0
        cfg = self.round_config(round_no)
        manifest = {
            "round": round_no,
            "threshold": cfg.threshold,
            "timeout_s": cfg.timeout_s,
            "fusion_algo": cfg.fusion.algo.label,
            "epsilon": cfg.fusion.epsilon,
            "submission_mode": mode.value,
            "schema_digest": self.schema.digest() if self.schema else None,
        }
        key = RoundPaths(round_no).manifest_key
        try:
            self.store.put_atomic(key, json.dumps(manifest, sort_keys=True).encode())
        except DuplicateKey:
            pass  # reopening after a restart; the advertised manifest stands
        return cfg

    def step_round(self, on_snapshot=None) -> RoundResult | None:
        """One full round; returns the result, or None when the round failed."""
        cfg = self.open_round()
        collector = self.inbox if cfg.submission_mode is SubmissionMode.DIRECT else self.store
        try:
            with self._lock:
                registered = self._registered_locked()
            result = run_round(
                cfg,
                self.capacity,
                self.store,
                self.engines,
                collector=collector,
                registered=registered,
                on_snapshot=self._wrap_snapshot_hook(on_snapshot),
            )
        except InsufficientParties as e:
            logger.warning("round %d failed: %s", cfg.round, e)
            with self._lock:
                self.state.status = RoundStatus.FAILED
                self.failures[cfg.round] = str(e)
                self._advance_locked(cfg.round)
            return None
        with self._lock:
            self.state.status = RoundStatus.PUBLISHED
            self.state.received = result.outcome.count
            self.results[cfg.round] = result
            self._model_cache[cfg.round] = codec.encode_global(result.model)
            if self.schema is None:
                self.schema = result.schema
            self._advance_locked(cfg.round)
        return result

    def _wrap_snapshot_hook(self, user_hook):
        def hook(keys):
            with self._lock:
                self.state.status = RoundStatus.FUSING
                self.state.received = len(keys)
            if user_hook is not None:
                user_hook(keys)

        return hook

    def _advance_locked(self, finished_round: int) -> None:
        self.state.registered = self._registered_locked()
        decide_next_mode(self.state, self.capacity, self.schema)
        self.current_round = finished_round + 1

    def run_forever(self, stop: threading.Event) -> None:
        while not stop.is_set():
            try:
                self.step_round()
            except Exception:
                logger.exception("round %d crashed; continuing", self.current_round)
                with self._lock:
                    self.failures[self.current_round] = "internal error"
                    self._advance_locked(self.current_round)

    # --- submission path ---------------------------------------------------------------

    def submit(self, round_no: int, data: bytes) -> None:
        """Direct-mode upload: validate, then commit to the round's inbox."""
        with self._lock:
            current = self.current_round
            status = self.state.status
            mode = self._round_mode.get(round_no)
        if round_no != current or status is not RoundStatus.COLLECTING:
            raise RoundClosed(f"round {round_no} is not collecting; submit for round {current}")
        if mode is SubmissionMode.STORE:
            raise WrongMode(
                f"round {round_no} runs in store mode; write to the shared store instead"
            )
        try:
            u = codec.decode_update(data)
        except CodecError as e:
            raise ValidationFailed(f"update does not decode: {e}") from e
        if self.schema is not None:
            try:
                check_compatible(self.schema, schema_of(u))
            except SchemaMismatch as e:
                raise ValidationFailed(f"update schema differs from the round's: {e}") from e
        put_update(self.inbox, round_no, u.client_id, data)
        self.register_client(u.client_id)

    # --- read side ------------------------------------------------------------------------

    def round_info(self) -> dict:
        with self._lock:
            round_no = self.current_round
            mode = self._round_mode.get(round_no, self.state.mode_next)
            registered = self._registered_locked()
        cfg = self.base_config
        try:
            threshold = replace(cfg, round=round_no).effective_threshold(registered)
        except ValueError:
            threshold = cfg.threshold
        store_root = getattr(self.store, "root", None)
        return {
            "round": round_no,
            "submission_mode": mode.value,
            "threshold": threshold,
            "timeout_s": cfg.timeout_s,
            "schema_digest": self.schema.digest() if self.schema else None,
            "store_hint": str(store_root) if store_root is not None else "memory",
        }

    def model_bytes(self, round_no: int) -> bytes:
        with self._lock:
            cached = self._model_cache.get(round_no)
        if cached is not None:
            return cached
        return fetch_global_bytes(self.store, round_no)

    def metrics(self, round_no: int) -> dict:
        with self._lock:
            result = self.results.get(round_no)
            failure = self.failures.get(round_no)
        if result is None:
            if failure is not None:
                return {"round": round_no, "status": "failed", "reason": failure}
            raise NotYetPublished(round_no)
        t = result.timings
        return {
            "round": round_no,
            "status": "published",
            "engine": result.engine,
            "received": result.outcome.count,
            "fused": len(result.snapshot),
            "triggered": result.outcome.triggered,
            "read_partition_s": t.read_partition_s,
            "sum_s": t.sum_s,
            "reduce_s": t.reduce_s,
            "finalize_s": t.finalize_s,
            "total_s": t.total_s,
        }

    def health(self) -> dict:
        try:
            self.store.list("rounds/")
            store_ok = True
        except Exception:
            store_ok = False
        workers = (
            self.engines.distributed.workers_live if self.engines.distributed is not None else 0
        )
        return {
            "status": "ok" if store_ok else "degraded",
            "workers_live": workers,
            "store_ok": store_ok,
        }

    def shutdown(self) -> None:
        if self.engines.distributed is not None:
            self.engines.distributed.shutdown()
