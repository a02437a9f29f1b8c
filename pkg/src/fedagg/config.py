"""Service configuration: YAML file, environment overrides, and the factory.

Documented keys (flat unless nested below):

    memory_budget          node memory budget, bytes or "170GB"/"8GiB" style
    safety_factor          fraction of the budget usable for one round (0, 1]
    cores                  local engine parallelism
    workers                distributed worker count (0 disables the engine)
    worker_memory          per-worker memory budget
    target_partition_bytes map-task partition target
    threshold              absolute update count, or a fraction of registered
    timeout_s              collection window per round
    min_parties            minimum updates for a round to publish
    poll_interval_s        monitor poll cadence
    fusion: {algo, epsilon, summation}
    store:  {backend, root}     backend is "memory" or "localdir"

Environment variables FEDAGG_<KEY> (nested keys joined with "_", e.g.
FEDAGG_FUSION_ALGO, FEDAGG_STORE_ROOT) override file values.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .coordinator import Coordinator, Engines, RoundConfig, SubmissionMode
from .dispatch import MIB, CapacityConfig
from .engine_distributed import DistributedEngine, JobConfig
from .engine_local import LocalEngine
from .fusion import FusionAlgo, FusionConfig, Summation
from .store import BlobStore, LocalDirStore, MemoryStore

_SIZE_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*([KMGT]i?B|B)?\s*$", re.IGNORECASE)
_SIZE_UNITS = {
    "b": 1,
    "kb": 10**3, "mb": 10**6, "gb": 10**9, "tb": 10**12,
    "kib": 2**10, "mib": 2**20, "gib": 2**30, "tib": 2**40,
}


def parse_size(value: int | float | str) -> int:
    """Accept raw byte counts or human sizes like '64MiB' / '170GB'."""
    if isinstance(value, (int, float)):
        return int(value)
    m = _SIZE_RE.match(value)
    if not m:
        raise ValueError(f"cannot parse size {value!r}")
    number, unit = m.groups()
    mult = _SIZE_UNITS[(unit or "B").lower()]
    return int(float(number) * mult)


@dataclass
class StoreSettings:
    backend: str = "memory"
    root: str | None = None


@dataclass
class ServiceConfig:
    memory_budget: int = 4 * 2**30
    safety_factor: float = 0.5
    cores: int = os.cpu_count() or 1
    workers: int = 2
    worker_memory: int = 512 * MIB
    target_partition_bytes: int = 64 * MIB
    threshold: int | float = 1
    timeout_s: float = 60.0
    min_parties: int = 1
    poll_interval_s: float = 0.5
    fusion: FusionConfig = field(default_factory=FusionConfig)
    store: StoreSettings = field(default_factory=StoreSettings)
    initial_mode: SubmissionMode = SubmissionMode.DIRECT
    start_round: int = 0

    def capacity(self) -> CapacityConfig:
        return CapacityConfig(
            node_memory_budget_bytes=self.memory_budget,
            core_count=self.cores,
            safety_factor=self.safety_factor,
            distributed_available=self.workers > 0,
            worker_count=self.workers,
            worker_memory_budget_bytes=self.worker_memory,
            target_partition_bytes=self.target_partition_bytes,
        )


def _as_threshold(v) -> int | float:
    f = float(v)
    if f < 1 and f > 0:
        return f
    return int(f)


def load_config(path: str | Path | None = None, env: dict | None = None) -> ServiceConfig:
    raw: dict = {}
    if path is not None:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
    env = dict(os.environ if env is None else env)

    def pick(key: str, default, cast):
        env_key = "FEDAGG_" + key.upper().replace(".", "_")
        if env_key in env:
            return cast(env[env_key])
        node = raw
        for part in key.split("."):
            if not isinstance(node, dict) or part not in node:
                return default
            node = node[part]
        return cast(node)

    fusion = FusionConfig(
        algo=FusionAlgo.from_label(pick("fusion.algo", "fedavg", str)),
        epsilon=pick("fusion.epsilon", 1e-6, float),
        summation=Summation(pick("fusion.summation", "naive", str)),
    )
    store = StoreSettings(
        backend=pick("store.backend", "memory", str),
        root=pick("store.root", None, lambda v: None if v is None else str(v)),
    )
    if store.backend not in ("memory", "localdir"):
        raise ValueError(f"unknown store backend {store.backend!r}")
    if store.backend == "localdir" and not store.root:
        raise ValueError("store.root is required for the localdir backend")
    return ServiceConfig(
        memory_budget=pick("memory_budget", 4 * 2**30, parse_size),
        safety_factor=pick("safety_factor", 0.5, float),
        cores=pick("cores", os.cpu_count() or 1, int),
        workers=pick("workers", 2, int),
        worker_memory=pick("worker_memory", 512 * MIB, parse_size),
        target_partition_bytes=pick("target_partition_bytes", 64 * MIB, parse_size),
        threshold=pick("threshold", 1, _as_threshold),
        timeout_s=pick("timeout_s", 60.0, float),
        min_parties=pick("min_parties", 1, int),
        poll_interval_s=pick("poll_interval_s", 0.5, float),
        fusion=fusion,
        store=store,
        initial_mode=SubmissionMode(pick("initial_mode", "direct", str)),
        start_round=pick("start_round", 0, int),
    )


def build_store(cfg: ServiceConfig) -> BlobStore:
    if cfg.store.backend == "localdir":
        return LocalDirStore(cfg.store.root)
    return MemoryStore()


def build_coordinator(cfg: ServiceConfig, store: BlobStore | None = None) -> Coordinator:
    store = store if store is not None else build_store(cfg)
    capacity = cfg.capacity()
    local_cap = int(cfg.safety_factor * cfg.memory_budget)
    engines = Engines(local=LocalEngine(memory_cap_bytes=local_cap))
    if cfg.workers > 0:
        engines.distributed = DistributedEngine(
            store,
            worker_count=cfg.workers,
            worker_memory_budget=cfg.worker_memory,
            target_partition_bytes=cfg.target_partition_bytes,
            job_cfg=JobConfig(),
        )
    base = RoundConfig(
        round=cfg.start_round,
        threshold=cfg.threshold,
        timeout_s=cfg.timeout_s,
        min_parties=cfg.min_parties,
        fusion=cfg.fusion,
        submission_mode=cfg.initial_mode,
        poll_interval_s=cfg.poll_interval_s,
    )
    return Coordinator(store, capacity, engines, base, initial_mode=cfg.initial_mode)
