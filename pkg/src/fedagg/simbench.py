"""Client simulator and benchmark harness.

Exercises the service the way a deployment would, at desk scale: synthetic
parties write updates concurrently (to a blob store or over HTTP), fusion
sweeps emit one CSV row per cell with a phase-time breakdown, and the
report renders speedup/scalability tables plus plot-ready data files.

Benchmark models mirror the reference CNN sizes; a scale factor shrinks
them proportionally (default sweeps use 0.01) so full matrices run in
minutes while size *ratios*, and therefore trends, are preserved. Absolute
seconds are hardware-bound and never asserted. Every timing row is
correctness-gated: it is only emitted if the fused model matched the
sequential oracle for that cell.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import codec
from .dispatch import NOMINAL_CLIENT_ID, estimate_update_size
from .engine_distributed import DistributedEngine, JobConfig
from .engine_local import fuse_local
from .errors import MalformedCsv, TargetUnavailable
from .fusion import FusionConfig, max_relative_difference, sequential_fuse
from .model import Dtype, LayerSpec, ModelSchema, ModelUpdate, synth_update
from .store import BlobStore, MemoryStore, count_updates, put_update

logger = logging.getLogger(__name__)

# Benchmark model sizes (MiB of encoded weights).
MODEL_SIZES_MIB = {
    "cnn4.6": 4.6,
    "cnn73": 73.0,
    "cnn179": 179.0,
    "cnn239": 239.0,
    "cnn478": 478.0,
    "cnn717": 717.0,
    "cnn956": 956.0,
    "resnetlike": 91.0,
    "vgglike": 528.0,
}

# Relative parameter-count split across the generated layers; dense layers
# dominate, mirroring how the benchmark CNNs distribute their weights.
_LAYER_FRACTIONS = (
    ("conv1/kernel", 0.004),
    ("conv1/bias", 0.001),
    ("conv2/kernel", 0.045),
    ("conv2/bias", 0.002),
    ("conv3/kernel", 0.108),
    ("dense1/kernel", 0.46),
    ("dense1/bias", 0.01),
    ("dense2/kernel", 0.3),
    ("head/kernel", 0.07),
)


@dataclass(frozen=True)
class ModelSpec:
    name: str
    scale: float = 1.0
    dtype: Dtype = Dtype.F32
    size_mib: float | None = None  # set for custom models not in the table

    def __post_init__(self):
        if not 0 < self.scale <= 1:
            raise ValueError("scale must be in (0, 1]")
        if self.size_mib is None and self.name not in MODEL_SIZES_MIB:
            raise ValueError(
                f"unknown model {self.name!r}; pick one of {sorted(MODEL_SIZES_MIB)} "
                "or provide size_mib"
            )

    @property
    def target_bytes(self) -> int:
        mib = self.size_mib if self.size_mib is not None else MODEL_SIZES_MIB[self.name]
        return int(mib * 2**20 * self.scale)


def build_schema(spec: ModelSpec) -> ModelSchema:
    """Schema whose encoded update size lands within 2% of the scaled target."""
    overhead = 4 + 2 + 2 + 2 + len(NOMINAL_CLIENT_ID) + 8 + 8 + 4 + 4
    for name, _ in _LAYER_FRACTIONS:
        overhead += 2 + len(name) + 1 + 1 + 8  # per-layer framing, rank 1
    params_total = max(len(_LAYER_FRACTIONS), (spec.target_bytes - overhead) // spec.dtype.width)
    layers = []
    assigned = 0
    for name, frac in _LAYER_FRACTIONS[:-1]:
        n = max(1, int(params_total * frac))
        layers.append(LayerSpec(name, spec.dtype, (n,)))
        assigned += n
    last_name = _LAYER_FRACTIONS[-1][0]
    layers.append(LayerSpec(last_name, spec.dtype, (max(1, params_total - assigned),)))
    return ModelSchema(tuple(layers))


def _draw_sample_counts(distribution: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """Named sample-count distribution: 'uniform:lo:hi' or 'constant:k'."""
    kind, _, args = distribution.partition(":")
    if kind == "uniform":
        lo, hi = (int(x) for x in args.split(":"))
        return rng.integers(lo, hi + 1, size=n)
    if kind == "constant":
        return np.full(n, int(args), dtype=np.int64)
    raise ValueError(f"unknown count distribution {distribution!r}")


def synth_parties(
    n: int, schema: ModelSchema, seed: int = 0, round_no: int = 0,
    count_distribution: str = "uniform:1:100",
    client_ids: list[str] | None = None,
) -> list[ModelUpdate]:
    rng = np.random.default_rng(seed)
    counts = _draw_sample_counts(count_distribution, n, rng)
    ids = client_ids if client_ids is not None else [f"sim{i:05d}" for i in range(n)]
    return [
        synth_update(seed + i, schema, ids[i], round_no, sample_count=int(counts[i]))
        for i in range(n)
    ]


# --- client simulation ------------------------------------------------------------

@dataclass
class WriteStats:
    committed: int
    failures: list[tuple[str, str]]
    write_times_s: list[float]

    @property
    def avg_write_s(self) -> float:
        return statistics.fmean(self.write_times_s) if self.write_times_s else 0.0

    def percentile(self, q: float) -> float:
        if not self.write_times_s:
            return 0.0
        ordered = sorted(self.write_times_s)
        idx = min(len(ordered) - 1, math.ceil(q / 100 * len(ordered)) - 1)
        return ordered[max(0, idx)]

    def summary(self) -> dict:
        t = self.write_times_s
        return {
            "committed": self.committed,
            "failed": len(self.failures),
            "avg_write_s": self.avg_write_s,
            "min_write_s": min(t) if t else 0.0,
            "max_write_s": max(t) if t else 0.0,
            "p50_write_s": self.percentile(50),
            "p95_write_s": self.percentile(95),
        }


def _probe_target(target: BlobStore | str) -> None:
    if isinstance(target, str):
        import httpx

        try:
            resp = httpx.get(target.rstrip("/") + "/v1/health", timeout=5.0)
            resp.raise_for_status()
        except Exception as e:
            raise TargetUnavailable(f"cannot reach {target}: {e}") from e
    else:
        try:
            count_updates(target, 0)
        except Exception as e:
            raise TargetUnavailable(f"store probe failed: {e}") from e


def simulate_clients(
    n: int,
    spec: ModelSpec,
    target: BlobStore | str,
    concurrency: int = 16,
    seed: int = 0,
    round_no: int = 0,
    count_distribution: str = "uniform:1:100",
    client_ids: list[str] | None = None,
) -> WriteStats:
    """Concurrently submit n synthetic updates; measures encode+commit time.

    `target` is either a blob store (writes go through put_update) or a
    coordinator base URL (writes POST to /v1/updates/{round}). Individual
    failures are reported, not raised, so a duplicate or rejected client
    does not sink the simulation.
    """
    _probe_target(target)
    schema = build_schema(spec)
    updates = synth_parties(n, schema, seed, round_no, count_distribution, client_ids)

    if isinstance(target, str):
        import httpx

        base = target.rstrip("/")
        client = httpx.Client(timeout=60.0)

        def write(u: ModelUpdate) -> float:
            t0 = time.perf_counter()
            body = codec.encode_update(u)
            resp = client.post(f"{base}/v1/updates/{round_no}", content=body)
            if resp.status_code != 201:
                raise RuntimeError(f"HTTP {resp.status_code}: {resp.text}")
            return time.perf_counter() - t0
    else:

        def write(u: ModelUpdate) -> float:
            t0 = time.perf_counter()
            put_update(target, round_no, u.client_id, codec.encode_update(u))
            return time.perf_counter() - t0

    times: list[float] = []
    failures: list[tuple[str, str]] = []

    def task(u: ModelUpdate):
        try:
            return u.client_id, write(u), None
        except Exception as e:
            return u.client_id, None, f"{type(e).__name__}: {e}"

    with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
        for cid, dt, err in pool.map(task, updates):
            if err is None:
                times.append(dt)
            else:
                failures.append((cid, err))
    if isinstance(target, str):
        client.close()
    return WriteStats(committed=len(times), failures=failures, write_times_s=times)


# --- fusion benchmark ----------------------------------------------------------------

BENCH_ENGINES = ("local", "local-seq", "distributed")


@dataclass(frozen=True)
class BenchRow:
    model_size_bytes: int
    parties: int
    engine: str
    read_partition_s: float
    sum_s: float
    reduce_s: float
    total_s: float
    peak_mem_bytes: int
    avg_write_s: float
    error: str = ""


CSV_HEADER = [f.name for f in fields(BenchRow)]


@dataclass
class BenchSettings:
    cores: int = os.cpu_count() or 1
    workers: int = 2
    worker_memory: int = 512 * 2**20
    target_partition_bytes: int = 4 * 2**20
    fusion: FusionConfig = field(default_factory=FusionConfig)
    seed: int = 0
    oracle_tolerance: float = 1e-12


def _bench_cell(
    schema: ModelSchema,
    updates: list[ModelUpdate],
    oracle,
    engine: str,
    settings: BenchSettings,
) -> BenchRow:
    size = estimate_update_size(schema)
    parties = len(updates)
    schema_f64 = schema.element_count * 8
    input_bytes = size * parties
    avg_write = 0.0
    t0 = time.perf_counter()
    if engine in ("local", "local-seq"):
        chunks = settings.cores if engine == "local" else 1
        model, timings = fuse_local(updates, settings.fusion, chunk_count=chunks)
        peak = input_bytes + min(chunks, parties) * schema_f64 * 2
    elif engine == "distributed":
        store = MemoryStore()
        write_times = []
        for u in updates:
            w0 = time.perf_counter()
            put_update(store, u.round, u.client_id, codec.encode_update(u))
            write_times.append(time.perf_counter() - w0)
        avg_write = statistics.fmean(write_times)
        entries = store.list(f"rounds/{updates[0].round}/updates/")
        dist = DistributedEngine(
            store,
            worker_count=settings.workers,
            worker_memory_budget=settings.worker_memory,
            target_partition_bytes=settings.target_partition_bytes,
            job_cfg=JobConfig(task_timeout_s=300.0),
        )
        try:
            model, timings, _ = dist.fuse_round(
                updates[0].round, settings.fusion, entries, publish=False
            )
        finally:
            dist.shutdown()
        max_part = min(input_bytes, settings.target_partition_bytes + size)
        peak = settings.workers * (max_part + schema_f64 * 2)
    else:
        raise ValueError(f"unknown engine {engine!r} (expected one of {BENCH_ENGINES})")
    total = time.perf_counter() - t0

    deviation = max_relative_difference(model, oracle)
    if deviation > settings.oracle_tolerance:
        return BenchRow(size, parties, engine, 0, 0, 0, 0, 0, 0,
                        error=f"oracle mismatch: rel diff {deviation:.3e}")
    return BenchRow(
        model_size_bytes=size,
        parties=parties,
        engine=engine,
        read_partition_s=timings.read_partition_s,
        sum_s=timings.sum_s,
        reduce_s=timings.reduce_s + timings.finalize_s,
        total_s=total,
        peak_mem_bytes=peak,
        avg_write_s=avg_write,
        error="",
    )


def bench_fusion(
    specs: list[ModelSpec],
    party_counts: list[int],
    engines: list[str],
    reps: int,
    out_csv: str | Path,
    settings: BenchSettings | None = None,
) -> list[BenchRow]:
    """Sweep the matrix, correctness-gate each cell, write one row per rep."""
    settings = settings or BenchSettings()
    rows: list[BenchRow] = []
    for spec in specs:
        schema = build_schema(spec)
        size = estimate_update_size(schema)
        for parties in party_counts:
            updates = synth_parties(parties, schema, seed=settings.seed)
            oracle = sequential_fuse(updates, settings.fusion)
            for engine in engines:
                for rep in range(reps):
                    try:
                        row = _bench_cell(schema, updates, oracle, engine, settings)
                    except Exception as e:
                        logger.exception("bench cell failed: %s/%s/%s", spec.name, parties, engine)
                        row = BenchRow(size, parties, engine, 0, 0, 0, 0, 0, 0,
                                       error=f"{type(e).__name__}: {e}")
                    rows.append(row)
    write_csv(rows, out_csv)
    return rows


def write_csv(rows: list[BenchRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in rows:
            writer.writerow([getattr(r, name) for name in CSV_HEADER])


def read_csv(path: str | Path) -> list[BenchRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise MalformedCsv(1, f"bad header {header}")
        for line_no, rec in enumerate(reader, start=2):
            if len(rec) != len(CSV_HEADER):
                raise MalformedCsv(line_no, f"expected {len(CSV_HEADER)} fields, got {len(rec)}")
            try:
                rows.append(
                    BenchRow(
                        model_size_bytes=int(rec[0]),
                        parties=int(rec[1]),
                        engine=rec[2],
                        read_partition_s=float(rec[3]),
                        sum_s=float(rec[4]),
                        reduce_s=float(rec[5]),
                        total_s=float(rec[6]),
                        peak_mem_bytes=int(rec[7]),
                        avg_write_s=float(rec[8]),
                        error=rec[9],
                    )
                )
            except ValueError as e:
                raise MalformedCsv(line_no, str(e)) from None
    return rows


# --- report -------------------------------------------------------------------------------

SPEEDUP_BAR = 1.25  # flagged (not failed) below this local vs local-seq ratio


@dataclass
class Report:
    speedups: list[dict]
    max_parties: dict[tuple[int, str], int]
    scalability: list[dict]
    errors: list[BenchRow]

    def text(self) -> str:
        lines = ["== speedup (local vs local-seq) =="]
        if not self.speedups:
            lines.append("  (no paired rows)")
        for s in self.speedups:
            flag = "" if s["speedup"] >= SPEEDUP_BAR else "  [FLAG: below 25% reduction bar]"
            lines.append(
                f"  model={s['model_size_bytes']} parties={s['parties']}: "
                f"{s['speedup']:.2f}x{flag}"
            )
        lines.append("== max supported parties per engine ==")
        for (size, engine), parties in sorted(self.max_parties.items()):
            lines.append(f"  model={size} engine={engine}: {parties}")
        lines.append("== scalability (distributed vs local max parties) ==")
        if not self.scalability:
            lines.append("  (insufficient data)")
        for s in self.scalability:
            lines.append(
                f"  model={s['model_size_bytes']}: {s['ratio']:.1f}x "
                f"({s['distributed']} vs {s['local']})"
            )
        if self.errors:
            lines.append("== errors ==")
            for r in self.errors:
                lines.append(f"  model={r.model_size_bytes} parties={r.parties} "
                             f"engine={r.engine}: {r.error}")
        return "\n".join(lines)


def report(csv_path: str | Path, out_dir: str | Path | None = None) -> Report:
    rows = read_csv(csv_path)
    ok = [r for r in rows if not r.error]
    errors = [r for r in rows if r.error]

    def med_total(rs: list[BenchRow]) -> float:
        return statistics.median(r.total_s for r in rs)

    cells: dict[tuple[int, int, str], list[BenchRow]] = {}
    for r in ok:
        cells.setdefault((r.model_size_bytes, r.parties, r.engine), []).append(r)

    speedups = []
    for (size, parties, engine), rs in sorted(cells.items()):
        if engine != "local":
            continue
        seq = cells.get((size, parties, "local-seq"))
        if seq:
            s = med_total(seq) / max(med_total(rs), 1e-12)
            speedups.append({"model_size_bytes": size, "parties": parties, "speedup": s})

    max_parties: dict[tuple[int, str], int] = {}
    for (size, parties, engine), _ in cells.items():
        key = (size, engine)
        max_parties[key] = max(max_parties.get(key, 0), parties)

    scalability = []
    for size in sorted({s for s, _ in max_parties}):
        local = max(
            max_parties.get((size, "local"), 0), max_parties.get((size, "local-seq"), 0)
        )
        dist = max_parties.get((size, "distributed"), 0)
        if local and dist:
            scalability.append(
                {"model_size_bytes": size, "local": local, "distributed": dist,
                 "ratio": dist / local}
            )

    rep = Report(speedups=speedups, max_parties=max_parties,
                 scalability=scalability, errors=errors)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "phases.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model_size_bytes", "parties", "engine",
                        "read_partition_s", "sum_s", "reduce_s", "total_s"])
            for (size, parties, engine), rs in sorted(cells.items()):
                w.writerow([
                    size, parties, engine,
                    statistics.median(r.read_partition_s for r in rs),
                    statistics.median(r.sum_s for r in rs),
                    statistics.median(r.reduce_s for r in rs),
                    med_total(rs),
                ])
        with open(out / "scalability.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model_size_bytes", "local_max_parties",
                        "distributed_max_parties", "ratio"])
            for s in scalability:
                w.writerow([s["model_size_bytes"], s["local"], s["distributed"],
                            f"{s['ratio']:.3f}"])
    return rep


# --- end-to-end simulation -----------------------------------------------------------------

def run_end_to_end(
    parties: int,
    spec: ModelSpec,
    store: BlobStore,
    out_csv: str | Path | None = None,
    seed: int = 0,
    concurrency: int = 16,
    timeout_s: float = 60.0,
) -> tuple[BenchRow, WriteStats]:
    """Store-mode round driven end to end: simulate writers, monitor, fuse, publish.

    The published model is verified against the sequential oracle before the
    timing row is emitted.
    """
    import threading

    from .coordinator import Coordinator, Engines, RoundConfig, SubmissionMode
    from .dispatch import CapacityConfig
    from .engine_local import LocalEngine
    from .store import fetch_global

    schema = build_schema(spec)
    size = estimate_update_size(schema)
    capacity = CapacityConfig(
        node_memory_budget_bytes=max(4 * size * parties, 64 * 2**20),
        core_count=os.cpu_count() or 1,
        worker_count=2,
        worker_memory_budget_bytes=max(2 * size * parties, 64 * 2**20),
        target_partition_bytes=max(size * parties // 4, size),
    )
    engines = Engines(
        local=LocalEngine(),
        distributed=DistributedEngine(
            store, worker_count=2,
            worker_memory_budget=capacity.worker_memory_budget_bytes,
            target_partition_bytes=capacity.target_partition_bytes,
            job_cfg=JobConfig(task_timeout_s=300.0),
        ),
    )
    coord = Coordinator(
        store, capacity, engines,
        RoundConfig(round=0, threshold=parties, timeout_s=timeout_s,
                    poll_interval_s=0.05, submission_mode=SubmissionMode.STORE),
        initial_mode=SubmissionMode.STORE,
    )
    t_start = time.perf_counter()
    box = {}
    runner = threading.Thread(target=lambda: box.setdefault("result", coord.step_round()))
    runner.start()
    try:
        stats = simulate_clients(parties, spec, store, concurrency=concurrency, seed=seed)
        runner.join(timeout=timeout_s + 60)
    finally:
        coord.shutdown()
    if runner.is_alive() or box.get("result") is None:
        raise RuntimeError("end-to-end round did not publish")
    total = time.perf_counter() - t_start
    result = box["result"]

    oracle = sequential_fuse(synth_parties(parties, schema, seed), FusionConfig(), result.model.round)
    published = fetch_global(store, result.model.round)
    deviation = max_relative_difference(published, oracle)
    if deviation > 1e-12:
        raise RuntimeError(f"published model deviates from oracle: {deviation:.3e}")

    t = result.timings
    row = BenchRow(
        model_size_bytes=size,
        parties=parties,
        engine=result.engine,
        read_partition_s=t.read_partition_s,
        sum_s=t.sum_s,
        reduce_s=t.reduce_s + t.finalize_s,
        total_s=total,
        peak_mem_bytes=size * parties + schema.element_count * 16,
        avg_write_s=stats.avg_write_s,
    )
    if out_csv is not None:
        write_csv([row], out_csv)
    return row, stats
