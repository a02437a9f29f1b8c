"""Acceptance suite: one test per release criterion, one pass/fail line each.

Run with `pytest tests/test_acceptance.py -v -s`. Criteria pin correctness
and behavior (tolerances, exact boundaries, fault semantics); the one
throughput-style criterion (parallel speedup) is reported and flagged, not
gated, since it depends on the host's core count.
"""

import functools
import json
import threading
import time

import numpy as np
import pytest

from fedagg import codec
from fedagg.coordinator import (
    Coordinator,
    Engines,
    MonitorOutcome,
    RoundConfig,
    monitor,
    run_round,
)
from fedagg.dispatch import (
    CapacityConfig,
    WorkloadClass,
    WorkloadDescriptor,
    classify,
    estimate_update_size,
)
from fedagg.engine_distributed import (
    DistributedEngine,
    JobConfig,
    Partition,
    PartitionPlan,
    TaskSpec,
    WorkerCrashed,
    WorkerPool,
    make_partitions,
    run_job,
    run_map_task,
)
from fedagg.engine_local import LocalEngine, fuse_local
from fedagg.errors import JobFailed, MemoryCapExceeded, WrongMode
from fedagg.fusion import (
    FusionAlgo,
    FusionConfig,
    decode_partial,
    finalize,
    max_relative_difference,
    partial_accumulate,
    partial_new,
    sequential_fuse,
)
from fedagg.model import Dtype, LayerSpec, ModelSchema, ModelUpdate, LayerTensor, schema_of, synth_update
from fedagg.server import create_app
from fedagg.simbench import (
    BenchRow,
    ModelSpec,
    build_schema,
    report,
    run_end_to_end,
    simulate_clients,
    synth_parties,
    write_csv,
)
from fedagg.store import (
    LocalDirStore,
    MemoryStore,
    StoreHooks,
    count_updates,
    fetch_global,
    list_update_keys,
    put_update,
)

TOLERANCE = 1e-12


def criterion(n, label):
    """Print the [PASS]/[FAIL] line the acceptance gate requires."""

    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"\n[FAIL] criterion {n}: {label}", flush=True)
                raise
            print(f"\n[PASS] criterion {n}: {label}", flush=True)

        return run

    return wrap


def contiguous_plan(entries, partition_count):
    """Split sorted keys into exactly `partition_count` contiguous partitions."""
    keys = [k for k, _ in entries]
    sizes = dict(entries)
    bounds = np.array_split(np.arange(len(keys)), partition_count)
    parts = []
    for pid, idx in enumerate(bounds):
        ks = tuple(keys[i] for i in idx)
        parts.append(Partition(pid, ks, sum(sizes[k] for k in ks)))
    return PartitionPlan(tuple(parts))


@criterion(1, "oracle equivalence across engines, chunkings and partitionings")
def test_criterion_1_oracle_equivalence():
    t_start = time.perf_counter()
    # 10 layers x ~1e4 F32 params, 100 seeded parties, n_i in 1..100
    schema = ModelSchema(tuple(LayerSpec(f"block{i}/w", Dtype.F32, (10_000,)) for i in range(10)))
    updates = synth_parties(100, schema, seed=7)
    assert all(1 <= u.sample_count <= 100 for u in updates)
    expected_count_sum = sum(u.sample_count for u in updates)

    store = MemoryStore()
    for u in updates:
        put_update(store, 0, u.client_id, codec.encode_update(u))
    entries = list_update_keys(store, 0)

    for algo in (FusionAlgo.FEDAVG, FusionAlgo.ITERAVG):
        cfg = FusionConfig(algo=algo)
        oracle = sequential_fuse(updates, cfg)

        for chunks in (1, 2, 4, 8):
            model, _ = fuse_local(updates, cfg, chunk_count=chunks)
            assert max_relative_difference(model, oracle) <= TOLERANCE, (algo, chunks)

        for partitions in (1, 4, 16):
            plan = contiguous_plan(entries, partitions)
            task_results = [run_map_task(TaskSpec(p.partition_id, p.keys, cfg), store)
                            for p in plan.partitions]
            merged = decode_partial(task_results[0].partial_bytes)
            from fedagg.fusion import partial_merge

            for r in task_results[1:]:
                merged = partial_merge(merged, decode_partial(r.partial_bytes))
            assert merged.update_count == 100
            if algo is FusionAlgo.FEDAVG:
                assert merged.count_sum == expected_count_sum  # counts exactly equal
            else:
                assert merged.count_sum == 100
            for workers in (2, 4):
                pool = WorkerPool(store, workers)
                pool.start()
                try:
                    model, _, _ = run_job(plan, cfg, pool, store, 0,
                                          JobConfig(task_timeout_s=60.0), publish=False)
                finally:
                    pool.stop()
                assert max_relative_difference(model, oracle) <= TOLERANCE, (
                    algo, partitions, workers,
                )
    elapsed = time.perf_counter() - t_start
    assert elapsed < 30, f"criterion must finish in 30s, took {elapsed:.1f}s"


@criterion(2, "weighted-average point checks against direct evaluation")
def test_criterion_2_weighted_average_point_checks():
    # single update: n*theta/(n + eps) to full precision
    theta = np.array([0.25, -1.5, 3.0])
    layer = LayerTensor("w", Dtype.F64, (3,), theta)
    u = ModelUpdate("c1", 0, 7, (layer,))
    cfg = FusionConfig(algo=FusionAlgo.FEDAVG, epsilon=1e-6)
    out = finalize(partial_accumulate(partial_new(schema_of(u)), u, cfg), cfg)
    assert np.array_equal(out.layers[0].data, (7.0 * theta) / (7.0 + 1e-6))

    # three clients with counts 1,2,3: exact match with a plain-float fold
    rng = np.random.default_rng(2)
    a, b, c = (rng.uniform(-1, 1, size=16) for _ in range(3))
    updates = [
        ModelUpdate("c1", 0, 1, (LayerTensor("w", Dtype.F64, (16,), a),)),
        ModelUpdate("c2", 0, 2, (LayerTensor("w", Dtype.F64, (16,), b),)),
        ModelUpdate("c3", 0, 3, (LayerTensor("w", Dtype.F64, (16,), c),)),
    ]
    fused = sequential_fuse(updates, cfg)
    expected = [((1 * x) + 2 * y + 3 * z) / (6 + 1e-6) for x, y, z in zip(a, b, c)]
    assert np.array_equal(fused.layers[0].data, np.array(expected))


@criterion(3, "distributed engine completes >=3x the capped local party limit")
def test_criterion_3_scalability_under_cap(tmp_path):
    t_start = time.perf_counter()
    cap = 64 * 2**20
    params = 2**20 // 4  # 1 MiB of F32 payload per update
    schema = ModelSchema((LayerSpec("w", Dtype.F32, (params,)),))
    update_size = estimate_update_size(schema, "p00000")
    predicted_max = cap // update_size  # parties a 64 MiB local engine can hold
    assert abs(predicted_max - 64) <= 1

    small = [synth_update(i, schema, f"p{i:05d}", 0, sample_count=1 + i % 50)
             for i in range(predicted_max + 1)]
    model, _ = fuse_local(small[:predicted_max], FusionConfig(), chunk_count=2,
                          memory_cap_bytes=cap)
    assert model is not None
    with pytest.raises(MemoryCapExceeded):
        fuse_local(small, FusionConfig(), chunk_count=2, memory_cap_bytes=cap)

    # 512 x 1 MiB through 4 workers, each budgeted to the same 64 MiB
    parties = 512
    assert parties >= 3 * predicted_max
    store = LocalDirStore(tmp_path / "big")
    cfg = FusionConfig()
    oracle_partial = partial_new(schema)
    for i in range(parties):
        u = synth_update(10_000 + i, schema, f"p{i:05d}", 0, sample_count=1 + i % 100)
        put_update(store, 0, u.client_id, codec.encode_update(u))
        oracle_partial = partial_accumulate(oracle_partial, u, cfg)  # canonical order
    oracle = finalize(oracle_partial, cfg, 0)

    entries = list_update_keys(store, 0)
    assert sum(s for _, s in entries) > 8 * cap
    plan = make_partitions(entries, target_bytes=cap, worker_memory_budget=cap)
    assert all(p.bytes <= cap for p in plan.partitions)
    pool = WorkerPool(store, 4)
    pool.start()
    try:
        model, timings, state = run_job(plan, cfg, pool, store, 0,
                                        JobConfig(task_timeout_s=240.0))
    finally:
        pool.stop()
    assert state.completed()
    assert max_relative_difference(model, oracle) <= TOLERANCE
    assert fetch_global(store, 0) == model
    elapsed = time.perf_counter() - t_start
    assert elapsed < 300, f"criterion must finish in 5min, took {elapsed:.1f}s"


@criterion(4, "worker failure tolerated deterministically; exhaustion names partition")
def test_criterion_4_fault_tolerance():
    store = MemoryStore()
    schema = build_schema(ModelSpec("cnn4.6", scale=0.002))
    for u in synth_parties(24, schema, seed=3):
        put_update(store, 0, u.client_id, codec.encode_update(u))
    entries = list_update_keys(store, 0)
    plan = make_partitions(entries, target_bytes=sum(s for _, s in entries) // 6 + 1,
                           worker_memory_budget=2**30)
    job_cfg = JobConfig(task_timeout_s=60.0)

    clean_pool = WorkerPool(store, 3)
    clean_pool.start()
    try:
        clean, _, _ = run_job(plan, FusionConfig(), clean_pool, store, 0, job_cfg,
                              publish=False)
    finally:
        clean_pool.stop()

    first_tasks: dict[str, int] = {}

    def kill_one_worker_after_first_task(worker, spec):
        count = first_tasks.get(worker, 0) + 1
        first_tasks[worker] = count
        if worker == "w0" and count == 2:
            raise WorkerCrashed("w0 dies after completing its first task")

    faulty_pool = WorkerPool(store, 3, fault_hook=kill_one_worker_after_first_task)
    faulty_pool.start()
    try:
        faulty, _, state = run_job(plan, FusionConfig(), faulty_pool, store, 0, job_cfg,
                                   publish=False)
        killed = 3 - len(faulty_pool.live_workers())
    finally:
        faulty_pool.stop()
    assert state.completed()
    assert killed == 1 or first_tasks.get("w0", 0) < 2  # the hook fired unless w0 got one task
    assert codec.encode_global(faulty) == codec.encode_global(clean)

    def poison_partition_3(worker, spec):
        if spec.partition_id == 3:
            raise RuntimeError("injected permanent failure")

    poison_pool = WorkerPool(store, 3, fault_hook=poison_partition_3)
    poison_pool.start()
    try:
        with pytest.raises(JobFailed) as exc:
            run_job(plan, FusionConfig(), poison_pool, store, 0, job_cfg, publish=False)
    finally:
        poison_pool.stop()
    assert exc.value.partition_id == 3
    assert exc.value.attempts == 3


@criterion(5, "monitor trigger/timeout timing and snapshot isolation")
def test_criterion_5_monitor_semantics():
    poll = 0.05
    schema = build_schema(ModelSpec("cnn4.6", scale=0.001))

    # Triggered within one poll of the T_h-th commit
    store = MemoryStore()
    cfg = RoundConfig(round=0, threshold=3, timeout_s=30.0, poll_interval_s=poll)
    commit_times = []

    def writer():
        for i in range(3):
            time.sleep(0.15)
            u = synth_update(i, schema, f"c{i}", 0)
            put_update(store, 0, u.client_id, codec.encode_update(u))
            commit_times.append(time.monotonic())

    t = threading.Thread(target=writer)
    t.start()
    outcome = monitor(store, cfg)
    triggered_at = time.monotonic()
    t.join()
    assert outcome.triggered and outcome.count == 3
    assert triggered_at - commit_times[-1] <= poll + 0.1  # one poll + scheduler slack

    # TimedOut within one poll of T_s, with the correct count
    store2 = MemoryStore()
    for i in range(2):
        u = synth_update(i, schema, f"c{i}", 0)
        put_update(store2, 0, u.client_id, codec.encode_update(u))
    cfg2 = RoundConfig(round=0, threshold=5, timeout_s=0.6, poll_interval_s=poll)
    t0 = time.monotonic()
    outcome2 = monitor(store2, cfg2)
    elapsed = time.monotonic() - t0
    assert outcome2 == MonitorOutcome(triggered=False, count=2)
    assert 0.6 <= elapsed <= 0.6 + poll + 0.1

    # TimedOut with count >= min_parties publishes exactly the snapshot set
    late_key = []

    def late_commit(snapshot_keys):
        u = synth_update(99, schema, "late", 0)
        put_update(store2, 0, "late", codec.encode_update(u))
        late_key.append("rounds/0/updates/late.fau")

    result = run_round(
        RoundConfig(round=0, threshold=5, timeout_s=0.4, min_parties=2, poll_interval_s=poll),
        CapacityConfig(node_memory_budget_bytes=2**30, core_count=2, worker_count=0,
                       distributed_available=False),
        store2,
        Engines(local=LocalEngine()),
        on_snapshot=late_commit,
    )
    assert not result.outcome.triggered and result.outcome.count == 2
    assert late_key[0] not in result.snapshot
    expected = sequential_fuse(
        [synth_update(i, schema, f"c{i}", 0) for i in range(2)], FusionConfig(), 0
    )
    assert codec.encode_global(result.model) == codec.encode_global(expected)
    assert store2.exists(late_key[0])  # the late blob landed, just not in round 0


@criterion(6, "store atomicity, concurrent commit, corruption detection")
def test_criterion_6_store_atomicity(tmp_path):
    schema = build_schema(ModelSpec("cnn4.6", scale=0.001))

    # injected pause between write and commit: never visible
    gate, release = threading.Event(), threading.Event()

    def pause(key):
        gate.set()
        assert release.wait(timeout=10)

    paused_store = LocalDirStore(tmp_path / "paused", StoreHooks(before_commit=pause))
    u = synth_update(0, schema, "c0", 0)
    writer = threading.Thread(
        target=put_update, args=(paused_store, 0, "c0", codec.encode_update(u))
    )
    writer.start()
    assert gate.wait(timeout=10)
    for _ in range(20):
        assert count_updates(paused_store, 0) == 0
    release.set()
    writer.join(timeout=10)
    assert count_updates(paused_store, 0) == 1

    # 64 concurrent writers all commit, every blob decodes
    store = LocalDirStore(tmp_path / "concurrent")
    stats = simulate_clients(64, ModelSpec("cnn4.6", scale=0.001), store, concurrency=32)
    assert stats.committed == 64 and not stats.failures
    entries = list_update_keys(store, 0)
    assert len(entries) == 64
    for key, _ in entries:
        codec.decode_update(store.get(key))

    # single-bit corruption of every stored blob is detected on read
    detected = 0
    for i, (key, size) in enumerate(entries):
        path = tmp_path / "concurrent" / key
        blob = bytearray(path.read_bytes())
        blob[(i * 911) % size] ^= 1 << (i % 8)
        path.write_bytes(bytes(blob))
        try:
            codec.decode_update(store.get(key))
        except Exception:
            detected += 1
    assert detected == 64


@criterion(7, "classification boundary exactness and monotonicity sweep")
def test_criterion_7_dispatch_boundary():
    capacity = CapacityConfig(node_memory_budget_bytes=2**31, core_count=4,
                              safety_factor=0.5, worker_count=2)
    boundary = 2**30  # alpha * M
    assert classify(WorkloadDescriptor(boundary, 1), capacity) is WorkloadClass.SMALL
    assert classify(WorkloadDescriptor(boundary + 1, 1), capacity) is WorkloadClass.LARGE
    assert classify(WorkloadDescriptor(2**20, 2**10), capacity) is WorkloadClass.SMALL
    assert classify(WorkloadDescriptor(2**20 + 1, 2**10), capacity) is WorkloadClass.LARGE

    rng = np.random.default_rng(13)
    pairs = [
        WorkloadDescriptor(int(rng.integers(1, 2**24)), int(rng.integers(1, 10**4)))
        for _ in range(1000)
    ]
    pairs.sort(key=lambda w: w.total_bytes)
    seen_large = False
    for w in pairs:
        cls = classify(w, capacity)
        if seen_large:
            assert cls is WorkloadClass.LARGE, "monotonicity violated"
        seen_large = seen_large or cls is WorkloadClass.LARGE


@criterion(8, "preemptive mode transition with hysteresis, WrongMode enforcement")
def test_criterion_8_seamless_transition():
    from fastapi.testclient import TestClient

    schema = build_schema(ModelSpec("cnn4.6", scale=0.001))
    w = estimate_update_size(schema)
    store = MemoryStore()
    capacity = CapacityConfig(
        node_memory_budget_bytes=6 * w, core_count=2, safety_factor=0.5,
        worker_count=2, worker_memory_budget_bytes=2**30, target_partition_bytes=2 * w,
    )
    engines = Engines(
        local=LocalEngine(),
        distributed=DistributedEngine(store, 2, 2**30, 2 * w,
                                      JobConfig(task_timeout_s=60.0)),
    )
    coord = Coordinator(
        store, capacity, engines,
        RoundConfig(round=0, threshold=1, timeout_s=5.0, poll_interval_s=0.02),
    )
    client = TestClient(create_app(coord))

    def run_one(round_no, mode):
        box = {}
        t = threading.Thread(target=lambda: box.setdefault("r", coord.step_round()))
        t.start()
        time.sleep(0.05)
        u = synth_update(round_no, schema, f"g{round_no:02d}", round_no)
        if mode == "direct":
            resp = client.post(f"/v1/updates/{round_no}", content=codec.encode_update(u))
            assert resp.status_code == 201, resp.text
        else:
            put_update(store, round_no, u.client_id, codec.encode_update(u))
        t.join(timeout=20)
        assert box.get("r") is not None, f"round {round_no} did not publish"

    modes = []
    assert coord.round_info()["submission_mode"] == "direct"
    run_one(0, "direct")
    modes.append("direct")

    coord.set_registered(50)  # registration growth crosses the boundary
    run_one(1, coord.round_info()["submission_mode"])
    modes.append(coord.round_info()["submission_mode"])
    info = coord.round_info()
    assert info["round"] == 2
    assert info["submission_mode"] == "store"  # advertised preemptively

    # the next round's manifest advertises store mode, direct uploads bounce
    box = {}
    t = threading.Thread(target=lambda: box.setdefault("r", coord.step_round()))
    t.start()
    time.sleep(0.1)
    manifest = json.loads(store.get("rounds/2/manifest.json"))
    assert manifest["submission_mode"] == "store"
    u = synth_update(2, schema, "g02", 2)
    resp = client.post("/v1/updates/2", content=codec.encode_update(u))
    assert resp.status_code == 409
    assert resp.json()["error"] == "WrongMode"
    put_update(store, 2, "g02", codec.encode_update(u))
    t.join(timeout=20)
    assert box.get("r") is not None
    modes.append("store")

    # oscillating registration: at most one flip per two rounds
    for r in range(3, 11):
        coord.set_registered(50 if r % 2 else 1)
        mode = coord.round_info()["submission_mode"]
        run_one(r, mode)
        modes.append(mode)
    flips = sum(1 for a, b in zip(modes, modes[1:]) if a != b)
    assert flips <= (len(modes) + 1) // 2
    coord.shutdown()


@criterion(9, "parallel speedup measured and reported (soft; flagged, never failed)")
def test_criterion_9_parallel_speedup(tmp_path):
    import os

    cores = os.cpu_count() or 1
    schema = build_schema(ModelSpec("mib1", scale=1.0, size_mib=1.0))
    updates = synth_parties(200, schema, seed=5)
    cfg = FusionConfig()

    t0 = time.perf_counter()
    seq_model, _ = fuse_local(updates, cfg, chunk_count=1)
    t_seq = time.perf_counter() - t0
    t0 = time.perf_counter()
    par_model, _ = fuse_local(updates, cfg, chunk_count=cores)
    t_par = time.perf_counter() - t0
    assert max_relative_difference(par_model, seq_model) <= TOLERANCE

    speedup = t_seq / max(t_par, 1e-9)
    reduction = 1.0 - t_par / max(t_seq, 1e-9)
    size = estimate_update_size(schema)
    rows = [
        BenchRow(size, 200, "local-seq", 0, t_seq, 0, t_seq, 0, 0),
        BenchRow(size, 200, "local", 0, t_par, 0, t_par, 0, 0),
    ]
    csv_path = tmp_path / "speedup.csv"
    write_csv(rows, csv_path)
    rep = report(csv_path)
    flagged = "[FLAG" in rep.text()
    print(
        f"\n  cores={cores} seq={t_seq:.2f}s par={t_par:.2f}s "
        f"speedup={speedup:.2f}x reduction={reduction:.0%} "
        f"{'(below 25% bar; flagged in report)' if flagged else '(meets 25% bar)'}"
    )
    # soft criterion: the report must flag sub-bar environments, never fail them
    assert flagged == (speedup < 1.25)
    if cores >= 4:
        # expectation holds on >=4 physical cores; report-only elsewhere
        if reduction < 0.25:
            print("  [FLAG] below the 25% reduction bar despite >=4 cores")


@criterion(10, "store-mode end-to-end simulation with phase/write breakdown")
def test_criterion_10_end_to_end(tmp_path):
    t0 = time.perf_counter()
    store = LocalDirStore(tmp_path / "e2e")
    out_csv = tmp_path / "e2e.csv"
    row, stats = run_end_to_end(
        500, ModelSpec("cnn4.6", scale=0.01), store,
        out_csv=out_csv, seed=11, concurrency=32, timeout_s=90.0,
    )
    elapsed = time.perf_counter() - t0
    assert stats.committed == 500
    assert row.error == ""
    assert row.avg_write_s > 0
    assert row.read_partition_s > 0
    assert row.sum_s > 0
    assert row.reduce_s > 0
    assert row.read_partition_s + row.sum_s + row.reduce_s <= row.total_s
    assert out_csv.exists()
    assert elapsed < 120, f"criterion must finish in 2min, took {elapsed:.1f}s"
