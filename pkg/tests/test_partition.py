"""Partition-packing tests, including a brute-force optimal-packing oracle."""

import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedagg.engine_distributed import make_partitions
from fedagg.errors import OversizedEntry


def brute_force_min_makespan(sizes, bins):
    """Exhaustive minimal max-bin-load; usable for <= 8 entries."""
    best = sum(sizes)
    for assignment in itertools.product(range(bins), repeat=len(sizes)):
        loads = [0] * bins
        for size, b in zip(sizes, assignment):
            loads[b] += size
        best = min(best, max(loads))
    return best


def test_symmetric_four_keys_two_partitions():
    entries = [(f"k{i}", 10) for i in range(4)]
    plan = make_partitions(entries, target_bytes=20, worker_memory_budget=100)
    assert len(plan.partitions) == 2
    assert all(len(p.keys) == 2 and p.bytes == 20 for p in plan.partitions)


def test_lpt_against_brute_force_oracle():
    sizes = [5, 4, 3, 3, 3]
    entries = [(f"k{i}", s) for i, s in enumerate(sizes)]
    plan = make_partitions(entries, target_bytes=9, worker_memory_budget=100)
    loads = [p.bytes for p in plan.partitions]
    assert max(loads) / min(loads) <= 2
    opt = brute_force_min_makespan(sizes, len(plan.partitions))
    # Graham's LPT bound: makespan <= (4/3 - 1/(3m)) * OPT
    m = len(plan.partitions)
    assert max(loads) <= (4 / 3 - 1 / (3 * m)) * opt + 1e-9


def test_oversized_entry_rejected():
    with pytest.raises(OversizedEntry) as exc:
        make_partitions([("big", 200), ("ok", 10)], target_bytes=64, worker_memory_budget=100)
    assert exc.value.key == "big"


def test_coverage_and_density():
    entries = [(f"k{i:02d}", 7 + i % 5) for i in range(23)]
    plan = make_partitions(entries, target_bytes=25, worker_memory_budget=60)
    ids = [p.partition_id for p in plan.partitions]
    assert ids == list(range(len(ids)))
    seen = [k for p in plan.partitions for k in p.keys]
    assert sorted(seen) == sorted(k for k, _ in entries)
    assert len(seen) == len(set(seen))


def test_keys_sorted_within_partition():
    entries = [("z", 5), ("a", 5), ("m", 5), ("b", 5)]
    plan = make_partitions(entries, target_bytes=10, worker_memory_budget=100)
    for p in plan.partitions:
        assert list(p.keys) == sorted(p.keys)


def test_budget_forces_more_bins():
    entries = [(f"k{i}", 10) for i in range(10)]  # 100 bytes total
    plan = make_partitions(entries, target_bytes=100, worker_memory_budget=25)
    assert all(p.bytes <= 25 for p in plan.partitions)
    assert len(plan.partitions) >= 4


def test_deterministic():
    entries = [(f"k{i}", (i * 37) % 19 + 1) for i in range(40)]
    a = make_partitions(entries, 50, 1000)
    b = make_partitions(list(reversed(entries)), 50, 1000)
    assert a == b


@given(
    st.lists(st.integers(1, 32), min_size=1, max_size=60),
    st.integers(64, 256),
)
@settings(max_examples=200, deadline=None)
def test_balance_property(sizes, target):
    # all entries <= target/2 guarantees a max/min byte ratio <= 2
    entries = [(f"k{i:03d}", s) for i, s in enumerate(sizes)]
    budget = 10 * target
    plan = make_partitions(entries, target, budget)
    assert plan.key_set() == {k for k, _ in entries}
    loads = [p.bytes for p in plan.partitions]
    assert all(l <= budget for l in loads)
    if len(loads) > 1:
        assert max(loads) / min(loads) <= 2
