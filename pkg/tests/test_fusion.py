"""Fusion-algebra tests against independent oracles.

The oracles here never call the engine code paths they check: expected
values come from hand arithmetic, plain-Python float folds, exact rational
sums (fractions.Fraction), or restatements of the algebra's definition.
"""

import random
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedagg.errors import EmptyAggregate, NonFiniteValue, SchemaMismatch
from fedagg.fusion import (
    FusionAlgo,
    FusionConfig,
    Summation,
    decode_partial,
    encode_partial,
    finalize,
    max_relative_difference,
    partial_accumulate,
    partial_merge,
    partial_new,
    sequential_fuse,
)
from fedagg import codec
from fedagg.model import Dtype, synth_update

from conftest import make_schema, make_update

FEDAVG = FusionConfig(algo=FusionAlgo.FEDAVG)
ITERAVG = FusionConfig(algo=FusionAlgo.ITERAVG)


def assert_partials_equal(a, b):
    assert a.count_sum == b.count_sum
    assert a.update_count == b.update_count
    for x, y in zip(a.acc, b.acc):
        assert np.array_equal(x, y)


# --- identity element ---------------------------------------------------------

def test_partial_new_is_all_zero(tiny_schema):
    p = partial_new(tiny_schema)
    assert p.count_sum == 0 and p.update_count == 0
    assert all(np.array_equal(a, np.zeros(2)) for a in p.acc)


def test_empty_partial_cannot_finalize(tiny_schema):
    with pytest.raises(EmptyAggregate):
        finalize(partial_new(tiny_schema), FEDAVG)


def test_merge_identity_both_sides(tiny_schema):
    u = make_update("c1", [0.25, -0.75], sample_count=4)
    p = partial_accumulate(partial_new(tiny_schema), u, FEDAVG)
    e = partial_new(tiny_schema)
    assert_partials_equal(partial_merge(e, p), p)
    assert_partials_equal(partial_merge(p, e), p)


# --- accumulate oracles ----------------------------------------------------------

def test_fedavg_accumulate_hand_computed(tiny_schema):
    u = make_update("c1", [1.0, 2.0], sample_count=3)
    p = partial_accumulate(partial_new(tiny_schema), u, FEDAVG)
    assert np.array_equal(p.acc[0], np.array([3.0, 6.0]))  # n_i * w_i
    assert p.count_sum == 3
    assert p.update_count == 1


def test_iteravg_accumulate_is_plain_sum(tiny_schema):
    u = make_update("c1", [1.0, 2.0], sample_count=3)
    p = partial_accumulate(partial_new(tiny_schema), u, ITERAVG)
    assert np.array_equal(p.acc[0], np.array([1.0, 2.0]))
    assert p.count_sum == 1
    assert p.update_count == 1


def test_nan_and_inf_rejected(tiny_schema):
    for bad in (float("nan"), float("inf")):
        u = make_update("c1", [1.0, bad])
        with pytest.raises(NonFiniteValue):
            partial_accumulate(partial_new(tiny_schema), u, FEDAVG)


def test_schema_mismatch_on_accumulate(tiny_schema):
    u = make_update("c1", [1.0, 2.0, 3.0])
    with pytest.raises(SchemaMismatch):
        partial_accumulate(partial_new(tiny_schema), u, FEDAVG)


def test_accumulate_leaves_input_unchanged(tiny_schema):
    p0 = partial_new(tiny_schema)
    partial_accumulate(p0, make_update("c1", [1.0, 1.0], sample_count=2), FEDAVG)
    assert p0.count_sum == 0
    assert np.array_equal(p0.acc[0], np.zeros(2))


# --- merge vs sequential ------------------------------------------------------------

def test_merge_matches_sequential_fold(tiny_schema):
    u1 = make_update("c1", [0.5, 1.5], sample_count=2)
    u2 = make_update("c2", [-1.0, 3.0], sample_count=5)
    a = partial_accumulate(partial_new(tiny_schema), u1, FEDAVG)
    b = partial_accumulate(partial_new(tiny_schema), u2, FEDAVG)
    seq = partial_accumulate(a, u2, FEDAVG)
    merged = partial_merge(a, b)
    assert merged.count_sum == seq.count_sum == 7
    assert merged.update_count == seq.update_count == 2
    # (0 + t1) + (0 + t2) == (0 + t1) + t2 exactly
    assert np.array_equal(merged.acc[0], seq.acc[0])


def test_merge_commutes_within_tolerance():
    schema = make_schema(64)
    updates = [synth_update(i, schema, f"c{i}", sample_count=1 + i % 1000) for i in range(20)]
    a = partial_new(schema)
    for u in updates[:10]:
        a = partial_accumulate(a, u, FEDAVG)
    b = partial_new(schema)
    for u in updates[10:]:
        b = partial_accumulate(b, u, FEDAVG)
    ab, ba = partial_merge(a, b), partial_merge(b, a)
    assert ab.count_sum == ba.count_sum
    for x, y in zip(ab.acc, ba.acc):
        scale = max(np.abs(x).max(), np.abs(y).max(), 1e-300)
        assert np.abs(x - y).max() / scale <= 1e-12


# --- finalize oracles ---------------------------------------------------------------

def test_fedavg_single_update_direct_formula():
    from fedagg.model import schema_of

    u = make_update("c1", [2.0], sample_count=1, dtype=Dtype.F64)
    p = partial_accumulate(partial_new(schema_of(u)), u, FEDAVG)
    out = finalize(p, FEDAVG)
    assert out.layers[0].data[0] == 2.0 * 1 / (1 + 1e-6)  # n*theta/(n+eps), full precision


def test_iteravg_brute_force_mean(tiny_schema):
    u1 = make_update("c1", [1.0, 2.0])
    u2 = make_update("c2", [3.0, 4.0])
    out = sequential_fuse([u1, u2], ITERAVG)
    assert np.array_equal(out.layers[0].data, np.array([2.0, 3.0], np.float32))


def test_fedavg_three_client_weighted_oracle():
    rng = random.Random(5)
    a = [rng.uniform(-1, 1) for _ in range(8)]
    b = [rng.uniform(-1, 1) for _ in range(8)]
    c = [rng.uniform(-1, 1) for _ in range(8)]
    updates = [
        make_update("c1", a, sample_count=1, dtype=Dtype.F64),
        make_update("c2", b, sample_count=2, dtype=Dtype.F64),
        make_update("c3", c, sample_count=3, dtype=Dtype.F64),
    ]
    out = sequential_fuse(updates, FEDAVG)
    # independent fold in the same canonical (client-id) order, plain floats
    expected = [((1 * x) + 2 * y + 3 * z) / (6 + 1e-6) for x, y, z in zip(a, b, c)]
    assert np.array_equal(out.layers[0].data, np.array(expected))


# --- exact rational oracle ------------------------------------------------------------

def _exact_fedavg(updates, epsilon=1e-6):
    """Weighted mean with exact rational arithmetic, then one rounding at the end."""
    n_elems = len(updates[0].layers[0].data)
    sums = [Fraction(0)] * n_elems
    total = 0
    for u in updates:
        total += u.sample_count
        for j in range(n_elems):
            sums[j] += u.sample_count * Fraction(float(u.layers[0].data[j]))
    return np.array([float(s / (Fraction(total) + Fraction(epsilon))) for s in sums])


@pytest.mark.parametrize(
    "summation,bound",
    [(Summation.NAIVE, 1e-12), (Summation.COMPENSATED, 1e-14)],
)
def test_against_exact_rational_oracle(summation, bound):
    schema = make_schema(32, dtype=Dtype.F64)
    rng = np.random.default_rng(11)
    updates = [
        synth_update(int(rng.integers(0, 2**31)), schema, f"c{i:03d}",
                     sample_count=int(rng.integers(1, 1000)))
        for i in range(200)
    ]
    cfg = FusionConfig(algo=FusionAlgo.FEDAVG, summation=summation)
    out = sequential_fuse(updates, cfg)
    exact = _exact_fedavg(updates)
    scale = max(np.abs(exact).max(), 1e-300)
    assert np.abs(out.layers[0].data - exact).max() / scale <= bound


# --- algebraic properties ----------------------------------------------------------------

@given(st.integers(0, 2**31 - 1), st.integers(2, 12), st.booleans())
@settings(max_examples=25, deadline=None)
def test_any_merge_tree_agrees_with_sequential(seed, n_updates, compensated):
    schema = make_schema(16)
    rng = random.Random(seed)
    summation = Summation.COMPENSATED if compensated else Summation.NAIVE
    cfg = FusionConfig(algo=FusionAlgo.FEDAVG, summation=summation)
    updates = [
        synth_update(rng.randrange(2**31), schema, f"c{i}", sample_count=rng.randint(1, 100))
        for i in range(n_updates)
    ]
    seq = partial_new(schema, summation)
    for u in updates:
        seq = partial_accumulate(seq, u, cfg)

    # random merge tree over single-update partials
    forest = [partial_accumulate(partial_new(schema, summation), u, cfg) for u in updates]
    while len(forest) > 1:
        i = rng.randrange(len(forest) - 1)
        forest[i : i + 2] = [partial_merge(forest[i], forest[i + 1])]
    tree = forest[0]

    assert tree.count_sum == seq.count_sum
    assert tree.update_count == seq.update_count
    for x, y in zip(tree.acc, seq.acc):
        scale = max(np.abs(x).max(), np.abs(y).max(), 1e-300)
        assert np.abs(x - y).max() / scale <= 1e-12


def test_iteravg_of_copies_within_one_ulp(tiny_schema):
    u = make_update("c1", [0.3, -0.7])
    for k in (1, 2, 3, 5, 8):
        copies = [
            make_update(f"c{i}", [0.3, -0.7]) for i in range(k)
        ]
        out = sequential_fuse(copies, ITERAVG)
        if k == 1:
            assert np.array_equal(out.layers[0].data, u.layers[0].data)
        else:
            np.testing.assert_array_max_ulp(
                out.layers[0].data.astype(np.float64),
                u.layers[0].data.astype(np.float64),
                maxulp=1,
            )


def test_fedavg_count_scaling_bounded_by_epsilon_term():
    schema = make_schema(32, dtype=Dtype.F64)
    updates = [synth_update(i, schema, f"c{i}", sample_count=i + 1) for i in range(10)]
    cfg = FEDAVG
    base = sequential_fuse(updates, cfg)
    for c in (2, 10, 100):
        scaled = [
            synth_update(i, schema, f"c{i}", sample_count=(i + 1) * c) for i in range(10)
        ]
        out = sequential_fuse(scaled, cfg)
        p = partial_new(schema)
        for u in updates:
            p = partial_accumulate(p, u, cfg)
        bound = cfg.epsilon * max(np.abs(a).max() for a in p.acc) / p.count_sum**2
        diff = np.abs(out.layers[0].data - base.layers[0].data).max()
        assert diff <= bound + 1e-15


def test_fixed_plan_is_byte_deterministic():
    schema = make_schema(100, 50)
    updates = [synth_update(i, schema, f"c{i}", sample_count=i + 1) for i in range(17)]
    runs = [codec.encode_global(sequential_fuse(updates, FEDAVG)) for _ in range(3)]
    assert runs[0] == runs[1] == runs[2]


def test_max_relative_difference_metric(tiny_schema):
    u = make_update("c1", [1.0, 2.0])
    a = sequential_fuse([u], ITERAVG)
    assert max_relative_difference(a, a) == 0.0
    b = sequential_fuse([make_update("c1", [1.0, 2.0 + 2e-7])], ITERAVG)
    d = max_relative_difference(a, b)
    assert 0 < d < 1e-6


# --- wire format ----------------------------------------------------------------------------

@pytest.mark.parametrize("summation", [Summation.NAIVE, Summation.COMPENSATED])
def test_partial_wire_roundtrip(summation):
    schema = make_schema(5, 3, dtype=Dtype.F64)
    cfg = FusionConfig(summation=summation)
    p = partial_new(schema, summation)
    for i in range(4):
        p = partial_accumulate(p, synth_update(i, schema, f"c{i}", sample_count=i + 1), cfg)
    out = decode_partial(encode_partial(p))
    assert out.schema == p.schema
    assert out.count_sum == p.count_sum and out.update_count == p.update_count
    for x, y in zip(out.acc, p.acc):
        assert np.array_equal(x, y)
    if summation is Summation.COMPENSATED:
        for x, y in zip(out.compensation, p.compensation):
            assert np.array_equal(x, y)
    assert encode_partial(out) == encode_partial(p)


def test_compensated_beats_naive_on_adversarial_order():
    # large alternating terms cancel; compensation keeps the small residue
    schema = make_schema(1, dtype=Dtype.F64)
    vals = []
    for i in range(100):
        vals.append(make_update(f"a{i:03d}", [1.0], sample_count=10**6))
        vals.append(make_update(f"b{i:03d}", [1e-9], sample_count=1))
    naive = sequential_fuse(vals, FusionConfig(summation=Summation.NAIVE))
    comp = sequential_fuse(vals, FusionConfig(summation=Summation.COMPENSATED))
    exact = _exact_fedavg(vals)
    err_naive = abs(float(naive.layers[0].data[0]) - exact[0])
    err_comp = abs(float(comp.layers[0].data[0]) - exact[0])
    assert err_comp <= err_naive
