"""Fusion algorithms expressed as a mergeable partial-aggregate algebra.

FedAvg computes the sample-count-weighted average

    result = sum_i(n_i * w_i) / (sum_i(n_i) + epsilon)

with epsilon defaulting to 1e-6; IterAvg is the plain mean over updates.
Both reduce to the same shape of state: per-layer 64-bit running sums plus
integer counts. Partials form a monoid (partial_new is the identity,
partial_merge the operation), which is what lets one implementation serve
sequential folds, in-node data-parallel fusion, and distributed map/reduce.

Counts combine exactly; floating-point sums combine associatively only up
to rounding, so cross-plan comparisons use a normwise relative difference
(see max_relative_difference). For a fixed accumulate/merge plan, results
are bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import codec
from .errors import EmptyAggregate, NonFiniteValue
from .model import Dtype, GlobalModel, LayerTensor, ModelSchema, ModelUpdate, check_compatible, schema_of

MAGIC_PARTIAL = b"FPAG"


class FusionAlgo(Enum):
    FEDAVG = ("fedavg", 0)
    ITERAVG = ("iteravg", 1)

    def __init__(self, label: str, wire_code: int):
        self.label = label
        self.wire_code = wire_code

    @classmethod
    def from_label(cls, label: str) -> "FusionAlgo":
        for a in cls:
            if a.label == label:
                return a
        raise ValueError(f"unknown fusion algorithm {label!r} (expected fedavg or iteravg)")


class Summation(Enum):
    NAIVE = "naive"
    COMPENSATED = "compensated"


@dataclass(frozen=True)
class FusionConfig:
    algo: FusionAlgo = FusionAlgo.FEDAVG
    epsilon: float = 1e-6
    summation: Summation = Summation.NAIVE
    output_dtype: Dtype | None = None  # None: use the input schema's dtype

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")


def _frozen_f64(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float64).reshape(-1)
    if out.flags.writeable:
        if out.base is not None:
            out = out.copy()
        out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class PartialAggregate:
    """Mergeable weighted-sum state: per-layer f64 accumulators plus counts.

    For FedAvg `acc` holds sum(n_i * w_i) and `count_sum` holds sum(n_i);
    for IterAvg `acc` holds sum(w_i) and `count_sum` equals `update_count`.
    `compensation` carries Neumaier correction terms when compensated
    summation is enabled, and is None otherwise.
    """

    schema: ModelSchema
    acc: tuple[np.ndarray, ...]
    count_sum: int
    update_count: int
    compensation: tuple[np.ndarray, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "acc", tuple(_frozen_f64(a) for a in self.acc))
        if self.compensation is not None:
            object.__setattr__(
                self, "compensation", tuple(_frozen_f64(c) for c in self.compensation)
            )
        if len(self.acc) != len(self.schema.layers):
            raise ValueError("accumulator count != schema layer count")
        for a, spec in zip(self.acc, self.schema.layers):
            if a.size != math.prod(spec.shape):
                raise ValueError(f"accumulator size mismatch for layer {spec.name!r}")
        if self.compensation is not None and len(self.compensation) != len(self.acc):
            raise ValueError("compensation count != accumulator count")
        if self.update_count < 0 or self.count_sum < self.update_count:
            raise ValueError("counts must satisfy count_sum >= update_count >= 0")


def partial_new(schema: ModelSchema, summation: Summation = Summation.NAIVE) -> PartialAggregate:
    """Identity element of the merge monoid: all-zero sums, zero counts."""
    zeros = tuple(np.zeros(math.prod(l.shape)) for l in schema.layers)
    comp = tuple(np.zeros(math.prod(l.shape)) for l in schema.layers) \
        if summation is Summation.COMPENSATED else None
    return PartialAggregate(schema, zeros, 0, 0, comp)


def _neumaier_add(s: np.ndarray, c: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    t = s + x
    err = np.where(np.abs(s) >= np.abs(x), (s - t) + x, (x - t) + s)
    return t, c + err


def partial_accumulate(p: PartialAggregate, u: ModelUpdate, cfg: FusionConfig) -> PartialAggregate:
    """Fold one update into the state; `p` itself is left untouched."""
    check_compatible(p.schema, schema_of(u))
    if (cfg.summation is Summation.COMPENSATED) != (p.compensation is not None):
        raise ValueError("partial's summation mode does not match the fusion config")
    weight = float(u.sample_count) if cfg.algo is FusionAlgo.FEDAVG else 1.0
    new_acc = []
    new_comp = [] if p.compensation is not None else None
    for i, layer in enumerate(u.layers):
        if not np.isfinite(layer.data).all():
            raise NonFiniteValue(
                f"update {u.client_id!r} layer {layer.name!r} contains NaN/Inf"
            )
        term = layer.data.astype(np.float64) if weight == 1.0 else weight * layer.data.astype(np.float64)
        if new_comp is None:
            new_acc.append(p.acc[i] + term)
        else:
            s, c = _neumaier_add(p.acc[i], p.compensation[i], term)
            new_acc.append(s)
            new_comp.append(c)
    added = u.sample_count if cfg.algo is FusionAlgo.FEDAVG else 1
    return PartialAggregate(
        p.schema,
        tuple(new_acc),
        p.count_sum + added,
        p.update_count + 1,
        tuple(new_comp) if new_comp is not None else None,
    )


def partial_merge(a: PartialAggregate, b: PartialAggregate) -> PartialAggregate:
    """Combine two partials; counts add exactly, sums elementwise."""
    check_compatible(a.schema, b.schema)
    if (a.compensation is None) != (b.compensation is None):
        raise ValueError("cannot merge partials with different summation modes")
    if a.compensation is None:
        acc = tuple(x + y for x, y in zip(a.acc, b.acc))
        comp = None
    else:
        acc_list, comp_list = [], []
        for sa, ca, sb, cb in zip(a.acc, a.compensation, b.acc, b.compensation):
            s, c = _neumaier_add(sa, ca, sb)
            s, c = _neumaier_add(s, c, cb)
            acc_list.append(s)
            comp_list.append(c)
        acc, comp = tuple(acc_list), tuple(comp_list)
    return PartialAggregate(
        a.schema,
        acc,
        a.count_sum + b.count_sum,
        a.update_count + b.update_count,
        comp,
    )


def finalize(p: PartialAggregate, cfg: FusionConfig, round_no: int = 0) -> GlobalModel:
    """Divide the sums by the algorithm's denominator and cast to the output dtype."""
    if p.update_count < 1:
        raise EmptyAggregate("cannot finalize an aggregate with zero updates")
    if cfg.algo is FusionAlgo.FEDAVG:
        denom = p.count_sum + cfg.epsilon
    else:
        denom = float(p.update_count)
    out_dtype = cfg.output_dtype or p.schema.dtype
    layers = []
    for i, spec in enumerate(p.schema.layers):
        total = p.acc[i] if p.compensation is None else p.acc[i] + p.compensation[i]
        values = (total / denom).astype(out_dtype.numpy_dtype)
        layers.append(LayerTensor(spec.name, out_dtype, spec.shape, values))
    return GlobalModel(round=round_no, layers=tuple(layers))


def sequential_fuse(
    updates: list[ModelUpdate] | tuple[ModelUpdate, ...],
    cfg: FusionConfig,
    round_no: int = 0,
) -> GlobalModel:
    """Canonical fold: sort by client_id, accumulate in order, finalize once.

    This is the reference order every engine must reproduce (exactly for a
    fixed plan, within tolerance across plans).
    """
    if not updates:
        raise EmptyAggregate("no updates to fuse")
    ordered = sorted(updates, key=lambda u: u.client_id)
    p = partial_new(schema_of(ordered[0]), cfg.summation)
    for u in ordered:
        p = partial_accumulate(p, u, cfg)
    return finalize(p, cfg, round_no)


class UpdateFolder:
    """Streaming fold into a private buffer; engines' hot loop.

    Produces bit-identical results to chaining partial_accumulate (same
    floating-point operations in the same order) but accumulates in place
    and reuses one cast buffer, so folding n updates does no per-update
    allocation. Not thread-safe; each worker/chunk owns its own folder.
    """

    def __init__(self, schema: ModelSchema, cfg: FusionConfig):
        self.schema = schema
        self.cfg = cfg
        self.count_sum = 0
        self.update_count = 0
        sizes = [math.prod(l.shape) for l in schema.layers]
        self._acc = [np.zeros(n) for n in sizes]
        self._comp = (
            [np.zeros(n) for n in sizes] if cfg.summation is Summation.COMPENSATED else None
        )
        self._buf = np.empty(max(sizes))
        self._finished = False

    def add(self, u: ModelUpdate) -> None:
        if self._finished:
            raise RuntimeError("folder already finished")
        check_compatible(self.schema, schema_of(u))
        weight = float(u.sample_count) if self.cfg.algo is FusionAlgo.FEDAVG else 1.0
        for i, layer in enumerate(u.layers):
            if not np.isfinite(layer.data).all():
                raise NonFiniteValue(
                    f"update {u.client_id!r} layer {layer.name!r} contains NaN/Inf"
                )
            term = self._buf[: layer.data.size]
            np.copyto(term, layer.data)
            if weight != 1.0:
                term *= weight
            if self._comp is None:
                self._acc[i] += term
            else:
                s, c = _neumaier_add(self._acc[i], self._comp[i], term)
                self._acc[i] = s
                self._comp[i] = c
        self.count_sum += u.sample_count if self.cfg.algo is FusionAlgo.FEDAVG else 1
        self.update_count += 1

    def partial(self) -> PartialAggregate:
        """Hand the buffers over as an immutable PartialAggregate."""
        self._finished = True
        return PartialAggregate(
            self.schema,
            tuple(self._acc),
            self.count_sum,
            self.update_count,
            tuple(self._comp) if self._comp is not None else None,
        )


def fold_updates(
    schema: ModelSchema, updates, cfg: FusionConfig
) -> PartialAggregate:
    folder = UpdateFolder(schema, cfg)
    for u in updates:
        folder.add(u)
    return folder.partial()


# --- numeric comparison ------------------------------------------------------

def _layer_rel_diff(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), 1e-300)
    return float(np.max(np.abs(a.astype(np.float64) - b.astype(np.float64)))) / scale


def max_relative_difference(a: GlobalModel, b: GlobalModel) -> float:
    """Largest per-layer normwise relative difference between two models.

    Per layer: max|a - b| / max(max|a|, max|b|). Normalizing by the layer's
    magnitude (rather than per element) keeps the metric meaningful where
    individual elements straddle zero.
    """
    if len(a.layers) != len(b.layers):
        raise ValueError("models have different layer counts")
    worst = 0.0
    for la, lb in zip(a.layers, b.layers):
        if la.shape != lb.shape:
            raise ValueError(f"layer {la.name!r}: shape mismatch")
        worst = max(worst, _layer_rel_diff(la.data, lb.data))
    return worst


# --- wire format ---------------------------------------------------------------

def encode_partial(p: PartialAggregate) -> bytes:
    """FPAG v1 record: FAUF-style framing so partials can cross the wire/store."""
    w = codec.RecordWriter(MAGIC_PARTIAL)
    w.u16(codec.VERSION)
    w.u16(0)
    w.u8(1 if p.compensation is not None else 0)
    w.u64(p.count_sum)
    w.u64(p.update_count)
    w.u32(len(p.schema.layers))
    for i, spec in enumerate(p.schema.layers):
        name = spec.name.encode("utf-8")
        w.u16(len(name))
        w.raw(name)
        w.u8(spec.dtype.wire_code)
        w.u8(len(spec.shape))
        for d in spec.shape:
            w.u64(d)
        w.raw(p.acc[i].tobytes())
        if p.compensation is not None:
            w.raw(p.compensation[i].tobytes())
    return w.finish()


def decode_partial(buf: bytes) -> PartialAggregate:
    from .model import LayerSpec

    r = codec.check_frame(buf, MAGIC_PARTIAL)
    compensated = r.u8("compensated") != 0
    count_sum = r.u64("count_sum")
    update_count = r.u64("update_count")
    layer_count = r.u32("layer_count")
    f64 = np.dtype("<f8")
    specs, acc, comp = [], [], []
    for i in range(layer_count):
        name_len = r.u16(f"layer[{i}].name_len")
        name = r.take(name_len, f"layer[{i}].name").decode("utf-8")
        dtype = Dtype.from_wire(r.u8(f"layer[{i}].dtype"))
        rank = r.u8(f"layer[{i}].rank")
        dims = tuple(int(d) for d in r.array(np.dtype("<u8"), rank, f"layer[{i}].dims"))
        n = math.prod(dims)
        specs.append(LayerSpec(name, dtype, dims))
        acc.append(r.array(f64, n, f"layer[{i}].acc"))
        if compensated:
            comp.append(r.array(f64, n, f"layer[{i}].compensation"))
    r.done()
    return PartialAggregate(
        ModelSchema(tuple(specs)),
        tuple(acc),
        count_sum,
        update_count,
        tuple(comp) if compensated else None,
    )
