"""Model-update data model: layered weight tensors plus per-client sample counts.

All types are immutable after construction (arrays are frozen), so values can
be shared freely across threads. Invariants are enforced by the constructors;
downstream code never needs to re-validate.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import SchemaMismatch


class Dtype(Enum):
    """Element type of all layers in one schema; homogeneous per schema."""

    F32 = ("f32", 0, 4)
    F64 = ("f64", 1, 8)

    def __init__(self, label: str, wire_code: int, width: int):
        self.label = label
        self.wire_code = wire_code
        self.width = width

    @property
    def numpy_dtype(self) -> np.dtype:
        return np.dtype("<f4") if self is Dtype.F32 else np.dtype("<f8")

    @classmethod
    def from_wire(cls, code: int) -> "Dtype":
        for d in cls:
            if d.wire_code == code:
                return d
        raise ValueError(f"unknown dtype code {code}")


def _freeze(arr: np.ndarray) -> np.ndarray:
    if arr.flags.writeable:
        arr = arr.copy() if arr.base is not None else arr
        arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class LayerTensor:
    """One named weight tensor, stored as a flat row-major array."""

    name: str
    dtype: Dtype
    shape: tuple[int, ...]
    data: np.ndarray

    def __post_init__(self):
        if not self.name:
            raise ValueError("layer name must be non-empty")
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        if not self.shape or any(d <= 0 for d in self.shape):
            raise ValueError(f"layer {self.name!r}: shape must be non-empty with positive dims")
        arr = np.ascontiguousarray(self.data, dtype=self.dtype.numpy_dtype).reshape(-1)
        if arr.size != self.element_count:
            raise ValueError(
                f"layer {self.name!r}: data length {arr.size} != product of shape "
                f"{self.element_count}"
            )
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def element_count(self) -> int:
        return math.prod(self.shape)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LayerTensor):
            return NotImplemented
        return (
            self.name == other.name
            and self.dtype is other.dtype
            and self.shape == other.shape
            and self.data.tobytes() == other.data.tobytes()
        )


@dataclass(frozen=True)
class LayerSpec:
    name: str
    dtype: Dtype
    shape: tuple[int, ...]


@dataclass(frozen=True)
class ModelSchema:
    """Ordered (name, dtype, shape) triples; two updates fuse iff schemas are equal."""

    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("schema must have at least one layer")
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique within a schema")
        dtypes = {l.dtype for l in self.layers}
        if len(dtypes) != 1:
            raise ValueError("all layers of one schema must share one dtype")

    @property
    def dtype(self) -> Dtype:
        return self.layers[0].dtype

    @property
    def element_count(self) -> int:
        return sum(math.prod(l.shape) for l in self.layers)

    def digest(self) -> str:
        """Stable hex digest used in manifests and round advertisements."""
        h = hashlib.sha256()
        for l in self.layers:
            h.update(l.name.encode("utf-8"))
            h.update(b"\x00")
            h.update(l.dtype.label.encode())
            h.update(",".join(str(d) for d in l.shape).encode())
            h.update(b"\x00")
        return h.hexdigest()


@dataclass(frozen=True, eq=False)
class ModelUpdate:
    """One client's contribution for a round: weight tensors plus sample count."""

    client_id: str
    round: int
    sample_count: int
    layers: tuple[LayerTensor, ...]

    def __post_init__(self):
        if not self.client_id:
            raise ValueError("client_id must be non-empty")
        if self.round < 0:
            raise ValueError("round must be non-negative")
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("an update must carry at least one layer")
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique within an update")

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModelUpdate):
            return NotImplemented
        return (
            self.client_id == other.client_id
            and self.round == other.round
            and self.sample_count == other.sample_count
            and self.layers == other.layers
        )


@dataclass(frozen=True, eq=False)
class GlobalModel:
    """The fused model for a round; schema equals the round's input schema."""

    round: int
    layers: tuple[LayerTensor, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("a global model must carry at least one layer")

    def __eq__(self, other) -> bool:
        if not isinstance(other, GlobalModel):
            return NotImplemented
        return self.round == other.round and self.layers == other.layers


def schema_of(u: ModelUpdate | GlobalModel) -> ModelSchema:
    return ModelSchema(tuple(LayerSpec(l.name, l.dtype, l.shape) for l in u.layers))


def check_compatible(a: ModelSchema, b: ModelSchema) -> None:
    """Raise SchemaMismatch naming the first differing layer attribute."""
    if len(a.layers) != len(b.layers):
        raise SchemaMismatch(f"layer count differs: {len(a.layers)} vs {len(b.layers)}")
    for i, (la, lb) in enumerate(zip(a.layers, b.layers)):
        if la.name != lb.name:
            raise SchemaMismatch(f"layer {i}: name {la.name!r} vs {lb.name!r}")
        if la.dtype is not lb.dtype:
            raise SchemaMismatch(f"layer {i} ({la.name!r}): dtype {la.dtype.label} vs {lb.dtype.label}")
        if la.shape != lb.shape:
            raise SchemaMismatch(f"layer {i} ({la.name!r}): shape {la.shape} vs {lb.shape}")


def synth_update(
    seed: int,
    schema: ModelSchema,
    client_id: str,
    round: int = 0,
    sample_count: int = 1,
) -> ModelUpdate:
    """Deterministic pseudo-random update with values in [-1, 1].

    The data stream depends only on (seed, schema): the same pair always
    produces bit-identical tensors regardless of client_id or round.
    """
    rng = np.random.default_rng(seed)
    layers = []
    for spec in schema.layers:
        n = math.prod(spec.shape)
        data = rng.uniform(-1.0, 1.0, size=n).astype(spec.dtype.numpy_dtype)
        layers.append(LayerTensor(spec.name, spec.dtype, spec.shape, data))
    return ModelUpdate(client_id=client_id, round=round, sample_count=sample_count, layers=tuple(layers))
