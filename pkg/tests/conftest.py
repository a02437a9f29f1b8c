import numpy as np
import pytest

from fedagg.model import Dtype, LayerSpec, LayerTensor, ModelSchema, ModelUpdate


def make_schema(*layer_sizes: int, dtype: Dtype = Dtype.F32, rank2: bool = False) -> ModelSchema:
    specs = []
    for i, n in enumerate(layer_sizes):
        shape = (n,) if not rank2 else (1, n)
        specs.append(LayerSpec(f"layer{i}", dtype, shape))
    return ModelSchema(tuple(specs))


def make_update(client_id: str, values, sample_count: int = 1, round_no: int = 0,
                dtype: Dtype = Dtype.F32) -> ModelUpdate:
    """One-layer update from a plain list of floats."""
    data = np.asarray(values, dtype=dtype.numpy_dtype)
    layer = LayerTensor("w", dtype, (len(values),), data)
    return ModelUpdate(client_id, round_no, sample_count, (layer,))


@pytest.fixture
def tiny_schema() -> ModelSchema:
    # matches make_update's single layer
    return ModelSchema((LayerSpec("w", Dtype.F32, (2,)),))
