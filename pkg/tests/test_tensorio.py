import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tribe import tensorio
from tribe.tensorio import TensorIOError


def test_round_trip_preserves_bits(tmp_path):
    x = np.random.default_rng(0).standard_normal((5, 3, 2)).astype(np.float32)
    path = tensorio.write_tensor(tmp_path / "a.f32", x)
    y = tensorio.read_tensor(path)
    assert y.shape == x.shape
    assert y.dtype == np.float32
    assert np.array_equal(x.view(np.uint32), y.view(np.uint32))


def test_sidecar_records_shape_and_dtype(tmp_path):
    x = np.zeros((4, 7), dtype=np.float32)
    tensorio.write_tensor(tmp_path / "b.f32", x)
    doc = json.loads((tmp_path / "b.meta.json").read_text())
    assert doc["shape"] == [4, 7]
    assert doc["dtype"] == "f32"
    assert doc["order"] == "row-major"


def test_write_rejects_non_float32_silent_cast(tmp_path):
    # float64 input is cast explicitly, never truncated silently
    x = np.arange(6, dtype=np.float64).reshape(2, 3)
    tensorio.write_tensor(tmp_path / "c.f32", x)
    y = tensorio.read_tensor(tmp_path / "c.f32")
    assert y.dtype == np.float32
    np.testing.assert_array_equal(y, x.astype(np.float32))


def test_read_missing_sidecar_raises(tmp_path):
    (tmp_path / "d.f32").write_bytes(b"\x00" * 8)
    with pytest.raises(TensorIOError):
        tensorio.read_tensor(tmp_path / "d.f32")


def test_check_detects_size_mismatch(tmp_path):
    x = np.zeros((3, 3), dtype=np.float32)
    tensorio.write_tensor(tmp_path / "e.f32", x)
    (tmp_path / "e.f32").write_bytes(b"\x00" * 4)  # truncate blob
    with pytest.raises(TensorIOError):
        tensorio.check_tensor_file(tmp_path / "e.f32")


def test_read_is_read_only(tmp_path):
    tensorio.write_tensor(tmp_path / "f.f32", np.ones((2, 2), dtype=np.float32))
    y = tensorio.read_tensor(tmp_path / "f.f32")
    with pytest.raises(ValueError):
        y[0, 0] = 5.0


@settings(max_examples=25, deadline=None)
@given(
    shape=st.lists(st.integers(1, 5), min_size=1, max_size=4),
    seed=st.integers(0, 2**31),
)
def test_round_trip_property(tmp_path_factory, shape, seed):
    x = np.random.default_rng(seed).standard_normal(tuple(shape)).astype(np.float32)
    root = tmp_path_factory.mktemp("tio")
    tensorio.write_tensor(root / "x.f32", x)
    y = tensorio.read_tensor(root / "x.f32")
    assert np.array_equal(x, y)
    assert tensorio.check_tensor_file(root / "x.f32") == tuple(shape)
