"""Flat binary tensor files with JSON sidecar metadata.

A tensor named ``x`` lives in two files: ``x.f32`` holds the raw values as
little-endian 32-bit floats in row-major order, and ``x.meta.json`` declares
``{"shape": [...], "dtype": "f32", "order": "row-major"}``. The format is
deliberately toolchain-neutral; loaders cross-check the declared shape
against the file's byte count before touching the data.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

F32 = np.dtype("<f4")
ITEM_BYTES = 4


class TensorIOError(RuntimeError):
    """Raised when a tensor file and its sidecar disagree or are malformed."""


def sidecar_path(data_path: Path | str) -> Path:
    return Path(data_path).with_suffix(".meta.json")


def write_tensor(path: Path | str, array: np.ndarray) -> Path:
    """Write `array` as `<path>.f32` plus sidecar, returning the data path.

    The array is cast to little-endian float32; values must be finite-safe
    castable (no object dtype). `path` may be given with or without the
    ``.f32`` suffix.
    """
    path = Path(path)
    if path.suffix != ".f32":
        path = path.with_suffix(".f32")
    data = np.ascontiguousarray(array, dtype=F32)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data.tobytes())
    meta = {"shape": list(data.shape), "dtype": "f32", "order": "row-major"}
    sidecar_path(path).write_text(json.dumps(meta, sort_keys=True))
    return path


def read_sidecar(path: Path | str) -> tuple[int, ...]:
    """Return the declared shape for the tensor at `path` (the .f32 file)."""
    side = sidecar_path(path)
    if not side.exists():
        raise TensorIOError(f"missing sidecar {side}")
    meta = json.loads(side.read_text())
    if meta.get("dtype") != "f32" or meta.get("order") != "row-major":
        raise TensorIOError(f"unsupported tensor metadata in {side}: {meta}")
    shape = tuple(int(s) for s in meta["shape"])
    if any(s < 0 for s in shape):
        raise TensorIOError(f"negative dimension in {side}: {shape}")
    return shape


def check_tensor_file(path: Path | str) -> tuple[int, ...]:
    """Validate byte count against the sidecar without reading the data."""
    path = Path(path)
    if not path.exists():
        raise TensorIOError(f"missing tensor file {path}")
    shape = read_sidecar(path)
    expected = int(np.prod(shape, dtype=np.int64)) * ITEM_BYTES
    actual = path.stat().st_size
    if actual != expected:
        raise TensorIOError(
            f"{path}: declared shape {shape} needs {expected} bytes, file has {actual}"
        )
    return shape


def read_tensor(path: Path | str) -> np.ndarray:
    """Load a tensor, returning a read-only float32 array."""
    path = Path(path)
    shape = check_tensor_file(path)
    data = np.frombuffer(path.read_bytes(), dtype=F32).reshape(shape)
    data.flags.writeable = False
    return data
