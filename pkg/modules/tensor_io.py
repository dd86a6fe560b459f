"""
tensor_io.py — Flat binary tensor container with a JSON sidecar.

A tensor `name.bin` is the raw row-major little-endian buffer; `name.json`
next to it records shape, dtype and the sha256 of the buffer.  Reading
verifies the checksum, so a truncated or edited file raises ChecksumError.
"""

import hashlib
import json
import os
from pathlib import Path
from typing import Union

import numpy as np

from config import TENSOR_FORMAT_VERSION
from modules.errors import ChecksumError, DataError

PathLike = Union[str, os.PathLike]

_ALLOWED_DTYPES = {"float32": "<f4", "int64": "<i8"}


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def save_tensor(path: PathLike, array: np.ndarray) -> str:
    """Write *array* to `path` (+ sidecar) and return its checksum."""
    path = Path(path)
    dtype_name = str(array.dtype)
    if dtype_name not in _ALLOWED_DTYPES:
        raise DataError(f"unsupported tensor dtype {dtype_name}; use float32 or int64")

    data = np.ascontiguousarray(array, dtype=_ALLOWED_DTYPES[dtype_name]).tobytes()
    checksum = sha256_bytes(data)
    path.parent.mkdir(parents=True, exist_ok=True)

    tmp = path.with_suffix(".bin.tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    meta = {
        "format_version": TENSOR_FORMAT_VERSION,
        "shape": list(array.shape),
        "dtype": dtype_name,
        "sha256": checksum,
    }
    _sidecar(path).write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return checksum


def read_meta(path: PathLike) -> dict:
    side = _sidecar(Path(path))
    try:
        return json.loads(side.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"missing tensor sidecar {side}")
    except json.JSONDecodeError as exc:
        raise ChecksumError(f"corrupted tensor sidecar {side}: {exc}")


def load_tensor(path: PathLike) -> np.ndarray:
    """Read a tensor written by `save_tensor`, verifying shape and checksum."""
    path = Path(path)
    meta = read_meta(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"missing tensor file {path}")

    if sha256_bytes(data) != meta.get("sha256"):
        raise ChecksumError(f"checksum mismatch for {path}")

    dtype = _ALLOWED_DTYPES.get(meta.get("dtype", ""))
    if dtype is None:
        raise DataError(f"unsupported dtype in {path}: {meta.get('dtype')}")
    shape = tuple(meta["shape"])
    array = np.frombuffer(data, dtype=dtype)
    if array.size != int(np.prod(shape, dtype=np.int64)):
        raise ChecksumError(f"size of {path} does not match recorded shape {shape}")
    return array.reshape(shape).astype(meta["dtype"], copy=True)
