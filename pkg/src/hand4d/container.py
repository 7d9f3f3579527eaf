"""Sectioned binary container: versioned header, JSON metadata, named arrays.

One format backs both checkpoint files and generated scene files. Arrays are
stored row-major with an explicit dtype tag so files round-trip bit-exactly.
"""

from __future__ import annotations

import json
import struct
from typing import Dict, Tuple

import numpy as np

MAGIC = b"H4DC"
VERSION = 1

_DTYPE_TAGS = {
    np.dtype(np.float32): 0,
    np.dtype(np.float64): 1,
    np.dtype(np.uint8): 2,
    np.dtype(np.int64): 3,
}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def write_container(path, kind: str, meta: dict, arrays: Dict[str, np.ndarray]) -> None:
    """Serialize named arrays plus a metadata dict to ``path``.

    Args:
        path: output file path.
        kind: short ascii role tag ("checkpoint", "scene", ...).
        meta: JSON-serializable metadata; keys are sorted so identical content
            produces identical bytes.
        arrays: name -> ndarray; dtype must be float32/float64/uint8/int64.
    """
    kind_b = kind.encode("ascii")
    if len(kind_b) > 16:
        raise ValueError(f"kind tag too long: {kind!r}")
    meta_b = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")

    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<B", len(kind_b)))
        f.write(kind_b)
        f.write(struct.pack("<I", len(meta_b)))
        f.write(meta_b)
        f.write(struct.pack("<I", len(arrays)))
        # Sorted section order: identical content yields identical bytes.
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name])
            if arr.dtype not in _DTYPE_TAGS:
                raise ValueError(f"unsupported dtype {arr.dtype} for array {name!r}")
            name_b = name.encode("utf-8")
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<B", _DTYPE_TAGS[arr.dtype]))
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes(order="C"))


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise ValueError(f"truncated container: wanted {n} bytes, got {len(buf)}")
    return buf


def read_container(path) -> Tuple[str, dict, Dict[str, np.ndarray]]:
    """Read a container written by :func:`write_container`.

    Returns:
        (kind, meta, arrays) with arrays in file order.
    """
    with open(path, "rb") as f:
        magic = _read_exact(f, 4)
        if magic != MAGIC:
            raise ValueError(f"not a container file: bad magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != VERSION:
            raise ValueError(f"unsupported container version {version}")
        (kind_len,) = struct.unpack("<B", _read_exact(f, 1))
        kind = _read_exact(f, kind_len).decode("ascii")
        (meta_len,) = struct.unpack("<I", _read_exact(f, 4))
        meta = json.loads(_read_exact(f, meta_len).decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        arrays: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2))
            name = _read_exact(f, name_len).decode("utf-8")
            (tag,) = struct.unpack("<B", _read_exact(f, 1))
            (ndim,) = struct.unpack("<B", _read_exact(f, 1))
            shape = struct.unpack(f"<{ndim}Q", _read_exact(f, 8 * ndim)) if ndim else ()
            dtype = _TAG_DTYPES[tag]
            n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
            count_elems = n_bytes // dtype.itemsize
            buf = _read_exact(f, n_bytes)
            arrays[name] = np.frombuffer(buf, dtype=dtype, count=count_elems).reshape(shape).copy()
    return kind, meta, arrays
