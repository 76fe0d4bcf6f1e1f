"""Binary file formats: VLKD feature matrices and VLKC tensor checkpoints.

VLKD (little-endian): magic b"VLKD", u8 version=1, u32 rows, u32 cols,
then rows*cols f32 row-major.

VLKC: magic b"VLKC", u8 version=1, u32 tensor count, then per tensor:
u16 name length, UTF-8 name, u8 dtype tag (0=f32, 1=u8), u8 rank,
rank x u32 dims, payload little-endian row-major. A JSON config string is
embedded as a u8 tensor named "__config__".
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

VLKD_MAGIC = b"VLKD"
VLKC_MAGIC = b"VLKC"
DTYPE_F32 = 0
DTYPE_U8 = 1

CONFIG_TENSOR = "__config__"


class FormatError(ValueError):
    """Malformed VLKD/VLKC payload."""


def save_matrix(path, matrix) -> None:
    """Write a 2-D f32 matrix in the VLKD format."""
    arr = np.ascontiguousarray(matrix, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError(f"expected 2-D matrix, got rank {arr.ndim}")
    rows, cols = arr.shape
    with open(path, "wb") as f:
        f.write(VLKD_MAGIC)
        f.write(struct.pack("<BII", 1, rows, cols))
        f.write(arr.tobytes())


def load_matrix(path) -> np.ndarray:
    """Read a VLKD matrix; rejects bad magic, truncation, and non-finite values."""
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != VLKD_MAGIC:
        raise FormatError(f"{path}: bad magic at byte offset 0")
    if len(data) < 13:
        raise FormatError(f"{path}: truncated header at byte offset {len(data)}")
    version, rows, cols = struct.unpack_from("<BII", data, 4)
    if version != 1:
        raise FormatError(f"{path}: unsupported version {version} at byte offset 4")
    expected = 13 + 4 * rows * cols
    if len(data) < expected:
        raise FormatError(
            f"{path}: truncated payload at byte offset {len(data)} (expected {expected})"
        )
    arr = np.frombuffer(data[13:expected], dtype="<f4").reshape(rows, cols)
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr.ravel()))[0])
        raise FormatError(f"{path}: non-finite value at byte offset {13 + 4 * bad}")
    return arr.copy()


def save_tensors(path, tensors: dict, config: dict | None = None) -> None:
    """Write named tensors (f32 arrays) plus an embedded JSON config to VLKC.

    Tensor order in the file is sorted by name, so equal contents always
    produce byte-identical files.
    """
    entries = {}
    for name, t in tensors.items():
        arr = np.ascontiguousarray(np.asarray(t), dtype="<f4")
        entries[name] = (DTYPE_F32, arr)
    cfg_bytes = json.dumps(config or {}, sort_keys=True).encode("utf-8")
    entries[CONFIG_TENSOR] = (DTYPE_U8, np.frombuffer(cfg_bytes, dtype=np.uint8))
    with open(path, "wb") as f:
        f.write(VLKC_MAGIC)
        f.write(struct.pack("<BI", 1, len(entries)))
        for name in sorted(entries):
            tag, arr = entries[name]
            name_b = name.encode("utf-8")
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<BB", tag, arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
            f.write(arr.tobytes())


def load_tensors(path) -> tuple[dict, dict]:
    """Read a VLKC file; returns (tensors by name, embedded config dict)."""
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != VLKC_MAGIC:
        raise FormatError(f"{path}: bad magic at byte offset 0")
    if len(data) < 9:
        raise FormatError(f"{path}: truncated header at byte offset {len(data)}")
    version, count = struct.unpack_from("<BI", data, 4)
    if version != 1:
        raise FormatError(f"{path}: unsupported version {version} at byte offset 4")
    off = 9
    tensors = {}
    config = {}
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + name_len].decode("utf-8")
            off += name_len
            tag, rank = struct.unpack_from("<BB", data, off)
            off += 2
            dims = struct.unpack_from(f"<{rank}I", data, off) if rank else ()
            off += 4 * rank
        except struct.error:
            raise FormatError(f"{path}: truncated tensor header at byte offset {off}")
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        if tag == DTYPE_F32:
            nbytes = 4 * n
            dtype = "<f4"
        elif tag == DTYPE_U8:
            nbytes = n
            dtype = np.uint8
        else:
            raise FormatError(f"{path}: unknown dtype tag {tag} at byte offset {off - 2 - 4 * rank}")
        if len(data) < off + nbytes:
            raise FormatError(f"{path}: truncated payload at byte offset {len(data)}")
        arr = np.frombuffer(data[off : off + nbytes], dtype=dtype).reshape(dims).copy()
        off += nbytes
        if name == CONFIG_TENSOR:
            config = json.loads(arr.tobytes().decode("utf-8"))
        else:
            tensors[name] = arr
    return tensors, config
