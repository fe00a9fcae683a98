"""Binary containers.

SAGG holds one matrix::

    b"SAGG" | version u32 | dtype u8 | rows u64 | cols u64 | payload

dtype 0 is float32, row-major. dtype 1 is packed bits: ``cols`` is the bit
length of each row and every row occupies ``ceil(cols / 64)`` uint64 words,
bit ``j`` living in word ``j // 64`` at position ``j % 64``. All integers
are little-endian.

SAGM holds a model as named float64 arrays::

    b"SAGM" | version u32 | kind (u16 len + utf8) | meta (u32 len + JSON)
    | count u32 | shape table (u16 len + name, ndim u8, dims u64...) | payload
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

from slideagg.errors import FormatError

SAGG_MAGIC = b"SAGG"
SAGM_MAGIC = b"SAGM"
FORMAT_VERSION = 1

DTYPE_F32 = 0
DTYPE_BITS = 1

_SAGG_HEADER = struct.Struct("<4sIBQQ")


def words_for_bits(nbits: int) -> int:
    return (nbits + 63) // 64


def encode_matrix(matrix: np.ndarray, *, nbits: int | None = None) -> bytes:
    """Serialize a float matrix, or a packed uint64 matrix when ``nbits`` is given."""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise FormatError(f"expected a 2-D matrix, got shape {matrix.shape}")
    rows = matrix.shape[0]
    if nbits is None:
        payload = np.ascontiguousarray(matrix, dtype="<f4").tobytes()
        return _SAGG_HEADER.pack(SAGG_MAGIC, FORMAT_VERSION, DTYPE_F32, rows, matrix.shape[1]) + payload
    if matrix.shape[1] != words_for_bits(nbits):
        raise FormatError(
            f"packed matrix has {matrix.shape[1]} words per row, {nbits} bits need {words_for_bits(nbits)}"
        )
    payload = np.ascontiguousarray(matrix, dtype="<u8").tobytes()
    return _SAGG_HEADER.pack(SAGG_MAGIC, FORMAT_VERSION, DTYPE_BITS, rows, nbits) + payload


def decode_matrix(data: bytes, *, expect_dtype: int | None = None) -> tuple[np.ndarray, int]:
    """Parse SAGG bytes. Returns ``(matrix, dtype_code)``.

    Packed matrices come back as uint64 with shape ``(rows, words)``; the bit
    length is ``cols`` from the header and is recoverable via
    :func:`read_header`.
    """
    if len(data) < _SAGG_HEADER.size:
        raise FormatError("truncated header")
    magic, version, dtype, rows, cols = _SAGG_HEADER.unpack_from(data)
    if magic != SAGG_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported SAGG version {version}")
    if expect_dtype is not None and dtype != expect_dtype:
        raise FormatError(f"dtype mismatch: file has code {dtype}, expected {expect_dtype}")
    if dtype == DTYPE_F32:
        width, np_dtype = cols, np.dtype("<f4")
    elif dtype == DTYPE_BITS:
        width, np_dtype = words_for_bits(cols), np.dtype("<u8")
    else:
        raise FormatError(f"unknown dtype code {dtype}")
    need = rows * width * np_dtype.itemsize
    body = memoryview(data)[_SAGG_HEADER.size:]
    if len(body) < need:
        raise FormatError(f"truncated payload: header declares {rows}x{cols}, {need} bytes needed, {len(body)} present")
    if len(body) > need:
        raise FormatError(f"trailing bytes after payload ({len(body) - need})")
    matrix = np.frombuffer(body, dtype=np_dtype, count=rows * width).reshape(rows, width)
    return matrix.copy(), dtype


def read_header(path: str | Path) -> tuple[int, int, int]:
    """``(dtype, rows, cols)`` of a SAGG file without loading the payload."""
    with open(path, "rb") as fh:
        head = fh.read(_SAGG_HEADER.size)
    if len(head) < _SAGG_HEADER.size:
        raise FormatError("truncated header")
    magic, _version, dtype, rows, cols = _SAGG_HEADER.unpack(head)
    if magic != SAGG_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    return dtype, rows, cols


def save_patch_matrix(path: str | Path, matrix: np.ndarray) -> None:
    Path(path).write_bytes(encode_matrix(np.asarray(matrix, dtype=np.float32)))


def load_patch_matrix(path: str | Path) -> np.ndarray:
    """Load a float32 SAGG matrix."""
    matrix, _ = decode_matrix(Path(path).read_bytes(), expect_dtype=DTYPE_F32)
    return matrix


def save_packed_bits(path: str | Path, words: np.ndarray, nbits: int) -> None:
    Path(path).write_bytes(encode_matrix(words, nbits=nbits))


def load_packed_bits(path: str | Path) -> tuple[np.ndarray, int]:
    data = Path(path).read_bytes()
    matrix, _ = decode_matrix(data, expect_dtype=DTYPE_BITS)
    _, _, _, _, nbits = _SAGG_HEADER.unpack_from(data)
    return matrix, nbits


# -- SAGM -------------------------------------------------------------------


def encode_model(kind: str, arrays: dict[str, np.ndarray], meta: dict[str, Any] | None = None) -> bytes:
    kind_b = kind.encode()
    meta_b = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [
        SAGM_MAGIC,
        struct.pack("<IH", FORMAT_VERSION, len(kind_b)),
        kind_b,
        struct.pack("<I", len(meta_b)),
        meta_b,
        struct.pack("<I", len(arrays)),
    ]
    payload = []
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        name_b = name.encode()
        parts.append(struct.pack("<H", len(name_b)) + name_b)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        payload.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts + payload)


def decode_model(data: bytes) -> tuple[str, dict[str, np.ndarray], dict[str, Any]]:
    """Inverse of :func:`encode_model`: ``(kind, arrays, meta)``."""
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError("truncated SAGM container")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != SAGM_MAGIC:
        raise FormatError("bad magic")
    version, kind_len = struct.unpack("<IH", take(6))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported SAGM version {version}")
    kind = bytes(take(kind_len)).decode()
    (meta_len,) = struct.unpack("<I", take(4))
    meta = json.loads(bytes(take(meta_len)).decode())
    (count,) = struct.unpack("<I", take(4))
    table = []
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        table.append((name, shape))
    arrays = {}
    for name, shape in table:
        n = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(view):
        raise FormatError("trailing bytes in SAGM container")
    return kind, arrays, meta


def save_model_file(path: str | Path, kind: str, arrays: dict[str, np.ndarray], meta: dict[str, Any] | None = None) -> None:
    Path(path).write_bytes(encode_model(kind, arrays, meta))


def load_model_file(path: str | Path) -> tuple[str, dict[str, np.ndarray], dict[str, Any]]:
    return decode_model(Path(path).read_bytes())
