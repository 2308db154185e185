"""MFT1 binary tensor container.

Layout, all little-endian, no padding:

    bytes 0-3   magic ``MFT1``
    u32         tensor count
    per tensor  u16 name length, UTF-8 name, u8 dtype (0=f32, 1=f64),
                u8 rank, rank x u64 dims
    payloads    raw row-major tensor bytes, in header order

Round-trips are byte-exact; malformed input raises ``FormatError`` with
the byte offset of the failure.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ContractError, FormatError

MAGIC = b"MFT1"

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named tensors in dict insertion order."""
    header = [MAGIC, struct.pack("<I", len(tensors))]
    payloads = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            raise ContractError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        if not np.isfinite(arr).all():
            raise ContractError(f"tensor {name!r} contains non-finite values")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ContractError(f"tensor name too long: {name!r}")
        header.append(struct.pack("<H", len(encoded)))
        header.append(encoded)
        header.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        header.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        payloads.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C"))
    with open(path, "wb") as fh:
        for chunk in header:
            fh.write(chunk)
        for chunk in payloads:
            fh.write(chunk)


def read_tensors(path) -> dict[str, np.ndarray]:
    """Read an MFT1 file back into an ordered name -> array dict."""
    with open(path, "rb") as fh:
        blob = fh.read()

    off = 0

    def need(nbytes, what):
        nonlocal off
        if off + nbytes > len(blob):
            raise FormatError(f"truncated reading {what} at byte {off}")
        piece = blob[off:off + nbytes]
        off += nbytes
        return piece

    magic = need(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at byte 0")
    (count,) = struct.unpack("<I", need(4, "tensor count"))

    entries = []
    for i in range(count):
        (name_len,) = struct.unpack("<H", need(2, f"name length of tensor {i}"))
        try:
            name = need(name_len, f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"invalid UTF-8 name for tensor {i} at byte {off - name_len}")
        code, rank = struct.unpack("<BB", need(2, f"dtype/rank of {name!r}"))
        if code not in _CODE_DTYPES:
            raise FormatError(f"unknown dtype code {code} for {name!r} at byte {off - 2}")
        dims = struct.unpack(f"<{rank}Q", need(8 * rank, f"dims of {name!r}"))
        entries.append((name, _CODE_DTYPES[code], dims))

    out: dict[str, np.ndarray] = {}
    for name, dtype, dims in entries:
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        raw = need(nbytes, f"payload of {name!r}")
        arr = np.frombuffer(raw, dtype=dtype).reshape(dims)
        out[name] = np.ascontiguousarray(arr).astype(dtype.newbyteorder("="))
    if off != len(blob):
        raise FormatError(f"{len(blob) - off} trailing bytes at byte {off}")
    return out
