"""Binary tensor records: named arrays with explicit shape, little-endian.

Record layout:
  name length  uint32
  name bytes   utf-8
  dtype code   uint8   (0 = float32, 1 = float64, 2 = int64)
  rank         int64
  extents      int64 * rank
  values       raw little-endian, C order
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

_DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i8"): 2,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}

MAX_NAME_LEN = 4096


class TensorFormatError(ValueError):
    """The byte stream does not hold a well-formed tensor record."""


def write_tensor(fh: BinaryIO, name: str, arr: np.ndarray) -> None:
    data = np.ascontiguousarray(arr)
    dt = data.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise TensorFormatError(f"unsupported dtype {data.dtype} for tensor {name!r}")
    nb = name.encode("utf-8")
    if not nb or len(nb) > MAX_NAME_LEN:
        raise TensorFormatError(f"bad tensor name {name!r}")
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<B", _DTYPE_CODES[dt]))
    fh.write(struct.pack("<q", data.ndim))
    fh.write(struct.pack(f"<{data.ndim}q", *data.shape))
    fh.write(data.astype(dt, copy=False).tobytes(order="C"))


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TensorFormatError(f"truncated record: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(fh: BinaryIO) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
    if not 0 < name_len <= MAX_NAME_LEN:
        raise TensorFormatError(f"implausible name length {name_len}")
    name = _read_exact(fh, name_len).decode("utf-8")
    (code,) = struct.unpack("<B", _read_exact(fh, 1))
    if code not in _CODE_DTYPES:
        raise TensorFormatError(f"unknown dtype code {code} in tensor {name!r}")
    (rank,) = struct.unpack("<q", _read_exact(fh, 8))
    if not 0 <= rank <= 8:
        raise TensorFormatError(f"implausible rank {rank} in tensor {name!r}")
    shape = struct.unpack(f"<{rank}q", _read_exact(fh, 8 * rank))
    if any(s < 0 for s in shape):
        raise TensorFormatError(f"negative extent in tensor {name!r}")
    dt = _CODE_DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    raw = _read_exact(fh, count * dt.itemsize)
    arr = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
    return name, arr
