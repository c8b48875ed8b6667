"""Self-describing binary tensor container.

Layout: magic "RGNET", format version (u16 LE), then repeated records:

    name_len u16 | name UTF-8 | dtype tag u8 | rank u8 | extents u32 x rank
    [int8 records only: scale f64 | zero_point i32] | payload, little-endian

Round-trips are bit-exact. Quantized weights use the int8 tag and carry
their affine scheme inline.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError

MAGIC = b"RGNET"
VERSION = 1

_TAG_TO_DTYPE = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("i1"),
    4: np.dtype("<u8"),
    5: np.dtype("<i8"),
    6: np.dtype("u1"),
}
_DTYPE_TO_TAG = {
    np.dtype(np.float32): 1,
    np.dtype(np.float64): 2,
    np.dtype(np.int8): 3,
    np.dtype(np.uint64): 4,
    np.dtype(np.int64): 5,
    np.dtype(np.uint8): 6,
}


@dataclass
class Record:
    name: str
    array: np.ndarray
    scale: float | None = None       # int8 records only
    zero_point: int | None = None


def write_container(path, records):
    """Write records to path; order is preserved."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", VERSION))
        for rec in records:
            arr = rec.array
            if not arr.flags["C_CONTIGUOUS"]:
                arr = np.ascontiguousarray(arr)  # 0-d arrays are already contiguous
            tag = _DTYPE_TO_TAG.get(arr.dtype)
            if tag is None:
                raise DataError(f"unsupported dtype {arr.dtype} for record {rec.name!r}")
            name_b = rec.name.encode("utf-8")
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<BB", tag, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            if tag == 3:
                if rec.scale is None or rec.zero_point is None:
                    raise DataError(f"int8 record {rec.name!r} needs scale and zero_point")
                f.write(struct.pack("<di", float(rec.scale), int(rec.zero_point)))
            f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_container(path):
    """Read all records; raises DataError on malformed input."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise DataError(f"cannot read container {path}: {e}") from e
    if blob[:5] != MAGIC:
        raise DataError(f"bad magic in {path}: {blob[:5]!r}")
    (version,) = struct.unpack_from("<H", blob, 5)
    if version != VERSION:
        raise DataError(f"unsupported container version {version}")
    pos = 7
    records = []
    while pos < len(blob):
        try:
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + name_len].decode("utf-8")
            pos += name_len
            tag, rank = struct.unpack_from("<BB", blob, pos)
            pos += 2
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            scale = zero_point = None
            if tag == 3:
                scale, zero_point = struct.unpack_from("<di", blob, pos)
                pos += 12
            dtype = _TAG_TO_DTYPE.get(tag)
            if dtype is None:
                raise DataError(f"unknown dtype tag {tag} in record {name!r}")
            count = int(np.prod(shape, dtype=np.int64)) if rank else 1
            nbytes = count * dtype.itemsize
            arr = np.frombuffer(blob, dtype=dtype, count=count, offset=pos).reshape(shape)
            pos += nbytes
        except (struct.error, ValueError, UnicodeDecodeError) as e:
            raise DataError(f"truncated or malformed container {path}: {e}") from e
        records.append(Record(name, arr.copy(), scale, zero_point))
    return records


def records_as_dict(records):
    d = {}
    for rec in records:
        if rec.name in d:
            raise DataError(f"duplicate record name {rec.name!r}")
        d[rec.name] = rec
    return d
