"""Binary parameter checkpoints.

Layout: ``b"RATN1\\n"``, then per parameter a little-endian u32 name length,
the UTF-8 name, a u32 rank, one u32 per extent, and the raw little-endian
float32 payload in row-major order.
"""

from __future__ import annotations

import hashlib
import io
import os
import struct
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"RATN1\n"


class CheckpointError(ValueError):
    pass


def dumps(params: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    write(buf, params)
    return buf.getvalue()


def write(fh: BinaryIO, params: Mapping[str, np.ndarray]) -> None:
    fh.write(MAGIC)
    for name, arr in params.items():
        arr = np.asarray(getattr(arr, "values", arr))
        raw = name.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def loads(data: bytes) -> dict[str, np.ndarray]:
    return read(io.BytesIO(data))


def read(fh: BinaryIO) -> dict[str, np.ndarray]:
    if fh.read(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a RATN1 checkpoint (bad magic)")
    out: dict[str, np.ndarray] = {}
    while True:
        head = fh.read(4)
        if not head:
            return out
        if len(head) < 4:
            raise CheckpointError("truncated checkpoint")
        (nlen,) = struct.unpack("<I", head)
        name = fh.read(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", _exact(fh, 4))
        shape = struct.unpack(f"<{rank}I", _exact(fh, 4 * rank))
        count = int(np.prod(shape)) if rank else 1
        payload = _exact(fh, 4 * count)
        out[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)


def _exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def save(path: str | os.PathLike, params: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        write(fh, params)


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return read(fh)


def digest(params: Mapping[str, np.ndarray]) -> str:
    return hashlib.sha256(dumps(params)).hexdigest()
