"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    b"MDFI1"
    repeated until EOF:
        uint32  name length in bytes
        bytes   name (UTF-8)
        uint32  rank
        uint64  dims[rank]
        float64 values[prod(dims)]   row-major, little-endian

Records are written in sorted name order so equal parameter sets give equal files.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping, Union

import numpy as np

from .tensor import Tensor

MAGIC = b"MDFI1"


class CheckpointError(ValueError):
    pass


def dumps(params: Mapping[str, Union[Tensor, np.ndarray]]) -> bytes:
    parts = [MAGIC]
    for name in sorted(params):
        arr = params[name]
        arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if not blob.startswith(MAGIC):
        raise CheckpointError("not a checkpoint: bad magic")
    out: dict[str, np.ndarray] = {}
    pos = len(MAGIC)
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 8 * count > len(blob):
                raise CheckpointError(f"truncated record {name!r}")
            out[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(dims)
            pos += 8 * count
    except struct.error as exc:
        raise CheckpointError("truncated checkpoint") from exc
    return out


def save(params: Mapping[str, Union[Tensor, np.ndarray]], path: Union[str, Path]) -> None:
    Path(path).write_bytes(dumps(params))


def load(path: Union[str, Path]) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
