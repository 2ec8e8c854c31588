"""Flat parameter checkpoints.

Layout::

    EGCN-CKPT 1 <count>\\n
    then <count> records, each a text line ``<name> <dtype> <shape>\\n``
    followed by the raw little-endian values (C order).

``shape`` is ``x``-separated axis lengths, or ``-`` for a scalar.
"""

from __future__ import annotations

import os
from typing import BinaryIO

import numpy as np

MAGIC = "EGCN-CKPT"
VERSION = 1

_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8"), "i8": np.dtype("<i8"), "u1": np.dtype("u1")}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | os.PathLike, records: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        write_records(fh, records)


def write_records(fh: BinaryIO, records: dict[str, np.ndarray]) -> None:
    fh.write(f"{MAGIC} {VERSION} {len(records)}\n".encode())
    for name, arr in records.items():
        if any(ch.isspace() for ch in name):
            raise CheckpointError(f"record name may not contain whitespace: {name!r}")
        arr = np.asarray(arr)
        code = {"f": f"f{arr.dtype.itemsize}", "i": "i8", "u": "u1"}.get(arr.dtype.kind)
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        shape = "x".join(str(n) for n in arr.shape) or "-"
        fh.write(f"{name} {code} {shape}\n".encode())
        fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def load_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return read_records(fh)


def read_records(fh: BinaryIO) -> dict[str, np.ndarray]:
    header = fh.readline().decode(errors="replace").split()
    if len(header) != 3 or header[0] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    if int(header[1]) != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header[1]}")
    out: dict[str, np.ndarray] = {}
    for i in range(int(header[2])):
        line = fh.readline().decode(errors="replace").split()
        if len(line) != 3 or line[1] not in _DTYPES:
            raise CheckpointError(f"malformed record header #{i}")
        name, code, shape_txt = line
        shape = () if shape_txt == "-" else tuple(int(n) for n in shape_txt.split("x"))
        dtype = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        buf = fh.read(nbytes)
        if len(buf) != nbytes:
            raise CheckpointError(f"{name}: truncated record")
        out[name] = np.frombuffer(buf, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    return out
