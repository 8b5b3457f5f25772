"""TSE1 tensor files.

Layout (little-endian): magic ``b"TSE1"``, u32 tensor count, then per tensor
u16 name length, UTF-8 name, u8 rank, ``rank`` u32 extents and the float32
data in row-major order.
"""

from __future__ import annotations

import os
import struct
import tempfile
from collections import OrderedDict

import numpy as np

MAGIC = b"TSE1"


class CheckpointError(ValueError):
    pass


def encode(tensors) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4", order="C")  # keeps rank 0, unlike ascontiguousarray
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]!r}...")
        if arr.ndim > 255:
            raise CheckpointError(f"tensor {name!r} has rank {arr.ndim} > 255")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> OrderedDict:
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError("truncated checkpoint")
        out = buf[pos : pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4))
    out = OrderedDict()
    for _ in range(count):
        (n_name,) = struct.unpack("<H", take(2))
        name = take(n_name).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).copy()
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after {count} tensors")
    return out


def default_file_mode():
    """Mode a plain ``open(..., "w")`` would give under the current umask."""
    mask = os.umask(0)
    os.umask(mask)
    return 0o666 & ~mask


def atomic_write(path, data: bytes):
    """Write via a temporary file in the same directory, then rename."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, default_file_mode())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, tensors):
    atomic_write(path, encode(tensors))


def load(path) -> OrderedDict:
    with open(path, "rb") as fh:
        try:
            return decode(fh.read())
        except CheckpointError as exc:
            raise CheckpointError(f"{path}: {exc}") from None


def save_model(path, model):
    save(path, model.state_dict())


def load_model(path, model):
    model.load_state_dict(load(path))
    return model
