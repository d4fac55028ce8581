"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    magic        8 bytes  b"RESTLAB\\x00"
    version      u16
    arch id      u16 length + utf-8 bytes
    n params     u32
    per param:   u16 name length + utf-8 name, u8 ndim, ndim x u32 dims,
                 prod(dims) x float32
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"RESTLAB\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def dumps(arch_id: str, params: "OrderedDict[str, np.ndarray]") -> bytes:
    chunks = [MAGIC, struct.pack("<H", FORMAT_VERSION), _pack_str(arch_id),
              struct.pack("<I", len(params))]
    for name, arr in params.items():
        arr = np.asarray(arr)
        chunks.append(_pack_str(name))
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def loads(blob: bytes, expect_arch: str | None = None) -> tuple[str, "OrderedDict[str, np.ndarray]"]:
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    def take_str():
        (n,) = struct.unpack("<H", take(2))
        return bytes(take(n)).decode("utf-8")

    if bytes(take(len(MAGIC))) != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    (version,) = struct.unpack("<H", take(2))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    arch = take_str()
    if expect_arch is not None and arch != expect_arch:
        raise CheckpointError(f"architecture mismatch: file has {arch!r}, expected {expect_arch!r}")
    (count,) = struct.unpack("<I", take(4))
    params: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        name = take_str()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(bytes(take(4 * n)), dtype="<f4").astype(np.float32)
        params[name] = data.reshape(shape)
    if pos != len(view):
        raise CheckpointError("trailing bytes after last parameter")
    return arch, params


def save(path, arch_id: str, params) -> None:
    Path(path).write_bytes(dumps(arch_id, params))


def load(path, expect_arch: str | None = None):
    return loads(Path(path).read_bytes(), expect_arch)
