"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"GSHD"                      magic
    u32                          format version
    u64                          step
    u32 + bytes                  RNG state blob (length-prefixed)
    repeated until EOF:
        u32 + bytes              parameter name, UTF-8
        u32                      rank
        u64 * rank               extents
        f64 * prod(extents)      payload, row-major
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .nets import Checkpoint, Network

MAGIC = b"GSHD"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def dumps(ckpt: Checkpoint) -> bytes:
    out = [MAGIC, struct.pack("<IQ", ckpt.version, ckpt.step), struct.pack("<I", len(ckpt.rng_state)), ckpt.rng_state]
    for name, t in ckpt.params.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<I", len(t.shape)))
        out.append(struct.pack(f"<{len(t.shape)}Q", *t.shape))
        out.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(out)


def loads(buf: bytes) -> Checkpoint:
    view = memoryview(buf)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointFormatError(f"truncated checkpoint: need {n} bytes at offset {pos}, have {len(view) - pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointFormatError("bad magic; not a GSHD checkpoint")
    version, step = struct.unpack("<IQ", take(12))
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    (blob_len,) = struct.unpack("<I", take(4))
    rng_state = bytes(take(blob_len))
    params = {}
    while pos < len(view):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        if name in params:
            raise CheckpointFormatError(f"duplicate parameter {name!r}")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape)
        params[name] = Tensor(arr)
    return Checkpoint(step=step, params=params, rng_state=rng_state, version=version)


def save(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(ckpt))


def load(path) -> Checkpoint:
    return loads(Path(path).read_bytes())


def from_network(net: Network, step: int = 0, prefix: str = "", rng_state: bytes = b"") -> Checkpoint:
    return Checkpoint(step, {prefix + k: v for k, v in net.params.items()}, rng_state)
