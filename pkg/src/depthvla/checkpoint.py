"""Binary checkpoint format for named float32 tensors.

Layout (little-endian)::

    b"EVDP"  u32 version  u32 count
    count x [u32 name_len, utf-8 name, u32 rank, rank x u32 dims, f32 payload]
    u64 checksum of all payload bytes (blake2b, 8-byte digest)

Optimizer moments are stored under the ``opt/`` name prefix.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"EVDP"
VERSION = 1


class CheckpointError(IOError):
    pass


def _digest(payloads) -> int:
    h = hashlib.blake2b(digest_size=8)
    for p in payloads:
        h.update(p)
    return struct.unpack("<Q", h.digest())[0]


def save(path, tensors: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    payloads = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise CheckpointError(f"tensor {name!r} has dtype {arr.dtype}; only float32 is stored")
        raw = name.encode("utf-8")
        payload = arr.astype("<f4", copy=False).tobytes()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(payload)
        payloads.append(payload)
    parts.append(struct.pack("<Q", _digest(payloads)))
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(b"".join(parts))
        tmp.replace(path)
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e
    return path


def load(path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        off = 12
        out: dict[str, np.ndarray] = {}
        payloads = []
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            payload = buf[off:off + 4 * size]
            if len(payload) != 4 * size:
                raise CheckpointError(f"{path}: truncated payload for {name!r}")
            off += 4 * size
            payloads.append(payload)
            out[name] = np.frombuffer(payload, "<f4").astype(np.float32).reshape(dims)
        (stored,) = struct.unpack_from("<Q", buf, off)
        off += 8
    except struct.error as e:
        raise CheckpointError(f"{path}: truncated checkpoint ({e})") from e
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    if stored != _digest(payloads):
        raise CheckpointError(f"{path}: checksum mismatch")
    return out
