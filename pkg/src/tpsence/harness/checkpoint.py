"""Binary checkpoint format.

Layout, all integers little-endian::

    b"TPSN"                      magic
    u32  version
    u32  tensor count
    per tensor:
        u32  name length, name bytes (utf-8)
        u32  rank
        u64  dimension sizes (rank of them)
        f32  payload, row-major
    32 bytes  sha256 digest of the training config
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"TPSN"
VERSION = 1
DIGEST_SIZE = 32


class CheckpointError(ValueError):
    pass


def encode(tensors: Mapping[str, np.ndarray], digest: bytes) -> bytes:
    if len(digest) != DIGEST_SIZE:
        raise CheckpointError(f"config digest must be {DIGEST_SIZE} bytes")
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    parts.append(digest)
    return b"".join(parts)


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], bytes]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic bytes")
    try:
        version, count = struct.unpack_from("<II", blob, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            n = int(np.prod(shape)) if rank else 1
            if pos + 4 * n > len(blob):
                raise CheckpointError(f"truncated payload for {name}")
            out[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(shape).copy()
            pos += 4 * n
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    digest = blob[pos:pos + DIGEST_SIZE]
    if len(digest) != DIGEST_SIZE or pos + DIGEST_SIZE != len(blob):
        raise CheckpointError("missing or malformed trailing config digest")
    return out, digest


def save(path, tensors: Mapping[str, np.ndarray], digest: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(tensors, digest))
    return path


def load(path, expected_digest: bytes | None = None) -> tuple[dict[str, np.ndarray], bytes]:
    """Read a checkpoint; raise if ``expected_digest`` is given and differs."""
    tensors, digest = decode(Path(path).read_bytes())
    if expected_digest is not None and digest != expected_digest:
        raise CheckpointError("config digest mismatch: checkpoint was written under a different config")
    return tensors, digest
