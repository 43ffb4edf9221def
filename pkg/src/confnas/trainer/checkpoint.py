"""Single-file binary checkpoints.

Layout: 16-byte magic, u32 format version, 32-byte config hash (sha256),
u32 block count, then blocks of (u32 name length, name, u64 payload length,
payload), then a trailing 32-byte sha256 of everything before it. Array
blocks are numpy ``.npz`` payloads; the rest is UTF-8 JSON.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct

import numpy as np

from ..expdir import atomic_write_bytes

MAGIC = b"CONFNAS\x00CKPT\x00\x00\x00\x01"
FORMAT_VERSION = 1
assert len(MAGIC) == 16


class CheckpointError(ValueError):
    pass


def _npz(arrays: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return buf.getvalue()


def _unnpz(payload: bytes) -> dict[str, np.ndarray]:
    with np.load(io.BytesIO(payload), allow_pickle=False) as z:
        return {k: z[k] for k in z.files}


def encode(config_hash: str, arrays: dict[str, dict[str, np.ndarray]], meta: dict[str, object]) -> bytes:
    blocks = [(f"npz:{name}", _npz(a)) for name, a in arrays.items()]
    blocks += [(f"json:{name}", json.dumps(m, sort_keys=True).encode("utf-8")) for name, m in meta.items()]
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", FORMAT_VERSION))
    out.write(bytes.fromhex(config_hash))
    out.write(struct.pack("<I", len(blocks)))
    for name, payload in blocks:
        nb = name.encode("utf-8")
        out.write(struct.pack("<I", len(nb)))
        out.write(nb)
        out.write(struct.pack("<Q", len(payload)))
        out.write(payload)
    body = out.getvalue()
    return body + hashlib.sha256(body).digest()


def decode(data: bytes, expected_hash: str | None = None):
    """Returns (config_hash, arrays, meta); rejects bad magic, version, hash or checksum."""
    if len(data) < 16 + 4 + 32 + 4 + 32 or data[:16] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic header)")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint is corrupted (checksum mismatch)")
    (version,) = struct.unpack_from("<I", body, 16)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    config_hash = body[20:52].hex()
    if expected_hash is not None and config_hash != expected_hash:
        raise CheckpointError("checkpoint was written for a different configuration (config hash mismatch)")
    (count,) = struct.unpack_from("<I", body, 52)
    pos = 56
    arrays, meta = {}, {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", body, pos)
        pos += 4
        name = body[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (plen,) = struct.unpack_from("<Q", body, pos)
        pos += 8
        payload = body[pos:pos + plen]
        pos += plen
        kind, _, key = name.partition(":")
        if kind == "npz":
            arrays[key] = _unnpz(payload)
        elif kind == "json":
            meta[key] = json.loads(payload.decode("utf-8"))
        else:
            raise CheckpointError(f"unknown checkpoint block {name!r}")
    if pos != len(body):
        raise CheckpointError("checkpoint has trailing bytes")
    return config_hash, arrays, meta


def save(path, config_hash: str, arrays, meta) -> None:
    atomic_write_bytes(path, encode(config_hash, arrays, meta))


def load(path, expected_hash: str | None = None):
    with open(path, "rb") as fh:
        return decode(fh.read(), expected_hash)
