"""Model checkpoints: named float64 parameter blobs with a config hash.

Layout (all little-endian):

    "ARGW" | u32 version | 32-byte sha256 of the canonical model config |
    u32 param count | per param: u16 name length | name utf-8 | u8 ndim |
    ndim * u32 dims | float64 data | trailing u32 crc32 of everything before

The config hash is compared on load by consumers that need a compatible
architecture (evaluation, heatmaps); a mismatch is an incompatibility, not a
corruption.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

MAGIC = b"ARGW"
VERSION = 1


class CheckpointError(ValueError):
    """Corrupt checkpoint container."""


class CheckpointMismatchError(ValueError):
    """Checkpoint is valid but was trained under a different model config."""


def save_checkpoint(path, named_arrays, config_hash):
    if len(config_hash) != 32:
        raise CheckpointError("config hash must be 32 raw bytes (sha256)")
    parts = [MAGIC, struct.pack("<I", VERSION), bytes(config_hash),
             struct.pack("<I", len(named_arrays))]
    for name in sorted(named_arrays):
        arr = np.ascontiguousarray(named_arrays[name], dtype="<f8")
        enc = name.encode()
        parts.append(struct.pack("<H", len(enc)))
        parts.append(enc)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    payload = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


def load_checkpoint(path, expected_hash=None):
    """Returns (named arrays, config hash); verifies crc and optional hash."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 4:
        raise CheckpointError("file too short to be a checkpoint")
    payload, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if crc != zlib.crc32(payload):
        raise CheckpointError("checkpoint checksum mismatch")
    at = 0

    def take(n, what):
        nonlocal at
        if at + n > len(payload):
            raise CheckpointError(f"truncated checkpoint: {what} at offset {at}")
        out = payload[at:at + n]
        at += n
        return out

    if take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config_hash = take(32, "config hash")
    (count,) = struct.unpack("<I", take(4, "param count"))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode()
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(take(8 * size, f"data for {name}"), dtype="<f8").reshape(shape).copy()
    if expected_hash is not None and bytes(expected_hash) != config_hash:
        raise CheckpointMismatchError(
            "checkpoint was written under a different model configuration "
            f"(stored {config_hash.hex()[:12]}..., expected {bytes(expected_hash).hex()[:12]}...)")
    return arrays, config_hash
