"""Versioned binary weight files.

Layout ("R2PW" format, all little-endian):

  magic "R2PW" | u8 version | u32 config hash | u32 tensor count
  per tensor:  u16 name length | name utf-8 | u8 rank | u32 per dim | f32 payload
  trailer:     u32 CRC32 over every tensor record

The config hash fingerprints the architecture dict the weights were built
for; loading under a different-but-shape-compatible architecture warns,
while a shape difference is an error that names the offending tensor.
"""

from __future__ import annotations

import json
import struct
import warnings
import zlib

import numpy as np

from .backbone import ModelParams, init_params

MAGIC = b"R2PW"
VERSION = 1
_HEADER = struct.Struct("<4sBII")


class CheckpointError(RuntimeError):
    """Malformed weight file (magic, version, truncation, count)."""


class ChecksumError(CheckpointError):
    """Payload CRC32 does not match the trailer."""


class ShapeMismatchError(CheckpointError):
    """Stored tensor shapes disagree with the requested architecture."""


def config_hash(arch: dict) -> int:
    """CRC32 of the canonical JSON encoding of the architecture dict."""
    canon = json.dumps(arch, sort_keys=True, separators=(",", ":"))
    return zlib.crc32(canon.encode("utf-8")) & 0xFFFFFFFF


def serialize_params(params: ModelParams) -> bytes:
    records = bytearray()
    named = params.named()
    for name, tensor in named:
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(tensor.data, dtype=np.float32)
        records += struct.pack("<H", len(raw)) + raw
        records += struct.pack("<B", arr.ndim)
        records += struct.pack(f"<{arr.ndim}I", *arr.shape)
        records += arr.tobytes()
    header = _HEADER.pack(MAGIC, VERSION, config_hash(params.arch),
                          len(named))
    return header + bytes(records) + struct.pack("<I", zlib.crc32(bytes(records)))


def deserialize_params(blob: bytes, arch: dict) -> ModelParams:
    if len(blob) < _HEADER.size + 4:
        raise CheckpointError(f"file too short ({len(blob)} bytes)")
    magic, version, stored_hash, count = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    body = blob[_HEADER.size:-4]
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(body) != crc:
        raise ChecksumError("tensor payload failed its checksum")
    if stored_hash != config_hash(arch):
        warnings.warn("stored config hash differs from the requested "
                      "architecture; shapes will still be checked",
                      stacklevel=2)

    loaded: dict[str, np.ndarray] = {}
    off = 0
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off: off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<B", body, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", body, off)
            off += 4 * rank
            n = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(body, dtype="<f4", count=n, offset=off)
            off += 4 * n
        except (struct.error, ValueError) as e:
            raise CheckpointError(f"truncated tensor record: {e}") from e
        loaded[name] = arr.reshape(shape).astype(np.float32)
    if off != len(body):
        raise CheckpointError(f"{len(body) - off} trailing bytes after "
                              f"{count} tensors")

    params = init_params(arch["catalog_size"], d=arch["d"],
                         n_layers=arch["n_layers"], n_heads=arch["n_heads"],
                         C=arch["C"], n_positions=arch["n_positions"],
                         kind=arch["kind"], seed=0)
    expected = dict(params.named())
    missing = sorted(set(expected) - set(loaded))
    extra = sorted(set(loaded) - set(expected))
    if missing or extra:
        raise ShapeMismatchError(f"tensor set mismatch: missing={missing}, "
                                 f"unexpected={extra}")
    for name, tensor in expected.items():
        if loaded[name].shape != tensor.data.shape:
            raise ShapeMismatchError(
                f"{name}: stored shape {loaded[name].shape} vs "
                f"architecture shape {tensor.data.shape}")
        tensor.data[...] = loaded[name]
    return params


def save_params(params: ModelParams, path) -> int:
    blob = serialize_params(params)
    with open(path, "wb") as f:
        f.write(blob)
    return len(blob)


def load_params(path, arch: dict) -> ModelParams:
    with open(path, "rb") as f:
        return deserialize_params(f.read(), arch)
