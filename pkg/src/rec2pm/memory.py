"""Per-user preference memory: extraction, update modes, persistence.

A memory is a small matrix of final-layer hidden rows read off at the query
slots of an encode forward. OVERWRITE keeps exactly C rows forever; APPEND
grows by C rows per absorbed segment. States are immutable; updates return
new states. Files use the "R2PM" binary format below, which is bit-exact on
round trip and carries a CRC over the float payload.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .backbone import (ModelParams, Role, SequenceLayout, Slot,
                       build_causal_mask, embed_layout, transformer_forward)

OVERWRITE = "OVERWRITE"
APPEND = "APPEND"
_MODE_CODES = {OVERWRITE: 0, APPEND: 1}
_MODE_NAMES = {v: k for k, v in _MODE_CODES.items()}

MAGIC = b"R2PM"
VERSION = 1
_HEADER = struct.Struct("<4sBBHHII")


class MemoryFormatError(ValueError):
    """Base for unreadable memory files."""


class BadMagicError(MemoryFormatError):
    pass


class BadVersionError(MemoryFormatError):
    pass


class ChecksumError(MemoryFormatError):
    pass


@dataclass(frozen=True)
class MemoryState:
    """Immutable per-user preference memory.

    ``content`` is (rows x dim) float32; rows == slots for OVERWRITE and
    slots * segments_absorbed for APPEND. ``user_id`` is bookkeeping only
    and is not persisted.
    """

    mode: str
    slots: int
    dim: int
    content: np.ndarray
    segments_absorbed: int
    user_id: str = ""

    def __post_init__(self):
        if self.mode not in _MODE_CODES:
            raise ValueError(f"unknown memory mode {self.mode!r}")
        expected = self.slots * (1 if self.mode == OVERWRITE else self.segments_absorbed)
        if self.content.shape != (expected, self.dim):
            raise ValueError(
                f"{self.mode} memory after {self.segments_absorbed} segments "
                f"must be {expected}x{self.dim}, got {self.content.shape}")
        if not np.isfinite(self.content).all():
            raise ValueError("memory content contains non-finite values")

    @property
    def rows(self) -> int:
        return self.content.shape[0]

    def payload_bytes(self) -> int:
        return self.rows * self.dim * 4


def encode_memory(items: Sequence[int], params: ModelParams,
                  memory: Optional[np.ndarray] = None,
                  segment: int = 0,
                  collect_attention: bool = False):
    """Extract the atomic memory for one context.

    Forwards [memory rows; items; query block] under the causal mask and
    returns the hidden rows at the query block (C x d). An empty item
    context is allowed: the result then depends on parameters (and memory)
    only.
    """
    C = params.arch["C"]
    mem_rows = 0 if memory is None else memory.shape[0]
    layout = SequenceLayout(
        [Slot(Role.MEMORY, segment, r) for r in range(mem_rows)]
        + [Slot(Role.ITEM, segment, i, int(it)) for i, it in enumerate(items)]
        + [Slot(Role.QUERY, segment, c) for c in range(C)])
    mem_t = None if memory is None else T.tensor(np.asarray(memory, dtype=np.float32))
    x = embed_layout(layout, mem_t, params)
    result = transformer_forward(x, build_causal_mask(layout), params,
                                 collect_attention=collect_attention)
    if collect_attention:
        out, maps = result
        return T.slice_rows(out, mem_rows + len(items), len(layout)), maps, layout
    out = result
    return T.slice_rows(out, mem_rows + len(items), len(layout))


def init_memory(s0: Sequence[int], params: ModelParams, mode: str,
                user_id: str = "") -> MemoryState:
    """First memory: encode [S_0; queries] with no prior content."""
    if len(s0) == 0:
        raise ValueError("cannot initialize memory from an empty segment")
    with T.no_grad():
        m0 = encode_memory(s0, params).data
    C = params.arch["C"]
    return MemoryState(mode=mode, slots=C, dim=params.arch["d"], content=m0,
                       segments_absorbed=1, user_id=user_id)


def update_memory(state: MemoryState, segment: Sequence[int],
                  params: ModelParams) -> MemoryState:
    """Absorb one full segment; partial segments stay working memory."""
    l_seg = params.arch["n_positions"]
    if len(segment) != l_seg:
        raise ValueError(
            f"memory update needs a full segment of {l_seg} items, got {len(segment)}")
    with T.no_grad():
        m_k = encode_memory(segment, params, memory=state.content).data
    if state.mode == OVERWRITE:
        content = m_k
    else:
        content = np.concatenate([state.content, m_k], axis=0)
    return replace(state, content=content,
                   segments_absorbed=state.segments_absorbed + 1)


def save_memory(state: MemoryState, path) -> None:
    with open(path, "wb") as f:
        f.write(serialize_memory(state))


def serialize_memory(state: MemoryState) -> bytes:
    payload = np.ascontiguousarray(state.content, dtype="<f4").tobytes()
    header = _HEADER.pack(MAGIC, VERSION, _MODE_CODES[state.mode],
                          state.slots, state.dim, state.segments_absorbed,
                          state.rows)
    return header + payload + struct.pack("<I", zlib.crc32(payload))


def load_memory(path) -> MemoryState:
    with open(path, "rb") as f:
        return deserialize_memory(f.read())


def deserialize_memory(blob: bytes) -> MemoryState:
    if len(blob) < _HEADER.size + 4:
        raise MemoryFormatError(f"file too short ({len(blob)} bytes)")
    magic, version, mode_code, slots, dim, absorbed, rows = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise BadVersionError(f"unsupported version {version}, expected {VERSION}")
    if mode_code not in _MODE_NAMES:
        raise MemoryFormatError(f"unknown mode code {mode_code}")
    need = _HEADER.size + rows * dim * 4 + 4
    if len(blob) != need:
        raise MemoryFormatError(f"expected {need} bytes, got {len(blob)}")
    payload = blob[_HEADER.size:-4]
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != crc:
        raise ChecksumError("payload CRC mismatch")
    content = np.frombuffer(payload, dtype="<f4").reshape(rows, dim).copy()
    return MemoryState(mode=_MODE_NAMES[mode_code], slots=slots, dim=dim,
                       content=content, segments_absorbed=absorbed)


def kv_footprint_model(C: int, d: int, n_layers: int, segments: int,
                       mode: str) -> int:
    """Bytes to persist per-layer key/value caches for the same C slots.

    Two tensors (K and V) per layer, C rows of width d, 4-byte floats;
    APPEND multiplies by the segment count.
    """
    if min(C, d, n_layers, segments) < 0:
        raise ValueError("arguments must be non-negative")
    mult = segments if mode == APPEND else 1
    return 2 * n_layers * C * d * 4 * mult
