"""Causal transformer backbone shared by the memory encoder and the decoder.

Inputs are "layouts": ordered rows of typed slots (MEMORY / ITEM / QUERY).
Items carry within-segment positions, memory and query slots carry per-slot
embeddings, and every constructed input (plain item windows, encode/decode
contexts, the interleaved global reference pass) is just a layout plus an
attention mask derived from it.

Two masks exist. The causal mask is plain lower-triangular. The reference
mask, used on interleaved [S_0; Q; S_1; Q; ...] layouts, lets items attend
only to causally earlier items (never to query slots) and lets the query
block of segment h attend to all items of segments 0..h plus causally to its
own block. Under this rule the query outputs of block h match a standalone
causal forward on [S_0..S_h; Q] row for row, which is what makes the global
reference pass a drop-in teacher for the recurrent update path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


class LayoutError(ValueError):
    """Malformed slot layout or layout/mask misuse."""


class NumericsError(RuntimeError):
    """Non-finite values appeared where the contract requires finite ones."""


class Role(IntEnum):
    MEMORY = 0
    ITEM = 1
    QUERY = 2


@dataclass(frozen=True)
class Slot:
    """One input row: its role, owning segment, and within-role index.

    For ITEM slots ``within`` is the position inside the segment (0-based,
    < L_seg) and ``item_id`` is set. For QUERY slots ``within`` is the slot
    index c in 0..C-1. For MEMORY slots ``within`` is the row index into the
    supplied memory content.
    """

    role: Role
    segment: int
    within: int
    item_id: Optional[int] = None


@dataclass
class SequenceLayout:
    slots: list[Slot] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.slots)

    def roles(self) -> np.ndarray:
        return np.array([s.role for s in self.slots], dtype=np.int64)

    def item_rows(self) -> list[int]:
        return [i for i, s in enumerate(self.slots) if s.role == Role.ITEM]

    def query_rows(self) -> list[int]:
        return [i for i, s in enumerate(self.slots) if s.role == Role.QUERY]

    def query_block(self, segment: int) -> tuple[int, int]:
        """Row span [lo, hi) of the QUERY block belonging to ``segment``."""
        rows = [i for i, s in enumerate(self.slots)
                if s.role == Role.QUERY and s.segment == segment]
        if not rows:
            raise LayoutError(f"no QUERY block for segment {segment}")
        lo, hi = rows[0], rows[-1] + 1
        if rows != list(range(lo, hi)):
            raise LayoutError(f"QUERY block of segment {segment} is not contiguous")
        return lo, hi

    def runs(self) -> list[tuple[Role, int, int]]:
        """Maximal same-role row spans, in order, as (role, lo, hi)."""
        out: list[tuple[Role, int, int]] = []
        for i, s in enumerate(self.slots):
            if out and out[-1][0] == s.role and out[-1][2] == i:
                out[-1] = (s.role, out[-1][1], i + 1)
            else:
                out.append((s.role, i, i + 1))
        return out


def items_layout(items: Sequence[int], segment: int = 0) -> SequenceLayout:
    """Plain item window: positions restart at 0."""
    return SequenceLayout([Slot(Role.ITEM, segment, i, int(it))
                           for i, it in enumerate(items)])


def decode_layout(memory_rows: int, items: Sequence[int],
                  segment: int = 0) -> SequenceLayout:
    """[memory; current segment] — the next-item prediction context."""
    slots = [Slot(Role.MEMORY, segment, r) for r in range(memory_rows)]
    slots += [Slot(Role.ITEM, segment, i, int(it)) for i, it in enumerate(items)]
    return SequenceLayout(slots)


def encode_layout(memory_rows: int, items: Sequence[int], C: int,
                  segment: int = 0) -> SequenceLayout:
    """[memory; segment; query block] — one memory extraction context."""
    layout = decode_layout(memory_rows, items, segment)
    layout.slots += [Slot(Role.QUERY, segment, c) for c in range(C)]
    return layout


def global_layout(segments: Sequence[Sequence[int]], C: int) -> SequenceLayout:
    """Interleaved [S_0; Q; S_1; Q; ...] reference layout."""
    slots: list[Slot] = []
    for h, seg in enumerate(segments):
        slots += [Slot(Role.ITEM, h, i, int(it)) for i, it in enumerate(seg)]
        slots += [Slot(Role.QUERY, h, c) for c in range(C)]
    return SequenceLayout(slots)


# ------------------------------------------------------------------ params

@dataclass
class LayerParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w1: Tensor
    w2: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor


@dataclass
class ModelParams:
    """All learnable state plus the architecture signature.

    ``arch`` pins catalog_size, d, n_layers, n_heads, C, n_positions and the
    model kind ("mem" or "plain"); it travels with checkpoints so a file
    cannot silently load into a differently shaped model. The output head is
    tied to ``item_emb``.
    """

    arch: dict
    item_emb: Tensor
    pos_emb: Tensor
    slot_emb: Tensor
    role_emb: Tensor
    q_mem: Tensor
    layers: list[LayerParams]
    ln_f_g: Tensor
    ln_f_b: Tensor

    def named(self) -> list[tuple[str, Tensor]]:
        out = [("item_emb", self.item_emb), ("pos_emb", self.pos_emb),
               ("slot_emb", self.slot_emb), ("role_emb", self.role_emb),
               ("q_mem", self.q_mem)]
        for i, lp in enumerate(self.layers):
            for name in ("wq", "wk", "wv", "wo", "w1", "w2",
                         "ln1_g", "ln1_b", "ln2_g", "ln2_b"):
                out.append((f"layers.{i}.{name}", getattr(lp, name)))
        out += [("ln_f_g", self.ln_f_g), ("ln_f_b", self.ln_f_b)]
        return out

    def trainable(self, memory_machinery: bool = True) -> list[Tensor]:
        """Parameter list for the optimizer.

        Plain item-window trainers never touch the query/slot tables, so
        they exclude them (the optimizer requires a gradient per parameter).
        """
        skip = () if memory_machinery else ("slot_emb", "q_mem")
        return [t for name, t in self.named() if name not in skip]

    def copy(self) -> "ModelParams":
        """Deep value copy (used to snapshot best-so-far weights)."""
        def c(t: Tensor) -> Tensor:
            return T.tensor(t.data.copy(), requires_grad=t.requires_grad)

        return ModelParams(
            arch=dict(self.arch),
            item_emb=c(self.item_emb), pos_emb=c(self.pos_emb),
            slot_emb=c(self.slot_emb), role_emb=c(self.role_emb),
            q_mem=c(self.q_mem),
            layers=[LayerParams(**{k: c(getattr(lp, k)) for k in
                                   ("wq", "wk", "wv", "wo", "w1", "w2",
                                    "ln1_g", "ln1_b", "ln2_g", "ln2_b")})
                    for lp in self.layers],
            ln_f_g=c(self.ln_f_g), ln_f_b=c(self.ln_f_b))


def init_params(catalog_size: int, d: int = 32, n_layers: int = 2,
                n_heads: int = 2, C: int = 4, n_positions: int = 16,
                kind: str = "mem", seed: int = 0,
                init_scale: float = 0.02) -> ModelParams:
    if d % n_heads != 0:
        raise LayoutError(f"d={d} not divisible by n_heads={n_heads}")
    if kind not in ("mem", "plain"):
        raise ValueError(f"unknown model kind {kind!r}")
    rng = np.random.default_rng(seed)

    def w(*shape):
        return T.tensor(rng.normal(0.0, init_scale, shape).astype(np.float32),
                        requires_grad=True)

    def ones(n):
        return T.tensor(np.ones((1, n), dtype=np.float32), requires_grad=True)

    def zeros(n):
        return T.tensor(np.zeros((1, n), dtype=np.float32), requires_grad=True)

    layers = [LayerParams(wq=w(d, d), wk=w(d, d), wv=w(d, d), wo=w(d, d),
                          w1=w(d, 4 * d), w2=w(4 * d, d),
                          ln1_g=ones(d), ln1_b=zeros(d),
                          ln2_g=ones(d), ln2_b=zeros(d))
              for _ in range(n_layers)]
    arch = {"catalog_size": int(catalog_size), "d": int(d),
            "n_layers": int(n_layers), "n_heads": int(n_heads), "C": int(C),
            "n_positions": int(n_positions), "kind": kind}
    return ModelParams(arch=arch,
                       item_emb=w(catalog_size, d),
                       pos_emb=w(n_positions, d),
                       slot_emb=w(C, d),
                       role_emb=w(3, d),
                       q_mem=w(C, d),
                       layers=layers,
                       ln_f_g=ones(d), ln_f_b=zeros(d))


# --------------------------------------------------------------- embedding

def embed_layout(layout: SequenceLayout, memory_values: Optional[Tensor],
                 params: ModelParams) -> Tensor:
    """Compose the input matrix for a layout.

    ITEM rows: item embedding + within-segment position + ITEM role.
    QUERY rows: query vector c + slot embedding c + QUERY role.
    MEMORY rows: content row fed back verbatim (no projection) + slot
    embedding (row index mod C) + MEMORY role.
    """
    C = params.arch["C"]
    n_pos = params.arch["n_positions"]
    blocks: list[Tensor] = []
    mem_cursor = 0
    for role, lo, hi in layout.runs():
        run = layout.slots[lo:hi]
        n = hi - lo
        role_rows = T.gather_rows(params.role_emb, [int(role)] * n)
        if role == Role.ITEM:
            ids = [s.item_id for s in run]
            if any(i is None for i in ids):
                raise LayoutError("ITEM slot without item_id")
            withins = [s.within for s in run]
            if max(withins) >= n_pos:
                raise LayoutError(
                    f"item position {max(withins)} exceeds position table ({n_pos})")
            block = T.add(T.gather_rows(params.item_emb, ids),
                          T.gather_rows(params.pos_emb, withins))
        elif role == Role.QUERY:
            cs = [s.within for s in run]
            if cs != list(range(len(cs))) or len(cs) != C:
                raise LayoutError(f"QUERY block must be exactly slots 0..{C - 1}")
            block = T.add(T.gather_rows(params.q_mem, cs),
                          T.gather_rows(params.slot_emb, cs))
        else:
            if memory_values is None:
                raise LayoutError("layout has MEMORY slots but no memory content")
            if mem_cursor + n > memory_values.shape[0]:
                raise LayoutError(
                    f"layout needs {mem_cursor + n} memory rows, "
                    f"content has {memory_values.shape[0]}")
            rows = T.slice_rows(memory_values, mem_cursor, mem_cursor + n)
            mem_cursor += n
            cs = [(s.within % C) for s in run]
            block = T.add(rows, T.gather_rows(params.slot_emb, cs))
        blocks.append(T.add(block, role_rows))
    if memory_values is not None and mem_cursor != memory_values.shape[0]:
        raise LayoutError(
            f"memory content has {memory_values.shape[0]} rows, layout consumed {mem_cursor}")
    if len(blocks) == 1:
        return blocks[0]
    return T.concat(blocks, axis=0)


# ------------------------------------------------------------------- masks

def build_causal_mask(layout: SequenceLayout) -> np.ndarray:
    """Lower-triangular attention over a [MEMORY...; ITEM...; QUERY...] layout."""
    order = [s.role for s in layout.slots]
    if order != sorted(order):
        raise LayoutError("causal mask expects rows ordered MEMORY, ITEM, QUERY")
    n = len(layout)
    return np.tril(np.ones((n, n), dtype=bool))


def build_stage1_mask(layout: SequenceLayout) -> np.ndarray:
    """Reference-pass mask for interleaved [S_0; Q; S_1; Q; ...] layouts.

    Items attend to causally earlier-or-equal items only. The query block of
    segment h attends to every item of segments 0..h and causally within its
    own block. Query blocks never see each other.
    """
    roles = layout.roles()
    if (roles == Role.MEMORY).any():
        raise LayoutError("reference layout must not contain MEMORY slots")
    seg = np.array([s.segment for s in layout.slots], dtype=np.int64)
    within = np.array([s.within for s in layout.slots], dtype=np.int64)
    is_item = roles == Role.ITEM
    is_query = roles == Role.QUERY
    item_order = np.cumsum(is_item)  # 1-based at item rows

    mask = np.zeros((len(layout), len(layout)), dtype=bool)
    # item -> item, causal in global item order
    mask |= (is_item[:, None] & is_item[None, :]
             & (item_order[None, :] <= item_order[:, None]))
    # query(h, c) -> item of segments 0..h
    mask |= (is_query[:, None] & is_item[None, :]
             & (seg[None, :] <= seg[:, None]))
    # query(h, c) -> query(h, c' <= c)
    mask |= (is_query[:, None] & is_query[None, :]
             & (seg[None, :] == seg[:, None])
             & (within[None, :] <= within[:, None]))
    return mask


def block_diag_mask(masks: Sequence[np.ndarray]) -> np.ndarray:
    """Stack per-block masks so blocks cannot attend across each other."""
    n = sum(m.shape[0] for m in masks)
    out = np.zeros((n, n), dtype=bool)
    at = 0
    for m in masks:
        k = m.shape[0]
        out[at:at + k, at:at + k] = m
        at += k
    return out


# ----------------------------------------------------------------- forward

def transformer_forward(inputs: Tensor, mask: np.ndarray, params: ModelParams,
                        collect_attention: bool = False):
    """Pre-norm blocks: x += MHA(LN(x)); x += FFN(LN(x)); final LN.

    Masked positions get -inf before softmax, so their probability is
    exactly zero and causality is bit-exact. With ``collect_attention`` the
    per-layer, per-head probability matrices are returned alongside the
    hidden states.
    """
    t = inputs.shape[0]
    if mask.shape != (t, t):
        raise LayoutError(f"mask shape {mask.shape} does not match {t} rows")
    d = params.arch["d"]
    n_heads = params.arch["n_heads"]
    dh = d // n_heads
    scale = 1.0 / np.sqrt(dh)
    attn_maps: list[list[np.ndarray]] = []

    def affine(x, g, b):
        return T.add(T.mul(x, g), b)

    h = inputs
    for lp in params.layers:
        a = affine(T.layer_norm(h), lp.ln1_g, lp.ln1_b)
        q = T.matmul(a, lp.wq)
        k = T.matmul(a, lp.wk)
        v = T.matmul(a, lp.wv)
        heads = []
        layer_maps = []
        for i in range(n_heads):
            lo, hi = i * dh, (i + 1) * dh
            scores = T.matmul(T.slice_cols(q, lo, hi),
                              T.transpose(T.slice_cols(k, lo, hi))) * scale
            p = T.softmax(scores, mask=mask)
            if collect_attention:
                layer_maps.append(p.data.copy())
            heads.append(T.matmul(p, T.slice_cols(v, lo, hi)))
        if collect_attention:
            attn_maps.append(layer_maps)
        merged = heads[0] if n_heads == 1 else T.concat(heads, axis=1)
        h = T.add(h, T.matmul(merged, lp.wo))
        b = affine(T.layer_norm(h), lp.ln2_g, lp.ln2_b)
        h = T.add(h, T.matmul(T.gelu(T.matmul(b, lp.w1)), lp.w2))
    out = affine(T.layer_norm(h), params.ln_f_g, params.ln_f_b)
    if not np.isfinite(out.data).all():
        raise NumericsError("non-finite values in transformer output")
    if collect_attention:
        return out, attn_maps
    return out


def forward_blocks(blocks: Sequence[tuple[Tensor, np.ndarray]],
                   params: ModelParams) -> list[Tensor]:
    """Run several independent layouts as one forward.

    Inputs are stacked and the masks placed block-diagonally; since nothing
    attends across blocks and all other ops are row-local, each returned
    slice matches a standalone forward of that block.
    """
    inputs = T.concat([b[0] for b in blocks], axis=0) if len(blocks) > 1 else blocks[0][0]
    mask = block_diag_mask([b[1] for b in blocks])
    out = transformer_forward(inputs, mask, params)
    outs = []
    at = 0
    for b in blocks:
        k = b[0].shape[0]
        outs.append(T.slice_rows(out, at, at + k))
        at += k
    return outs


def item_logits(hidden: Tensor, params: ModelParams) -> Tensor:
    """Catalog scores for each hidden row, tied to the item embedding table."""
    return T.matmul(hidden, T.transpose(params.item_emb))
