"""Two-stage teacher-forced training plus serial and plain baselines.

One training step on one user:

  Stage 1 runs a single forward over the interleaved layout
  [S_0; Q; S_1; Q; ...] under the reference mask. The query outputs of
  block h are the reference memories m_ref_h: what the model would extract
  from the whole raw prefix 0..h at once.

  Stage 2 builds, for every segment h in parallel, the incremental-update
  context [M_ref_{h-1}; S_h; Q] (plain [S_0; Q] for h = 0) where M_ref is
  assembled from stage-1 outputs (teacher forcing: never from rolled-out
  updates). Item rows carry the next-item loss; query rows yield the
  updated memories m_upd_h, pulled toward their references by a mean
  squared consistency term whose targets are detached. The references do
  receive gradient through their use as stage-2 context.

The serial baseline processes segments in order with the memory detached
between segments; the plain baselines are ordinary next-item training over
short windows or the full prefix, with no memory machinery.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .backbone import (ModelParams, NumericsError, Role, SequenceLayout,
                       Slot, build_causal_mask, build_stage1_mask,
                       embed_layout, encode_layout, forward_blocks,
                       global_layout, init_params, item_logits,
                       transformer_forward)
from .data import Dataset, segment, split_leave_one_out
from .evaluation import FULL, MEM_ITERATIVE, SHORT, evaluate
from .memory import APPEND, OVERWRITE
from .tensor import Tensor

REC2PM = "rec2pm"
TOK_SERIAL = "tok-serial"
PLAIN_SHORT = "plain-short"
PLAIN_FULL = "plain-full"
TRAINERS = (REC2PM, TOK_SERIAL, PLAIN_SHORT, PLAIN_FULL)


class TrainingDivergedError(RuntimeError):
    """Loss or activations became non-finite during training."""


@dataclass
class TrainConfig:
    trainer: str = REC2PM
    mode: str = OVERWRITE
    l_seg: int = 16
    l_full: int = 64
    c: int = 4
    d: int = 32
    n_layers: int = 2
    n_heads: int = 2
    lr: float = 1e-3
    weight_decay: float = 0.1
    batch_size: int = 4
    consistency_weight: float = 1.0
    epochs: int = 8
    patience: int = 10
    seed: int = 0
    recon_weight: float = 0.0
    mse_reduction: str = "mean"
    valid_user_cap: Optional[int] = None
    init_scale: float = 0.02

    def validate(self) -> "TrainConfig":
        if self.trainer not in TRAINERS:
            raise ValueError(f"unknown trainer {self.trainer!r}; pick from {TRAINERS}")
        if self.mode not in (OVERWRITE, APPEND):
            raise ValueError(f"mode must be {OVERWRITE} or {APPEND}")
        if self.l_full % self.l_seg != 0:
            raise ValueError(f"l_full={self.l_full} must be a multiple of l_seg={self.l_seg}")
        if self.consistency_weight < 0 or self.recon_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mse_reduction != "mean":
            raise ValueError("per-element mean is the only supported MSE reduction")
        if self.epochs < 0 or self.patience < 0:
            raise ValueError("epochs and patience must be non-negative")
        return self


@dataclass
class TrainStepOutput:
    """One user's (or batch's) losses plus the memories behind them.

    ``teacher_forced`` asserts by construction that every stage-2 context
    came from stage-1 references, never from rolled-out updates.
    """

    loss: Tensor
    loss_total: float
    loss_ar: float
    loss_con: float
    loss_recon: float
    m_ref: list = field(default_factory=list)
    m_upd: list = field(default_factory=list)
    teacher_forced: bool = True


# ------------------------------------------------------------ stage passes

def stage1_reference_pass(segments: Sequence[Sequence[int]],
                          params: ModelParams) -> list[Tensor]:
    """Reference memories for every segment from one interleaved forward.

    Gradients flow through the returned slices: the references are later
    consumed as stage-2 context, which is how stage 1 learns to compress.
    """
    if not segments:
        raise ValueError("need at least one segment")
    layout = global_layout(segments, params.arch["C"])
    out = transformer_forward(embed_layout(layout, None, params),
                              build_stage1_mask(layout), params)
    return [T.slice_rows(out, *layout.query_block(h))
            for h in range(len(segments))]


def build_reference_context(m_refs: Sequence[Tensor], h: int,
                            mode: str) -> Tensor:
    """M_ref_{h-1}: the teacher-forced memory context for segment h."""
    if not 1 <= h <= len(m_refs) - 1:
        raise ValueError(f"segment index {h} outside 1..{len(m_refs) - 1}")
    if mode == OVERWRITE:
        return m_refs[h - 1]
    parts = list(m_refs[:h])
    return parts[0] if len(parts) == 1 else T.concat(parts, axis=0)


def consistency_loss(m_refs: Sequence, m_upds: Sequence) -> Tensor:
    """Mean over segments of per-element mean squared difference.

    References are detached: they are targets here, not students.
    """
    if len(m_refs) != len(m_upds):
        raise T.ShapeError(f"{len(m_refs)} references vs {len(m_upds)} updates")
    if not m_refs:
        return T.tensor(0.0)
    terms = []
    for ref, upd in zip(m_refs, m_upds):
        ref_t = ref if isinstance(ref, Tensor) else T.tensor(ref)
        upd_t = upd if isinstance(upd, Tensor) else T.tensor(upd)
        terms.append(T.mse(ref_t.detach(), upd_t))
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total * (1.0 / len(terms))


def reconstruction_loss(m: Tensor, prefix_items: Sequence[int],
                        params: ModelParams) -> Tensor:
    """Teacher-forced decode of the raw prefix from a memory.

    Forwards [memory; prefix] causally; the last memory row predicts the
    first item and each item predicts its successor, so every prefix item
    is scored. Used only by the explicit-supervision ablation.
    """
    if not prefix_items:
        raise ValueError("empty prefix")
    l_seg = params.arch["n_positions"]
    rows = m.shape[0]
    slots = [Slot(Role.MEMORY, 0, r) for r in range(rows)]
    slots += [Slot(Role.ITEM, j // l_seg, j % l_seg, int(it))
              for j, it in enumerate(prefix_items)]
    layout = SequenceLayout(slots)
    out = transformer_forward(embed_layout(layout, m, params),
                              build_causal_mask(layout), params)
    n = len(prefix_items)
    hid = T.slice_rows(out, rows - 1, rows - 1 + n)
    return T.cross_entropy(item_logits(hid, params), prefix_items,
                           reduction="mean")


def stage2_parallel_pass(segments: Sequence[Sequence[int]],
                         m_refs: Sequence[Tensor], params: ModelParams,
                         cfg: TrainConfig,
                         block_order: Optional[Sequence[int]] = None
                         ) -> TrainStepOutput:
    """All incremental updates for one user in a single batched forward.

    ``block_order`` only changes where each segment's rows land inside the
    batched forward; losses are reduced in segment order regardless, so any
    permutation yields the same values.
    """
    if len(m_refs) != len(segments):
        raise ValueError(f"{len(segments)} segments but {len(m_refs)} references")
    C = params.arch["C"]
    blocks = []
    metas = []
    for h, seg in enumerate(segments):
        if h == 0:
            mem_t, mem_rows = None, 0
        else:
            mem_t = build_reference_context(m_refs, h, cfg.mode)
            mem_rows = mem_t.shape[0]
        layout = encode_layout(mem_rows, seg, C)
        blocks.append((embed_layout(layout, mem_t, params),
                       build_causal_mask(layout)))
        metas.append((mem_rows, len(seg)))
    order = list(range(len(blocks))) if block_order is None else list(block_order)
    if sorted(order) != list(range(len(blocks))):
        raise ValueError(f"block_order must permute 0..{len(blocks) - 1}")
    permuted = forward_blocks([blocks[i] for i in order], params)
    outs: list[Tensor] = [None] * len(blocks)  # type: ignore[list-item]
    for pos, i in enumerate(order):
        outs[i] = permuted[pos]

    ce_sum: Optional[Tensor] = None
    n_targets = 0
    m_upds: list[Tensor] = []
    pair_refs: list[Tensor] = []
    full_idx: list[int] = []
    for h, (seg, out) in enumerate(zip(segments, outs)):
        mem_rows, n_items = metas[h]
        targets = list(seg[1:])
        if h + 1 < len(segments):
            targets.append(segments[h + 1][0])
        if targets:
            hid = T.slice_rows(out, mem_rows, mem_rows + len(targets))
            ce = T.cross_entropy(item_logits(hid, params), targets,
                                 reduction="sum")
            ce_sum = ce if ce_sum is None else T.add(ce_sum, ce)
            n_targets += len(targets)
        if n_items == cfg.l_seg:
            m_upds.append(T.slice_rows(out, mem_rows + n_items,
                                       mem_rows + n_items + C))
            pair_refs.append(m_refs[h])
            full_idx.append(h)

    loss_ar = ce_sum * (1.0 / n_targets) if n_targets else T.tensor(0.0)
    loss_con = consistency_loss(pair_refs, m_upds)
    loss_recon = T.tensor(0.0)
    if cfg.recon_weight > 0 and full_idx:
        terms = []
        for upd, h in zip(m_upds, full_idx):
            prefix = [it for s in segments[: h + 1] for it in s]
            terms.append(reconstruction_loss(upd, prefix, params))
        loss_recon = terms[0]
        for t in terms[1:]:
            loss_recon = T.add(loss_recon, t)
        loss_recon = loss_recon * (1.0 / len(terms))

    total = loss_ar
    if cfg.consistency_weight > 0:
        total = T.add(total, loss_con * cfg.consistency_weight)
    if cfg.recon_weight > 0:
        total = T.add(total, loss_recon * cfg.recon_weight)
    return TrainStepOutput(
        loss=total, loss_total=total.item(), loss_ar=loss_ar.item(),
        loss_con=loss_con.item(), loss_recon=loss_recon.item(),
        m_ref=[r.data for r in m_refs], m_upd=[u.data for u in m_upds],
        teacher_forced=True)


# ------------------------------------------------------------- batch losses

def _ar_terms_for_layout(out: Tensor, seg: Sequence[int], mem_rows: int,
                         next_item: Optional[int], params: ModelParams):
    targets = list(seg[1:])
    if next_item is not None:
        targets.append(next_item)
    if not targets:
        return None, 0
    hid = T.slice_rows(out, mem_rows, mem_rows + len(targets))
    ce = T.cross_entropy(item_logits(hid, params), targets, reduction="sum")
    return ce, len(targets)


def _serial_user_loss(segments: Sequence[Sequence[int]], params: ModelParams,
                      cfg: TrainConfig):
    """Segments in order; memory crosses segments as a detached constant."""
    C = params.arch["C"]
    mem: Optional[np.ndarray] = None
    ce_sum: Optional[Tensor] = None
    n_targets = 0
    for h, seg in enumerate(segments):
        mem_rows = 0 if mem is None else mem.shape[0]
        layout = encode_layout(mem_rows, seg, C)
        mem_t = None if mem is None else T.tensor(mem)
        out = transformer_forward(embed_layout(layout, mem_t, params),
                                  build_causal_mask(layout), params)
        nxt = segments[h + 1][0] if h + 1 < len(segments) else None
        ce, n = _ar_terms_for_layout(out, seg, mem_rows, nxt, params)
        if ce is not None:
            ce_sum = ce if ce_sum is None else T.add(ce_sum, ce)
            n_targets += n
        if len(seg) == cfg.l_seg:
            m_k = out.data[mem_rows + len(seg): mem_rows + len(seg) + C].copy()
            if mem is None or cfg.mode == OVERWRITE:
                mem = m_k
            else:
                mem = np.concatenate([mem, m_k], axis=0)
    loss = ce_sum * (1.0 / n_targets) if n_targets else T.tensor(0.0)
    return loss, n_targets


def _plain_user_windows(prefix: Sequence[int], cfg: TrainConfig) -> list[list[int]]:
    if cfg.trainer == PLAIN_SHORT:
        return [w for w in segment(prefix, cfg.l_seg).segments if len(w) >= 2]
    window = list(prefix[-cfg.l_full:])
    return [window] if len(window) >= 2 else []


def _plain_user_loss(prefix: Sequence[int], params: ModelParams,
                     cfg: TrainConfig):
    windows = _plain_user_windows(prefix, cfg)
    if not windows:
        return T.tensor(0.0), 0
    blocks = []
    for w in windows:
        lay = SequenceLayout([Slot(Role.ITEM, 0, i, int(it))
                              for i, it in enumerate(w)])
        blocks.append((embed_layout(lay, None, params),
                       build_causal_mask(lay)))
    outs = forward_blocks(blocks, params)
    ce_sum: Optional[Tensor] = None
    n_targets = 0
    for w, out in zip(windows, outs):
        ce, n = _ar_terms_for_layout(out, w, 0, None, params)
        if ce is not None:
            ce_sum = ce if ce_sum is None else T.add(ce_sum, ce)
            n_targets += n
    loss = ce_sum * (1.0 / n_targets) if n_targets else T.tensor(0.0)
    return loss, n_targets


# -------------------------------------------------------------- main loops

def _train_loop(dataset: Dataset, cfg: TrainConfig, params: ModelParams,
                user_step: Callable[[int], TrainStepOutput],
                valid_protocol: str):
    """Shared epoch loop: batches, divergence guard, early stopping."""
    opt = T.AdamW(params.trainable(memory_machinery=cfg.trainer in (REC2PM, TOK_SERIAL)),
                  lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    n = len(dataset.users)
    log: list[dict] = []
    best_h10 = -1.0
    best_params: Optional[ModelParams] = None
    stale = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        sums = {"loss_total": 0.0, "loss_ar": 0.0, "loss_con": 0.0,
                "loss_recon": 0.0}
        n_batches = 0
        for lo in range(0, n, cfg.batch_size):
            idxs = order[lo: lo + cfg.batch_size]
            batch_loss: Optional[Tensor] = None
            parts = {k: 0.0 for k in sums}
            try:
                for i in idxs:
                    out = user_step(int(i))
                    batch_loss = out.loss if batch_loss is None else \
                        T.add(batch_loss, out.loss)
                    for k in parts:
                        parts[k] += getattr(out, k)
                batch_loss = batch_loss * (1.0 / len(idxs))
                if not np.isfinite(batch_loss.data):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, batch {lo // cfg.batch_size}")
                opt.zero_grad()
                T.backward(batch_loss)
                opt.step()
            except NumericsError as e:
                raise TrainingDivergedError(
                    f"numerics failure at epoch {epoch}, "
                    f"batch {lo // cfg.batch_size}: {e}") from e
            for k in sums:
                sums[k] += parts[k] / len(idxs)
            n_batches += 1
        report = evaluate(params, dataset, valid_protocol, mode=cfg.mode,
                          target="valid", user_cap=cfg.valid_user_cap)
        h10 = report.metrics["H@10"]
        entry = {k: sums[k] / max(n_batches, 1) for k in sums}
        entry.update({"epoch": epoch, "valid_h10": h10,
                      "seconds": round(time.perf_counter() - t0, 3)})
        log.append(entry)
        if h10 > best_h10:
            best_h10 = h10
            best_params = params.copy()
            stale = 0
        else:
            stale += 1
            if stale > cfg.patience:
                break
    if best_params is not None:
        return best_params, log
    return params, log


def train_rec2pm(dataset: Dataset, cfg: TrainConfig):
    cfg.validate()
    if cfg.trainer != REC2PM:
        raise ValueError(f"trainer is {cfg.trainer!r}, expected {REC2PM!r}")
    params = _init_for(dataset, cfg, kind="mem", n_positions=cfg.l_seg)
    segs = [segment(split_leave_one_out(u.items)[0], cfg.l_seg).segments
            for u in dataset.users]

    def step(i: int) -> TrainStepOutput:
        m_refs = stage1_reference_pass(segs[i], params)
        return stage2_parallel_pass(segs[i], m_refs, params, cfg)

    return _train_loop(dataset, cfg, params, step, MEM_ITERATIVE)


def train_serial_baseline(dataset: Dataset, cfg: TrainConfig):
    cfg.validate()
    if cfg.trainer != TOK_SERIAL:
        raise ValueError(f"trainer is {cfg.trainer!r}, expected {TOK_SERIAL!r}")
    params = _init_for(dataset, cfg, kind="mem", n_positions=cfg.l_seg)
    segs = [segment(split_leave_one_out(u.items)[0], cfg.l_seg).segments
            for u in dataset.users]

    def step(i: int) -> TrainStepOutput:
        loss, _ = _serial_user_loss(segs[i], params, cfg)
        return TrainStepOutput(loss=loss, loss_total=loss.item(),
                               loss_ar=loss.item(), loss_con=0.0,
                               loss_recon=0.0, teacher_forced=False)

    return _train_loop(dataset, cfg, params, step, MEM_ITERATIVE)


def train_plain(dataset: Dataset, cfg: TrainConfig):
    cfg.validate()
    if cfg.trainer not in (PLAIN_SHORT, PLAIN_FULL):
        raise ValueError(f"trainer is {cfg.trainer!r}, expected a plain kind")
    n_pos = cfg.l_seg if cfg.trainer == PLAIN_SHORT else cfg.l_full
    params = _init_for(dataset, cfg, kind="plain", n_positions=n_pos)
    prefixes = [split_leave_one_out(u.items)[0] for u in dataset.users]

    def step(i: int) -> TrainStepOutput:
        loss, _ = _plain_user_loss(prefixes[i], params, cfg)
        return TrainStepOutput(loss=loss, loss_total=loss.item(),
                               loss_ar=loss.item(), loss_con=0.0,
                               loss_recon=0.0, teacher_forced=False)

    protocol = SHORT if cfg.trainer == PLAIN_SHORT else FULL
    return _train_loop(dataset, cfg, params, step, protocol)


def train(dataset: Dataset, cfg: TrainConfig):
    """Dispatch to the trainer named by the config."""
    cfg.validate()
    if cfg.trainer == REC2PM:
        return train_rec2pm(dataset, cfg)
    if cfg.trainer == TOK_SERIAL:
        return train_serial_baseline(dataset, cfg)
    return train_plain(dataset, cfg)


def _init_for(dataset: Dataset, cfg: TrainConfig, kind: str,
              n_positions: int) -> ModelParams:
    return init_params(dataset.catalog_size, d=cfg.d, n_layers=cfg.n_layers,
                       n_heads=cfg.n_heads, C=cfg.c, n_positions=n_positions,
                       kind=kind, seed=cfg.seed, init_scale=cfg.init_scale)


def write_metrics_log(log: Sequence[dict], path) -> None:
    """One JSON object per line, append-friendly."""
    with open(path, "w") as f:
        for entry in log:
            f.write(json.dumps(entry, sort_keys=True) + "\n")


def config_from_dict(d: dict) -> TrainConfig:
    """Build a config from a plain dict, rejecting unknown keys."""
    known = {f for f in TrainConfig.__dataclass_fields__}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return replace(TrainConfig(), **d).validate()
