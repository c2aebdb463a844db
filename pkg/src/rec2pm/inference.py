"""Streaming sessions, one-off compression, and latency benchmarking.

A session owns one user's state: the compressed memory plus the raw items
of the current (incomplete) segment. Ingesting the item that completes a
segment triggers a memory update immediately; prediction decodes
[memory; working items] and scores the whole catalog.

The one-off path replaces the recurrent updates with a single interleaved
reference forward over all full segments, which is the cheap bulk-load
variant of the same memory.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .backbone import (ModelParams, build_causal_mask, build_stage1_mask,
                       decode_layout, embed_layout, global_layout,
                       item_logits, transformer_forward)
from .data import segment
from .memory import (APPEND, OVERWRITE, MemoryState, init_memory,
                     kv_footprint_model, update_memory)

ITERATIVE = "iterative"
ONE_OFF = "oneoff"


class SessionError(RuntimeError):
    """Prediction requested from a session with no context at all."""


@dataclass
class InferenceSession:
    """Sequential per-user state; ingest order defines the state.

    ``overlap`` re-includes the trailing items of each absorbed segment in
    the next working window, emulating delayed log cutoffs. ``last_update``
    keeps the inputs of the most recent memory update so attention can be
    re-materialized for inspection.
    """

    params: ModelParams
    mode: str = OVERWRITE
    protocol: str = ITERATIVE
    overlap: int = 0
    user_id: str = ""
    memory: Optional[MemoryState] = None
    working: list[int] = field(default_factory=list)
    history: list[int] = field(default_factory=list)
    last_update: Optional[tuple[Optional[np.ndarray], list[int]]] = None

    def __post_init__(self):
        l_seg = self.params.arch["n_positions"]
        if not 0 <= self.overlap < l_seg:
            raise ValueError(
                f"overlap must be in [0, {l_seg}), got {self.overlap}")
        if self.protocol not in (ITERATIVE, ONE_OFF):
            raise ValueError(f"unknown protocol {self.protocol!r}")

    @property
    def l_seg(self) -> int:
        return self.params.arch["n_positions"]

    def ingest(self, item: int) -> "InferenceSession":
        catalog = self.params.arch["catalog_size"]
        if not 0 <= item < catalog:
            raise ValueError(f"item {item} outside catalog [0, {catalog})")
        self.history.append(int(item))
        if self.protocol == ONE_OFF:
            return self
        self.working.append(int(item))
        if len(self.working) == self.l_seg:
            seg = list(self.working)
            before = None if self.memory is None else self.memory.content.copy()
            if self.memory is None:
                self.memory = init_memory(seg, self.params, self.mode,
                                          user_id=self.user_id)
            else:
                self.memory = update_memory(self.memory, seg, self.params)
            self.last_update = (before, seg)
            self.working = seg[self.l_seg - self.overlap:] if self.overlap else []
        return self

    def ingest_many(self, items: Sequence[int]) -> "InferenceSession":
        for it in items:
            self.ingest(it)
        return self

    def _context(self) -> tuple[Optional[np.ndarray], list[int]]:
        if self.protocol == ONE_OFF:
            to_compress, working = split_for_oneoff(self.history, self.l_seg)
            if to_compress:
                mem = oneoff_compress(to_compress, self.params, self.mode)
                return mem.content, working
            return None, working
        return (None if self.memory is None else self.memory.content,
                self.working)

    def predict_next(self, top_k: Optional[int] = None):
        """Scores for every catalog item at the current state.

        Returns (ranking, scores): ranking is item ids by descending score
        with ties broken by ascending id; scores is indexed by item id.
        """
        mem, working = self._context()
        if mem is None and not working:
            raise SessionError("empty session: nothing to predict from")
        with T.no_grad():
            scores = score_context(self.params, mem, working)
        ranking = rank_items(scores)
        if top_k is not None:
            ranking = ranking[:top_k]
        return ranking, scores


def score_context(params: ModelParams, memory: Optional[np.ndarray],
                  working: Sequence[int]) -> np.ndarray:
    """Catalog logits for the next item after [memory; working items]."""
    rows = 0 if memory is None else memory.shape[0]
    layout = decode_layout(rows, working)
    mem_t = None if memory is None else T.tensor(memory)
    out = transformer_forward(embed_layout(layout, mem_t, params),
                              build_causal_mask(layout), params)
    last = T.slice_rows(out, len(layout) - 1, len(layout))
    return item_logits(last, params).data[0]


def rank_items(scores: np.ndarray) -> np.ndarray:
    """Descending score; equal scores ordered by ascending item id."""
    return np.lexsort((np.arange(len(scores)), -scores))


def split_for_oneoff(items: Sequence[int], l_seg: int) -> tuple[list[int], list[int]]:
    """All segments except the last go to compression; the last stays raw."""
    segs = segment(items, l_seg).segments
    if len(segs) <= 1:
        return [], list(items)
    split = (len(segs) - 1) * l_seg
    return list(items[:split]), list(items[split:])


def oneoff_compress(prefix: Sequence[int], params: ModelParams,
                    mode: str) -> MemoryState:
    """Compress a whole number of full segments in one reference forward.

    The prefix is segmented with within-segment positions and run under the
    interleaved reference mask; OVERWRITE keeps the final query block's
    output, APPEND keeps every block's.
    """
    l_seg = params.arch["n_positions"]
    if len(prefix) < l_seg:
        raise ValueError(
            f"one-off compression needs at least one full segment "
            f"({l_seg} items), got {len(prefix)}")
    if len(prefix) % l_seg != 0:
        raise ValueError(
            f"prefix length {len(prefix)} is not a whole number of segments; "
            f"keep the remainder as working memory")
    segs = segment(prefix, l_seg).segments
    layout = global_layout(segs, params.arch["C"])
    with T.no_grad():
        out = transformer_forward(embed_layout(layout, None, params),
                                  build_stage1_mask(layout), params)
    if mode == OVERWRITE:
        lo, hi = layout.query_block(len(segs) - 1)
        content = out.data[lo:hi].copy()
    else:
        blocks = [out.data[slice(*layout.query_block(h))] for h in range(len(segs))]
        content = np.concatenate(blocks, axis=0)
    return MemoryState(mode=mode, slots=params.arch["C"],
                       dim=params.arch["d"], content=content,
                       segments_absorbed=len(segs))


def _quantiles(samples: list[float]) -> dict:
    arr = np.array(samples, dtype=np.float64) * 1000.0
    return {"median_ms": float(np.median(arr)),
            "p95_ms": float(np.percentile(arr, 95)),
            "n": len(samples)}


def bench(mem_params: ModelParams, full_params: ModelParams,
          streams: Sequence[Sequence[int]], reps: int = 3) -> dict:
    """Latency and storage comparison across serving protocols.

    For each stream: the memory protocol decodes [memory; working] after
    replaying the stream through a session; SHORT decodes the last segment
    of raw items; FULL decodes the last ``n_positions`` items of the plain
    full-context model. Also times one memory update and reports persisted
    bytes per user for both modes.
    """
    if reps <= 0 or not streams:
        return {"reps": 0, "protocols": {}, "storage": {}}
    from .memory import serialize_memory  # local to avoid unused at import
    l_seg = mem_params.arch["n_positions"]
    l_full = full_params.arch["n_positions"]
    lat = {"mem": [], "short": [], "full": [], "update": []}
    storage = {}
    for items in streams:
        items = list(items)
        sess = InferenceSession(mem_params, mode=OVERWRITE)
        sess.ingest_many(items)
        app = InferenceSession(mem_params, mode=APPEND)
        app.ingest_many(items)
        if sess.memory is not None:
            storage.setdefault("rec2pm_o_bytes", len(serialize_memory(sess.memory)))
            storage.setdefault("rec2pm_o_kv_bytes", kv_footprint_model(
                sess.memory.slots, sess.memory.dim,
                mem_params.arch["n_layers"], 1, OVERWRITE))
        if app.memory is not None:
            storage.setdefault("rec2pm_a_bytes", len(serialize_memory(app.memory)))
            storage.setdefault("rec2pm_a_kv_bytes", kv_footprint_model(
                app.memory.slots, app.memory.dim,
                mem_params.arch["n_layers"],
                app.memory.segments_absorbed, APPEND))
        storage.setdefault("full_kv_bytes", 2 * full_params.arch["n_layers"]
                           * l_full * full_params.arch["d"] * 4)
        mem, working = sess._context()
        short_window = items[-l_seg:]
        full_window = items[-l_full:]
        update_seg = items[-l_seg:]
        for _ in range(reps):
            t0 = time.perf_counter()
            with T.no_grad():
                score_context(mem_params, mem, working)
            lat["mem"].append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            with T.no_grad():
                score_context(mem_params, None, short_window)
            lat["short"].append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            with T.no_grad():
                score_context(full_params, None, full_window)
            lat["full"].append(time.perf_counter() - t0)
            if sess.memory is not None:
                t0 = time.perf_counter()
                update_memory(sess.memory, update_seg, mem_params)
                lat["update"].append(time.perf_counter() - t0)
    report = {"reps": reps, "n_streams": len(streams),
              "protocols": {k: _quantiles(v) for k, v in lat.items() if v},
              "storage": storage}
    return report
