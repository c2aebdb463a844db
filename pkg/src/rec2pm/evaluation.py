"""Ranking metrics, evaluation protocols, ablations, attention export.

Evaluation is leave-one-out: the last interaction of each user is the test
target and the second-to-last the validation target; everything before the
target is context. A protocol decides how that context is consumed: a short
raw window, a long raw window, or the compressed memory (built either
iteratively, in one shot, or with overlapped segments).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .backbone import ModelParams, Role
from .data import Dataset, split_leave_one_out
from .inference import (ITERATIVE, InferenceSession, oneoff_compress,
                        rank_items, score_context, split_for_oneoff)
from .memory import OVERWRITE, encode_memory

SHORT = "short"
FULL = "full"
MEM_ITERATIVE = "mem-iterative"
MEM_ONEOFF = "mem-oneoff"
MEM_OVERLAP = "mem-overlap"
PROTOCOLS = (SHORT, FULL, MEM_ITERATIVE, MEM_ONEOFF, MEM_OVERLAP)

METRIC_KEYS = ("H@1", "H@10", "H@50", "N@10", "N@50")


class ProtocolError(ValueError):
    """Protocol incompatible with the supplied model or arguments."""


def rank_of_target(scores: np.ndarray, target: int) -> int:
    """1-based rank under descending score with ascending-id tie-break."""
    s = scores[target]
    better = int(np.count_nonzero(scores > s))
    tied_before = int(np.count_nonzero((scores == s)
                                       & (np.arange(len(scores)) < target)))
    return 1 + better + tied_before


def hit_at_k(rank: int, k: int) -> float:
    if rank < 1:
        raise ValueError(f"rank is 1-based, got {rank}")
    return 1.0 if rank <= k else 0.0


def ndcg_at_k(rank: int, k: int) -> float:
    if rank < 1:
        raise ValueError(f"rank is 1-based, got {rank}")
    return float(1.0 / np.log2(rank + 1)) if rank <= k else 0.0


@dataclass
class EvalReport:
    protocol: str
    n_users: int
    metrics: dict
    seeds: list[int] = field(default_factory=list)

    def check(self) -> "EvalReport":
        m = self.metrics
        if not all(0.0 <= m[k] <= 100.0 for k in METRIC_KEYS):
            raise ValueError(f"metrics out of percent range: {m}")
        if not (m["H@1"] <= m["H@10"] <= m["H@50"]):
            raise ValueError(f"hit rate must be non-decreasing in K: {m}")
        if m["N@10"] > m["H@10"] + 1e-9 or m["N@50"] > m["H@50"] + 1e-9:
            raise ValueError(f"NDCG cannot exceed hit rate: {m}")
        return self

    def to_json(self) -> str:
        return json.dumps({"protocol": self.protocol, "n_users": self.n_users,
                           "seeds": self.seeds, "metrics": self.metrics},
                          sort_keys=True)


def _context_scores(params: ModelParams, protocol: str, ctx: list[int],
                    mode: str, overlap: int) -> np.ndarray:
    n_pos = params.arch["n_positions"]
    if protocol == SHORT or protocol == FULL:
        window = ctx[-n_pos:]
        with T.no_grad():
            return score_context(params, None, window)
    if protocol == MEM_ONEOFF:
        to_compress, working = split_for_oneoff(ctx, n_pos)
        mem = None
        if to_compress:
            mem = oneoff_compress(to_compress, params, mode).content
        with T.no_grad():
            return score_context(params, mem, working)
    sess = InferenceSession(params, mode=mode, protocol=ITERATIVE,
                            overlap=overlap)
    sess.ingest_many(ctx)
    _, scores = sess.predict_next()
    return scores


def evaluate(params: ModelParams, dataset: Dataset, protocol: str,
             mode: str = OVERWRITE, target: str = "test",
             overlap: Optional[int] = None,
             user_cap: Optional[int] = None,
             seed: Optional[int] = None) -> EvalReport:
    """Rank the held-out item for every user under one protocol."""
    if protocol not in PROTOCOLS:
        raise ProtocolError(f"unknown protocol {protocol!r}; pick from {PROTOCOLS}")
    kind = params.arch["kind"]
    if protocol.startswith("mem-") and kind != "mem":
        raise ProtocolError(f"protocol {protocol} needs a memory model, got kind={kind!r}")
    if target not in ("test", "valid"):
        raise ValueError(f"target must be 'test' or 'valid', got {target!r}")
    if overlap is None:
        overlap = params.arch["n_positions"] // 4 if protocol == MEM_OVERLAP else 0
    if protocol != MEM_OVERLAP and overlap:
        raise ProtocolError(f"overlap={overlap} only applies to {MEM_OVERLAP}")

    users = dataset.users if user_cap is None else dataset.users[:user_cap]
    totals = {k: 0.0 for k in METRIC_KEYS}
    for u in users:
        train, valid, test = split_leave_one_out(u.items)
        if target == "test":
            ctx, tgt = train + [valid], test
        else:
            ctx, tgt = train, valid
        scores = _context_scores(params, protocol, ctx, mode, overlap)
        rank = rank_of_target(scores, tgt)
        for k in (1, 10, 50):
            totals[f"H@{k}"] += hit_at_k(rank, k)
        for k in (10, 50):
            totals[f"N@{k}"] += ndcg_at_k(rank, k)
    n = max(len(users), 1)
    metrics = {k: 100.0 * v / n for k, v in totals.items()}
    return EvalReport(protocol=protocol, n_users=len(users), metrics=metrics,
                      seeds=[seed] if seed is not None else []).check()


def mean_reports(reports: Sequence[EvalReport]) -> EvalReport:
    """Arithmetic mean of per-seed reports (same protocol)."""
    if not reports:
        raise ValueError("no reports to average")
    protocols = {r.protocol for r in reports}
    if len(protocols) != 1:
        raise ValueError(f"cannot average across protocols {protocols}")
    metrics = {k: float(np.mean([r.metrics[k] for r in reports]))
               for k in METRIC_KEYS}
    seeds = [s for r in reports for s in r.seeds]
    return EvalReport(protocol=reports[0].protocol,
                      n_users=reports[0].n_users, metrics=metrics,
                      seeds=seeds).check()


def run_ablation_suite(dataset: Dataset, base_cfg, slot_counts: Sequence[int] = (1, 2, 4),
                       recon_weight: float = 0.1,
                       out_path=None) -> dict:
    """Train/evaluate the standard comparison grid on one seed.

    Rows: consistency weight {1, 0}, a memory-slot sweep, explicit
    reconstruction supervision on/off, and segment overlap at L_seg/4.
    """
    from . import training  # deferred: training depends on this module
    from dataclasses import replace

    table: dict[str, dict] = {}

    def row(tag, cfg, protocol=MEM_ITERATIVE):
        params, log = training.train(dataset, cfg)
        rep = evaluate(params, dataset, protocol, mode=cfg.mode)
        entry = {"config": {"consistency_weight": cfg.consistency_weight,
                            "c": cfg.c, "recon_weight": cfg.recon_weight,
                            "protocol": protocol},
                 "metrics": rep.metrics,
                 "final_loss_con": log[-1]["loss_con"] if log else None}
        table[tag] = entry
        return params

    base = replace(base_cfg, trainer="rec2pm")
    lam1 = row("lambda1", replace(base, consistency_weight=1.0))
    row("lambda0", replace(base, consistency_weight=0.0))
    for c in slot_counts:
        if c == base.c:
            table[f"slots{c}"] = dict(table["lambda1"])
        else:
            row(f"slots{c}", replace(base, c=c))
    row("recon", replace(base, recon_weight=recon_weight))
    overlap_rep = evaluate(lam1, dataset, MEM_OVERLAP, mode=base.mode)
    table["overlap"] = {"config": {"consistency_weight": 1.0, "c": base.c,
                                   "recon_weight": 0.0,
                                   "protocol": MEM_OVERLAP},
                        "metrics": overlap_rep.metrics,
                        "final_loss_con": table["lambda1"]["final_loss_con"]}
    if out_path is not None:
        with open(out_path, "w") as f:
            json.dump(table, f, indent=2, sort_keys=True)
    return table


def export_attention(params: ModelParams, session: InferenceSession,
                     path, per_layer: bool = False,
                     categories: Optional[dict] = None) -> list[tuple]:
    """Attention of each query slot during the last memory update, as CSV.

    Default rows average the probability over layers and heads, one row per
    (slot, attended position); ``kind`` names the attended slot's role. With
    ``per_layer`` every layer/head pair is emitted separately. With a
    ``categories`` map extra rows aggregate item-position weight by item
    category.
    """
    if session.last_update is None:
        raise ValueError("session has no completed memory update to export")
    before, seg = session.last_update
    with T.no_grad():
        _, maps, layout = encode_memory(seg, params, memory=before,
                                        collect_attention=True)
    t = len(layout)
    c_slots = params.arch["C"]
    query_rows = list(range(t - c_slots, t))
    rows: list[tuple] = []
    role_names = {Role.MEMORY: "MEMORY", Role.ITEM: "ITEM", Role.QUERY: "QUERY"}

    def emit(weights: np.ndarray, kind_fmt):
        # weights: (C, T), one distribution per query slot
        for c in range(c_slots):
            for j in range(t):
                rows.append((c, j, float(weights[c, j]), kind_fmt(j)))

    if per_layer:
        for li, layer in enumerate(maps):
            for hi, head in enumerate(layer):
                emit(head[query_rows], lambda j, li=li, hi=hi: f"L{li}H{hi}")
    else:
        mean = np.stack([h for layer in maps for h in layer]).mean(axis=0)
        emit(mean[query_rows], lambda j: role_names[layout.slots[j].role])
        if categories is not None:
            mass: dict[tuple[int, int], float] = {}
            for c, qr in enumerate(query_rows):
                for j, slot in enumerate(layout.slots):
                    if slot.role == Role.ITEM:
                        cat = categories[slot.item_id]
                        mass[(c, cat)] = mass.get((c, cat), 0.0) + float(mean[qr, j])
            for (c, cat), w in sorted(mass.items()):
                rows.append((c, cat, w, "CATEGORY"))
    if path is not None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["slot", "target", "weight", "kind"])
            writer.writerows(rows)
    return rows
