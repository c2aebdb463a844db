"""Synthetic interaction streams, dataset files, splitting, segmentation.

The generator plants a long-term signal that no short window can fully
recover: each user keeps a fixed set of preferred categories for the whole
stream and, within each preferred category, a fixed user-specific ranking
over its items. Every step draws one of three branches:

  long_term_weight  -> an item from the currently active preferred
                       category, sampled by the user's within-category
                       ranking weights;
  noise_rate        -> a uniform random catalog item;
  otherwise         -> the current session anchor item repeated verbatim
                       (a new anchor, one of the user's top-ranked items
                       from a random preferred category, is drawn every
                       ``session_burst_len`` burst steps).

The active preferred category rotates on a fixed per-user cycle: a random
permutation of the preferred set, advancing every ``pref_dwell`` steps.
Each category's item-level taste is therefore expressed in a few short,
widely separated stretches of the stream. A recent window shows which
category is active but almost none of the user's history inside it, so
ranking well requires carrying item statistics forward from stretches
long since scrolled away, and carrying them faithfully: whoever degrades
old state loses exactly the evidence the next revisit needs. Noise is
unpredictable for everyone. Bursts replay the user's category favorites,
which a good long-term profile already ranks near the top.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

ZIPF_EXPONENT = 1.2  # within-category preference sharpness


class DatasetError(ValueError):
    """Invalid dataset content or file."""


@dataclass
class User:
    user_id: str
    items: list[int]
    categories: Optional[list[int]] = None


@dataclass
class Dataset:
    catalog_size: int
    users: list[User] = field(default_factory=list)

    def validate(self) -> "Dataset":
        for u in self.users:
            if len(u.items) < 3:
                raise DatasetError(
                    f"user {u.user_id}: needs >= 3 interactions, has {len(u.items)}")
            bad = [i for i in u.items if not (0 <= i < self.catalog_size)]
            if bad:
                raise DatasetError(
                    f"user {u.user_id}: item id {bad[0]} outside catalog "
                    f"[0, {self.catalog_size})")
            if u.categories is not None and len(u.categories) != len(u.items):
                raise DatasetError(
                    f"user {u.user_id}: {len(u.categories)} categories for "
                    f"{len(u.items)} items")
        return self


@dataclass
class SyntheticSpec:
    n_users: int = 2000
    seq_len: int = 67
    catalog_size: int = 500
    n_categories: int = 25
    prefs_per_user: int = 8
    long_term_weight: float = 0.5
    session_burst_len: int = 4
    pref_dwell: int = 4
    noise_rate: float = 0.2
    seed: int = 0

    def validate(self) -> "SyntheticSpec":
        if not (0 <= self.long_term_weight <= 1 and 0 <= self.noise_rate <= 1):
            raise DatasetError("branch rates must lie in [0, 1]")
        if self.long_term_weight + self.noise_rate > 1:
            raise DatasetError("long_term_weight + noise_rate must be <= 1")
        if self.n_categories > self.catalog_size:
            raise DatasetError("more categories than items")
        if self.prefs_per_user > self.n_categories:
            raise DatasetError("prefs_per_user exceeds category count")
        if min(self.n_users, self.seq_len, self.session_burst_len,
               self.pref_dwell) < 1:
            raise DatasetError("counts must be positive")
        return self


def item_category(item: int, spec_or_n) -> int:
    n = spec_or_n.n_categories if isinstance(spec_or_n, SyntheticSpec) else spec_or_n
    return item % n


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    cats = np.arange(spec.catalog_size) % spec.n_categories
    cat_items = [np.flatnonzero(cats == c) for c in range(spec.n_categories)]

    users: list[User] = []
    for u in range(spec.n_users):
        prefs = rng.choice(spec.n_categories, size=spec.prefs_per_user,
                           replace=False)
        # user-specific ranking of each preferred category's items
        pref_weights = {}
        for c in prefs:
            ids = rng.permutation(cat_items[c])
            w = 1.0 / np.arange(1, len(ids) + 1) ** ZIPF_EXPONENT
            pref_weights[int(c)] = (ids, w / w.sum())

        def pref_draw(step):
            active = prefs[(step // spec.pref_dwell) % len(prefs)]
            ids, w = pref_weights[int(active)]
            return int(rng.choice(ids, p=w))

        def anchor_draw():
            ids, _ = pref_weights[int(rng.choice(prefs))]
            return int(ids[0])

        anchor = anchor_draw()
        burst_used = 0
        items = []
        for t in range(spec.seq_len):
            r = rng.random()
            if r < spec.long_term_weight:
                items.append(pref_draw(t))
            elif r < spec.long_term_weight + spec.noise_rate:
                items.append(int(rng.integers(spec.catalog_size)))
            else:
                if burst_used >= spec.session_burst_len:
                    anchor = anchor_draw()
                    burst_used = 0
                items.append(anchor)
                burst_used += 1
        users.append(User(user_id=f"u{u}", items=items,
                          categories=[int(cats[i]) for i in items]))
    return Dataset(catalog_size=spec.catalog_size, users=users).validate()


def save_dataset(dataset: Dataset, path) -> None:
    with open(path, "w") as f:
        for u in dataset.users:
            rec = {"user": u.user_id, "items": u.items}
            if u.categories is not None:
                rec["cats"] = u.categories
            f.write(json.dumps(rec) + "\n")


def load_dataset(path, catalog_size: Optional[int] = None) -> Dataset:
    """Read line-delimited JSON; the catalog size defaults to max id + 1."""
    users: list[User] = []
    max_id = -1
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                user = User(user_id=str(rec["user"]),
                            items=[int(i) for i in rec["items"]],
                            categories=[int(c) for c in rec["cats"]]
                            if "cats" in rec else None)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise DatasetError(f"{path}: line {lineno}: {e}") from None
            users.append(user)
            if user.items:
                max_id = max(max_id, max(user.items))
    size = catalog_size if catalog_size is not None else max_id + 1
    return Dataset(catalog_size=size, users=users).validate() if users else \
        Dataset(catalog_size=max(size, 0), users=[])


def split_leave_one_out(items: Sequence[int]) -> tuple[list[int], int, int]:
    """train = items[:-2], valid = items[-2], test = items[-1]."""
    if len(items) < 3:
        raise DatasetError(f"need >= 3 interactions to split, got {len(items)}")
    return list(items[:-2]), int(items[-2]), int(items[-1])


@dataclass
class SegmentedHistory:
    segments: list[list[int]]
    l_seg: int

    def flatten(self) -> list[int]:
        return [it for seg in self.segments for it in seg]

    @property
    def full_count(self) -> int:
        return sum(1 for s in self.segments if len(s) == self.l_seg)


def segment(items: Sequence[int], l_seg: int) -> SegmentedHistory:
    """Greedy left-to-right chunks; only the last may be short."""
    if l_seg < 1:
        raise DatasetError(f"segment length must be >= 1, got {l_seg}")
    segs = [list(items[i:i + l_seg]) for i in range(0, len(items), l_seg)]
    return SegmentedHistory(segments=segs, l_seg=l_seg)


def expected_preferred_mass(spec: SyntheticSpec) -> float:
    """Probability that a generated item lies in a preferred category.

    Preference draws and burst anchors always land there; noise items are
    uniform over the catalog and hit one only by chance.
    """
    chance = spec.prefs_per_user / spec.n_categories
    burst = 1.0 - spec.long_term_weight - spec.noise_rate
    return (spec.long_term_weight + burst
            + spec.noise_rate * chance)
