"""Instance splitting and next-fit packing of variable-length bags.

A pack is a fixed-length ``(L, D)`` block holding whole bags back to back,
followed by zero padding.  Bags are placed in input order; a bag that does not
fit the current remainder closes the pack.  Bags are never split, so one bag
lands in exactly one pack (after truncation to the pack length).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import ConfigError


@dataclass(frozen=True)
class Segment:
    bag_id: int  # 1-based position in the packer's input list
    start: int
    length: int


@dataclass
class SamplingSplit:
    kept: np.ndarray
    discarded: np.ndarray
    ratio: float
    seed: int | Sequence[int] | None = None


@dataclass
class Pack:
    features: np.ndarray
    bag_ids: np.ndarray
    segments: list[Segment]

    @property
    def length(self) -> int:
        return self.bag_ids.shape[0]

    @property
    def n_pad(self) -> int:
        return int(np.count_nonzero(self.bag_ids == 0))


@dataclass
class PackBatch:
    packs: list[Pack]
    length: int
    branch: str = "main"
    n_bags: int = 0
    truncated: int = 0
    lengths: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.packs)

    @property
    def n_tokens(self) -> int:
        return sum(p.length - p.n_pad for p in self.packs)


# ---------------------------------------------------------------- sampling


def bag_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream per (seed, keys...) so each bag's draw is reproducible."""
    return np.random.default_rng([int(seed), *map(int, keys)])


def split_from_mask(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mask = np.asarray(mask).astype(bool)
    return np.flatnonzero(mask), np.flatnonzero(~mask)


def split_instances(
    n: int,
    ratio: float,
    min_keep: int = 0,
    seed: int | Sequence[int] | None = None,
    min_discard: int = 0,
    rng: np.random.Generator | None = None,
) -> SamplingSplit:
    """Bernoulli split of ``n`` instance indices into kept / discarded sets.

    Each instance is kept with probability ``1 - ratio``.  Afterwards the kept
    set is topped up to ``min(min_keep, n)`` and then the discarded set to
    ``min(min_discard, n - that)`` by moving randomly chosen indices across.
    """
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"split ratio must lie in (0, 1), got {ratio}")
    if n < 1:
        raise ValueError("cannot split an empty bag")
    if rng is None:
        rng = np.random.default_rng(seed)
    mask = rng.random(n) >= ratio
    need_keep = min(min_keep, n)
    have = int(mask.sum())
    if have < need_keep:
        pool = np.flatnonzero(~mask)
        mask[rng.choice(pool, size=need_keep - have, replace=False)] = True
    need_disc = min(min_discard, n - need_keep)
    have_disc = n - int(mask.sum())
    if have_disc < need_disc:
        movable = int(mask.sum()) - need_keep
        pool = np.flatnonzero(mask)
        mask[rng.choice(pool, size=min(need_disc - have_disc, movable), replace=False)] = False
    kept, disc = split_from_mask(mask)
    return SamplingSplit(kept, disc, ratio, seed)


def random_sample_fixed(features: np.ndarray, target_n: int, seed=None) -> np.ndarray:
    """Fixed-length baseline: subsample without replacement, or zero-pad up to ``target_n``."""
    if target_n < 1:
        raise ValueError("target_n must be >= 1")
    x = np.asarray(features, dtype=np.float64)
    rng = np.random.default_rng(seed)
    n = x.shape[0]
    if n >= target_n:
        return x[rng.choice(n, size=target_n, replace=False)]
    return np.concatenate([x, np.zeros((target_n - n, x.shape[1]))])


# ---------------------------------------------------------------- packing


def adapt_pack_length(lengths: Sequence[int], L: int) -> int:
    """Double the pack length once when some bag is longer than ``L``."""
    if L < 1:
        raise ValueError("pack length must be >= 1")
    return 2 * L if len(lengths) and max(lengths) > L else L


def plan_packs(lengths: Sequence[int], L: int, max_bags: int | None = None) -> list[list[Segment]]:
    """Next-fit layout for bags of the given lengths (each already <= ``L``).

    Zero-length bags are skipped.  ``max_bags`` additionally closes a pack once
    it holds that many bags, which gives the fixed-group comparison strategy.
    """
    packs: list[list[Segment]] = []
    cur: list[Segment] = []
    used = 0
    for i, n in enumerate(lengths):
        n = int(n)
        if n == 0:
            continue
        if n > L:
            raise ValueError(f"bag {i + 1} has length {n} > pack length {L}; truncate first")
        if cur and (used + n > L or (max_bags is not None and len(cur) >= max_bags)):
            packs.append(cur)
            cur, used = [], 0
        cur.append(Segment(i + 1, used, n))
        used += n
    if cur:
        packs.append(cur)
    return packs


def pack_sequences(
    bags: Sequence[np.ndarray],
    L: int,
    adapt: bool = True,
    branch: str = "main",
    max_bags: int | None = None,
) -> PackBatch:
    """Pack bag matrices into fixed-length packs (truncating bags longer than the pack)."""
    if not bags:
        return PackBatch([], L, branch)
    dims = {b.shape[1] for b in bags}
    if len(dims) != 1:
        raise ValueError(f"all bags must share the feature dim, got {sorted(dims)}")
    (d,) = dims
    lengths = [int(b.shape[0]) for b in bags]
    L_eff = adapt_pack_length(lengths, L) if adapt else L
    clipped = [min(n, L_eff) for n in lengths]
    packs = []
    for segs in plan_packs(clipped, L_eff, max_bags):
        feats = np.zeros((L_eff, d))
        ids = np.zeros(L_eff, dtype=np.int64)
        for s in segs:
            feats[s.start:s.start + s.length] = bags[s.bag_id - 1][: s.length]
            ids[s.start:s.start + s.length] = s.bag_id
        packs.append(Pack(feats, ids, segs))
    return PackBatch(packs, L_eff, branch, len(bags), sum(lengths) - sum(clipped), lengths)


def padding_ratio(batch: PackBatch) -> float:
    total = sum(p.length for p in batch.packs)
    if total == 0:
        raise ValueError("padding ratio of an empty batch is undefined")
    return sum(p.n_pad for p in batch.packs) / total


def layout_padding_ratio(lengths: Sequence[int], L: int, adapt: bool = True, max_bags: int | None = None) -> float:
    """Padding ratio from lengths alone (no feature matrices materialised)."""
    L_eff = adapt_pack_length(lengths, L) if adapt else L
    plan = plan_packs([min(int(n), L_eff) for n in lengths], L_eff, max_bags)
    if not plan:
        raise ValueError("padding ratio of an empty batch is undefined")
    filled = sum(s.length for segs in plan for s in segs)
    return 1.0 - filled / (len(plan) * L_eff)


def pad_to_max_utilization(lengths: Sequence[int], batch_size: int) -> float:
    """Non-pad fraction when each mini-batch is padded to its longest bag."""
    lengths = list(lengths)
    real = total = 0
    for i in range(0, len(lengths), batch_size):
        chunk = lengths[i:i + batch_size]
        real += sum(chunk)
        total += max(chunk) * len(chunk)
    return real / total


def packed_utilization(lengths: Sequence[int], batch_size: int, L: int) -> float:
    """Non-pad fraction when each mini-batch is packed with adaptive next-fit."""
    lengths = list(lengths)
    real = total = 0
    for i in range(0, len(lengths), batch_size):
        chunk = lengths[i:i + batch_size]
        L_eff = adapt_pack_length(chunk, L)
        plan = plan_packs([min(n, L_eff) for n in chunk], L_eff)
        real += sum(s.length for segs in plan for s in segs)
        total += len(plan) * L_eff
    return real / total
