"""Isolated masks that keep bags inside a pack from seeing each other.

For a pack with per-position bag ids ``b`` (0 = padding) we build

* presence ``m[j] = b[j] != 0``
* feature mask ``M[j, c] = m[j] * (b[j] == c + 1)``, shape ``(L, B)``
* attention mask ``A[i, j] = 0`` if both positions are real and from the same
  bag, else ``NEG_INF``
* valid-token vector ``v = m`` and bag-label vector ``c = b``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import autograd as ag
from .autograd import NEG_INF, Tensor
from .packing import Pack, Segment


@dataclass
class IsolatedMasks:
    presence: np.ndarray
    bag_ids: np.ndarray
    feature_mask: np.ndarray
    valid: np.ndarray
    class_labels: np.ndarray

    @cached_property
    def attn_mask(self) -> np.ndarray:
        """``(L, L)`` mask, built on first use (pooling models never need it)."""
        m = self.presence
        same = self.bag_ids[:, None] == self.bag_ids[None, :]
        allowed = np.outer(m, m) * same
        return np.where(allowed > 0, 0.0, NEG_INF)

    @property
    def n_bags(self) -> int:
        return self.feature_mask.shape[1]

    def present_bags(self) -> np.ndarray:
        """1-based ids of bags with at least one position in this pack."""
        return np.flatnonzero(self.feature_mask.sum(axis=0) > 0) + 1


def build_masks(pack: Pack | np.ndarray, B: int) -> IsolatedMasks:
    ids = np.asarray(pack.bag_ids if isinstance(pack, Pack) else pack, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() > B):
        raise ValueError(f"bag ids must lie in [0, {B}], got range [{ids.min()}, {ids.max()}]")
    m = (ids != 0).astype(np.float64)
    feature_mask = m[:, None] * (ids[:, None] == np.arange(1, B + 1)[None, :])
    return IsolatedMasks(m, ids, feature_mask, m.copy(), ids.copy())


def block_attention_mask(segments: list[Segment], L: int) -> np.ndarray:
    """Block-diagonal attention mask assembled directly from a segment table."""
    attn = np.full((L, L), NEG_INF)
    for s in segments:
        attn[s.start:s.start + s.length, s.start:s.start + s.length] = 0.0
    return attn


def bag_attention(scores, masks: IsolatedMasks) -> tuple[np.ndarray, Tensor]:
    """Per-bag softmax of an ``L``-vector of scores.

    Returns the present bag ids and a ``(n_present, L)`` weight matrix whose row
    for bag ``b`` is the softmax over that bag's positions and exactly 0 elsewhere.
    """
    scores = ag.as_tensor(scores)
    bags = masks.present_bags()
    L = scores.shape[0]
    member = masks.feature_mask[:, bags - 1].T.astype(bool)  # (n_present, L)
    tiled = ag.matmul(np.ones((len(bags), 1)), ag.reshape(scores, (1, L)))
    weights = ag.softmax(ag.masked_fill(tiled, ~member, NEG_INF), axis=1)
    return bags, weights


def masked_softmax_attention(scores, masks: IsolatedMasks):
    """Normalise attention scores inside each bag of a pack.

    ``scores`` may be an ``L``-vector (one score per position, e.g. attention
    pooling) or an ``(L, L)`` matrix (query-key scores).  For the vector form
    the result is ``(bag_ids, weights)`` from :func:`bag_attention`.  For the
    matrix form each row is softmaxed under the attention mask and rows at
    padding positions are zeroed.
    """
    scores = ag.as_tensor(scores)
    if scores.ndim == 1:
        return bag_attention(scores, masks)
    L = masks.presence.shape[0]
    if scores.shape != (L, L):
        raise ag.ShapeError(f"masked_softmax_attention: scores {scores.shape} vs pack length {L}")
    blocked = masks.attn_mask < 0
    w = ag.softmax(ag.masked_fill(scores, blocked, NEG_INF), axis=1)
    return ag.mul(w, np.outer(masks.presence, np.ones(L)))


def select_valid_tokens(pack: Pack, masks: IsolatedMasks | None = None) -> dict[int, np.ndarray]:
    """Rows of each bag present in the pack, in position order, keyed by bag id."""
    if masks is None:
        masks = build_masks(pack, int(pack.bag_ids.max(initial=0)))
    out: dict[int, np.ndarray] = {}
    for b in masks.present_bags():
        rows = np.flatnonzero(masks.feature_mask[:, b - 1] > 0)
        out[int(b)] = pack.features[rows]
    return out


def reassemble(packs: list[Pack], B: int) -> dict[int, np.ndarray]:
    """Concatenate each bag's segments across several packs, in pack order."""
    parts: dict[int, list[np.ndarray]] = {}
    for p in packs:
        for b, rows in select_valid_tokens(p, build_masks(p, B)).items():
            parts.setdefault(b, []).append(rows)
    return {b: np.concatenate(v) for b, v in parts.items()}
