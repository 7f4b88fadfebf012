"""Attention-driven downsampler (ADS).

Training path for ``N`` instance features ``h`` and factor ``k``::

    a = softmax(mlp(h))           # one score per instance, sums to 1
    u = h + a * h                 # residual emphasis
    v = u @ W_L
    v = v[shuffle]                # training only
    groups of k consecutive rows  # ceil(N / k) groups, last may be short
    pool each group (max | random member)
    out = pooled @ W_P            # (ceil(N / k), D)

The inference path skips shuffle and pooling and keeps all ``N`` rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor


@dataclass
class AdsParams:
    attn_w1: Tensor
    attn_b1: Tensor
    attn_w2: Tensor
    attn_b2: Tensor
    w_linear: Tensor
    w_proj: Tensor
    k: int = 4
    pool: str = "random"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"downsample factor must be >= 1, got {self.k}")
        if self.pool not in ("random", "max"):
            raise ValueError(f"pool must be 'random' or 'max', got {self.pool!r}")

    @classmethod
    def init(cls, dim: int, hidden: int = 128, k: int = 4, pool: str = "random", rng=None) -> "AdsParams":
        rng = np.random.default_rng(rng)
        s1 = 1.0 / math.sqrt(dim)
        s2 = 1.0 / math.sqrt(hidden)
        return cls(
            attn_w1=ag.parameter(rng.uniform(-s1, s1, (dim, hidden))),
            attn_b1=ag.parameter(np.zeros(hidden)),
            attn_w2=ag.parameter(rng.uniform(-s2, s2, hidden)),
            attn_b2=ag.parameter(np.zeros(())),
            # near-identity so an untrained ADS roughly passes features through
            w_linear=ag.parameter(np.eye(dim) + 0.01 * rng.standard_normal((dim, dim))),
            w_proj=ag.parameter(np.eye(dim) + 0.01 * rng.standard_normal((dim, dim))),
            k=k,
            pool=pool,
        )

    def parameters(self) -> list[Tensor]:
        return [self.attn_w1, self.attn_b1, self.attn_w2, self.attn_b2, self.w_linear, self.w_proj]


def instance_unshuffle(n: int, k: int) -> list[np.ndarray]:
    """Index groups of ``k`` consecutive positions; the last group holds the remainder."""
    if n < 1 or k < 1:
        raise ValueError(f"need n >= 1 and k >= 1, got n={n}, k={k}")
    return [np.arange(start, min(start + k, n)) for start in range(0, n, k)]


def attention_scores(h, params: AdsParams) -> Tensor:
    """Softmax-normalised instance scores from the shallow tanh MLP."""
    hidden = ag.tanh(ag.add(ag.matmul(h, params.attn_w1), params.attn_b1))
    logits = ag.add(ag.matmul(hidden, params.attn_w2), params.attn_b2)
    return ag.softmax(logits, axis=0)


def _enhance(h, params: AdsParams) -> tuple[Tensor, Tensor]:
    h = ag.as_tensor(h)
    if h.ndim != 2 or h.shape[0] < 1:
        raise ag.ShapeError(f"ADS expects an (N>=1, D) input, got {h.shape}")
    a = attention_scores(h, params)
    u = ag.add(h, ag.rowscale(h, a))
    return ag.matmul(u, params.w_linear), a


def ads_forward_train(
    features,
    params: AdsParams,
    seed=None,
    shuffle: bool = True,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """Downsample ``N`` rows to ``ceil(N / k)``.  Returns ``(output, attention)``."""
    v, a = _enhance(features, params)
    n = v.shape[0]
    if rng is None:
        rng = np.random.default_rng(seed)
    if shuffle:
        v = ag.take_rows(v, rng.permutation(n))
    groups = instance_unshuffle(n, params.k)
    if params.k == 1:
        pooled = v
    elif params.pool == "max":
        pooled = ag.group_max(v, groups)
    else:
        pick = np.array([g[rng.integers(len(g))] for g in groups])
        pooled = ag.take_rows(v, pick)
    return ag.matmul(pooled, params.w_proj), a


def ads_forward_infer(features, params: AdsParams) -> tuple[Tensor, Tensor]:
    """Per-instance transform (no shuffle, no pooling); keeps all ``N`` rows."""
    v, a = _enhance(features, params)
    return ag.matmul(v, params.w_proj), a
