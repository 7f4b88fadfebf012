"""Gated-attention MIL aggregator shared by the main and residual branches."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .ads import AdsParams
from .autograd import NEG_INF, Tensor
from .data import PersistenceError
from .masks import IsolatedMasks, bag_attention

CHECKPOINT_MAGIC = b"PMC1"
CHECKPOINT_VERSION = 1


@dataclass
class AbmilParams:
    V: Tensor
    bV: Tensor
    U: Tensor
    bU: Tensor
    w: Tensor
    Wc: Tensor
    bc: Tensor

    @classmethod
    def init(cls, dim: int, out: int, d_attn: int = 128, rng=None) -> "AbmilParams":
        rng = np.random.default_rng(rng)
        s_in = 1.0 / math.sqrt(dim)
        s_att = 1.0 / math.sqrt(d_attn)
        return cls(
            V=ag.parameter(rng.uniform(-s_in, s_in, (dim, d_attn))),
            bV=ag.parameter(np.zeros(d_attn)),
            U=ag.parameter(rng.uniform(-s_in, s_in, (dim, d_attn))),
            bU=ag.parameter(np.zeros(d_attn)),
            w=ag.parameter(rng.uniform(-s_att, s_att, d_attn)),
            Wc=ag.parameter(rng.uniform(-s_in, s_in, (dim, out))),
            bc=ag.parameter(np.zeros(out)),
        )

    def parameters(self) -> list[Tensor]:
        return [self.V, self.bV, self.U, self.bU, self.w, self.Wc, self.bc]

    @property
    def out_dim(self) -> int:
        return self.Wc.shape[1]


def attention_logits(h, params: AbmilParams) -> Tensor:
    """``w . (tanh(h V) * sigmoid(h U))`` for every row of ``h``."""
    gate = ag.mul(
        ag.tanh(ag.add(ag.matmul(h, params.V), params.bV)),
        ag.sigmoid(ag.add(ag.matmul(h, params.U), params.bU)),
    )
    return ag.matmul(gate, params.w)


def aggregate_bag(h, params: AbmilParams) -> tuple[Tensor, Tensor]:
    """Standalone attention pooling of one bag -> ``(z, weights)``."""
    h = ag.as_tensor(h)
    a = ag.softmax(attention_logits(h, params), axis=0)
    return ag.matmul(a, h), a


def aggregate_main(pack_features, masks: IsolatedMasks, params: AbmilParams) -> tuple[np.ndarray, Tensor, Tensor]:
    """Per-bag embeddings from one packed sequence.

    Returns ``(bag_ids, Z, weights)`` where row ``i`` of ``Z`` embeds bag
    ``bag_ids[i]`` using only that bag's positions.
    """
    h = ag.as_tensor(pack_features)
    bags, weights = bag_attention(attention_logits(h, params), masks)
    return bags, ag.matmul(weights, h), weights


def aggregate_residual(pack_features, presence: np.ndarray, params: AbmilParams) -> tuple[Tensor, Tensor] | None:
    """Treat every real position of the pack as one bag; ``None`` for an all-padding pack."""
    presence = np.asarray(presence, dtype=bool)
    if not presence.any():
        return None
    h = ag.as_tensor(pack_features)
    logits = ag.masked_fill(attention_logits(h, params), ~presence, NEG_INF)
    a = ag.softmax(logits, axis=0)
    return ag.matmul(a, h), a


def classify(z, params: AbmilParams, task: str = "grading") -> Tensor:
    """Linear head; survival outputs per-interval hazards via a sigmoid."""
    logits = ag.add(ag.matmul(z, params.Wc), params.bc)
    return ag.sigmoid(logits) if task == "survival" else logits


def probabilities(head_out: Tensor, task: str) -> Tensor:
    if task == "grading":
        return ag.softmax(head_out, axis=-1)
    if task == "subtyping":
        return ag.sigmoid(head_out)
    return head_out


@dataclass
class FeatureNorm:
    """Per-dimension standardisation with running statistics (no learned affine)."""

    dim: int
    momentum: float = 0.1
    eps: float = 1e-5
    mean: np.ndarray = field(init=False)
    var: np.ndarray = field(init=False)

    def __post_init__(self):
        self.mean = np.zeros(self.dim)
        self.var = np.ones(self.dim)

    def update(self, rows: np.ndarray) -> None:
        if rows.shape[0] < 2:
            return
        self.mean = (1 - self.momentum) * self.mean + self.momentum * rows.mean(axis=0)
        self.var = (1 - self.momentum) * self.var + self.momentum * rows.var(axis=0, ddof=1)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / np.sqrt(self.var + self.eps)


@dataclass
class PackMILModel:
    task: str
    abmil: AbmilParams
    ads: AdsParams | None = None
    norm: FeatureNorm | None = None

    @classmethod
    def build(cls, task: str, dim: int, out: int, d_attn: int = 128, ads: dict | None = None,
              norm: bool = False, seed: int = 0) -> "PackMILModel":
        rng = np.random.default_rng(seed)
        abmil = AbmilParams.init(dim, out, d_attn, rng)
        ads_params = AdsParams.init(dim, rng=rng, **ads) if ads is not None else None
        return cls(task, abmil, ads_params, FeatureNorm(dim) if norm else None)

    def parameters(self) -> list[Tensor]:
        params = self.abmil.parameters()
        if self.ads is not None:
            params += self.ads.parameters()
        return params

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return self.norm(x) if self.norm is not None else x

    def state(self) -> list[np.ndarray]:
        arrays = [p.data.copy() for p in self.parameters()]
        if self.norm is not None:
            arrays += [self.norm.mean.copy(), self.norm.var.copy()]
        return arrays

    def load_state(self, arrays: list[np.ndarray]) -> None:
        params = self.parameters()
        expected = len(params) + (2 if self.norm is not None else 0)
        if len(arrays) != expected:
            raise ValueError(f"checkpoint holds {len(arrays)} tensors, model expects {expected}")
        for p, a in zip(params, arrays):
            if p.shape != a.shape:
                raise ValueError(f"checkpoint tensor shape {a.shape} does not match parameter {p.shape}")
            p.data = np.array(a, dtype=np.float64)
        if self.norm is not None:
            self.norm.mean, self.norm.var = np.array(arrays[-2]), np.array(arrays[-1])


# ---------------------------------------------------------------- checkpoints
#   b"PMC1" | u32 version | u32 count | per tensor: u32 ndim, u32 dims..., f64 data


def save_checkpoint(arrays: list[np.ndarray], path: str | Path) -> None:
    parts = [struct.pack("<4sII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(arrays))]
    for a in arrays:
        a = np.asarray(a, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
        parts.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        parts.append(a.tobytes())
    try:
        Path(path).write_bytes(b"".join(parts))
    except OSError as exc:
        raise PersistenceError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path: str | Path) -> list[np.ndarray]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise PersistenceError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(buf) < 12:
        raise ValueError(f"{path}: truncated checkpoint header")
    magic, version, count = struct.unpack_from("<4sII", buf)
    if magic != CHECKPOINT_MAGIC or version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    off = 12
    out = []
    try:
        for _ in range(count):
            (ndim,) = struct.unpack_from("<I", buf, off)
            shape = struct.unpack_from(f"<{ndim}I", buf, off + 4)
            off += 4 + 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if off + 8 * size > len(buf):
                raise ValueError(f"{path}: truncated tensor payload")
            out.append(np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64))
            off += 8 * size
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    return out
