"""Adam with bias correction, plus the learning-rate rules used by the trainer."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, TrainingFault


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[list[np.ndarray], AdamState]:
    """One Adam update.  Returns new parameter arrays; ``state`` is updated in place."""
    if len(params) != len(grads):
        raise ValueError(f"adam_step: {len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"adam_step: shape mismatch {p.shape} / {g.shape} / {m.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingFault("non-finite gradient in adam_step")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        out.append(p - lr * mhat / (np.sqrt(vhat) + eps))
    return out, state


class Adam:
    """Thin wrapper that updates a list of parameter tensors in place."""

    def __init__(self, params: list[Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.state = AdamState()

    def step(self, grads: list[np.ndarray] | None = None, lr: float | None = None) -> None:
        if grads is None:
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new, _ = adam_step(
            [p.data for p in self.params],
            grads,
            self.state,
            self.lr if lr is None else lr,
            self.beta1,
            self.beta2,
            self.eps,
        )
        for p, d in zip(self.params, new):
            p.data = d


def lr_for_batchsize(base_lr: float, bs: int, mode: str = "none") -> float:
    if bs < 1:
        raise ValueError(f"batch size must be >= 1, got {bs}")
    if mode == "sqrt":
        return base_lr * math.sqrt(bs)
    if mode == "none":
        return base_lr
    raise ValueError(f"unknown lr scaling mode {mode!r}")


def cosine_lr(lr: float, epoch: int, epochs: int) -> float:
    """Cosine annealing from ``lr`` at epoch 0 towards 0 at ``epochs``."""
    if epochs <= 1:
        return lr
    return 0.5 * lr * (1.0 + math.cos(math.pi * epoch / epochs))
