"""Hyperslide and main-branch losses on autodiff tensors.

Probability inputs are clamped to ``[EPS, 1 - EPS]`` before any log.  Each loss
accepts a single sample (1-D ``p``) and returns a scalar, or a batch (2-D ``p``)
and returns one value per row.
"""

from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .autograd import Tensor, TrainingFault

EPS = 1e-7
_LOG_LO = math.log(EPS)
_LOG_HI = math.log1p(-EPS)


def _clamp_probs(p) -> Tensor:
    return ag.clamp(ag.as_tensor(p), EPS, 1.0 - EPS)


def asl_loss(p, y, gamma_pos: float = 0.0, gamma_neg: float = 4.0) -> Tensor:
    """Asymmetric loss for single-label grading with one-hot targets.

    ``-sum y (1-p)^gp log p - sum (1-y) p^gn log(1-p)``
    """
    y = np.asarray(y, dtype=np.float64)
    if not (np.isin(y, (0.0, 1.0)).all() and np.all(y.sum(axis=-1) == 1)):
        raise ValueError("asl_loss needs one-hot targets")
    pc = _clamp_probs(p)
    if pc.shape != y.shape:
        raise ag.ShapeError(f"asl_loss: predictions {pc.shape} vs targets {y.shape}")
    q = ag.sub(1.0, pc)
    pos = ag.mul(y, ag.mul(ag.power(q, gamma_pos), ag.log(pc)))
    neg = ag.mul(1.0 - y, ag.mul(ag.power(pc, gamma_neg), ag.log(q)))
    return ag.neg(ag.sum(ag.add(pos, neg), axis=-1))


def focal_multilabel_loss(p, y, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Sum over classes of binary focal loss; ``y`` may hold soft targets in [0, 1]."""
    y = np.asarray(y, dtype=np.float64)
    pc = _clamp_probs(p)
    if pc.shape != y.shape:
        raise ag.ShapeError(f"focal_multilabel_loss: predictions {pc.shape} vs targets {y.shape}")
    q = ag.sub(1.0, pc)
    pos = ag.mul(alpha * y, ag.mul(ag.power(q, gamma), ag.log(pc)))
    neg = ag.mul((1.0 - alpha) * (1.0 - y), ag.mul(ag.power(pc, gamma), ag.log(q)))
    return ag.neg(ag.sum(ag.add(pos, neg), axis=-1))


def _clamp_log(t) -> Tensor:
    return ag.clamp(t, _LOG_LO, _LOG_HI)


def asl_loss_from_logits(logits, y, gamma_pos: float = 0.0, gamma_neg: float = 4.0) -> Tensor:
    """``asl_loss(softmax(logits), ...)`` with both logs taken in the log domain.

    Same clamping, but ``log(1 - p)`` no longer cancels when ``p`` is near one.
    """
    y = np.asarray(y, dtype=np.float64)
    if not (np.isin(y, (0.0, 1.0)).all() and np.all(y.sum(axis=-1) == 1)):
        raise ValueError("asl_loss needs one-hot targets")
    logits = ag.as_tensor(logits)
    if logits.shape != y.shape:
        raise ag.ShapeError(f"asl_loss: predictions {logits.shape} vs targets {y.shape}")
    log_p = _clamp_log(ag.log_softmax(logits, axis=-1))
    log_q = _clamp_log(ag.log_complement_softmax(logits))
    pos = ag.mul(y, ag.mul(ag.exp(ag.mul(log_q, gamma_pos)), log_p))
    neg = ag.mul(1.0 - y, ag.mul(ag.exp(ag.mul(log_p, gamma_neg)), log_q))
    return ag.neg(ag.sum(ag.add(pos, neg), axis=-1))


def focal_loss_from_logits(logits, y, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """``focal_multilabel_loss(sigmoid(logits), ...)`` in the log domain."""
    y = np.asarray(y, dtype=np.float64)
    logits = ag.as_tensor(logits)
    if logits.shape != y.shape:
        raise ag.ShapeError(f"focal_multilabel_loss: predictions {logits.shape} vs targets {y.shape}")
    log_p = _clamp_log(ag.log_sigmoid(logits))
    log_q = _clamp_log(ag.log_sigmoid(ag.neg(logits)))
    pos = ag.mul(alpha * y, ag.mul(ag.exp(ag.mul(log_q, gamma)), log_p))
    neg = ag.mul((1.0 - alpha) * (1.0 - y), ag.mul(ag.exp(ag.mul(log_p, gamma)), log_q))
    return ag.neg(ag.sum(ag.add(pos, neg), axis=-1))


def survival_nll(h, event, k, alpha_cens: float = 0.0) -> Tensor:
    """Discrete-time hazard NLL.

    ``event=1``: ``-log h_k - log S_k``; ``event=0``: ``(1 - alpha_cens) * -log S_k``
    with ``S_k = prod_{j<=k} (1 - h_j)`` and ``k`` 1-based.
    """
    hc = _clamp_probs(h)
    T = hc.shape[-1]
    event = np.asarray(event, dtype=np.float64)
    k = np.asarray(k, dtype=np.int64)
    if np.any(k < 1) or np.any(k > T):
        raise ValueError(f"interval index must lie in [1, {T}], got {k}")
    if not np.isin(event, (0.0, 1.0)).all():
        raise ValueError("event indicator must be 0 or 1")
    steps = np.arange(1, T + 1)
    if hc.ndim == 1:
        upto = (steps <= k).astype(np.float64)
        at = (steps == k).astype(np.float64)
    else:
        upto = (steps[None, :] <= k[:, None]).astype(np.float64)
        at = (steps[None, :] == k[:, None]).astype(np.float64)
    neg_log_s = ag.neg(ag.sum(ag.mul(upto, ag.log(ag.sub(1.0, hc))), axis=-1))
    neg_log_h = ag.neg(ag.sum(ag.mul(at, ag.log(hc)), axis=-1))
    w_event = event
    w_cens = (1.0 - event) * (1.0 - alpha_cens)
    return ag.add(ag.mul(w_event, ag.add(neg_log_h, neg_log_s)), ag.mul(w_cens, neg_log_s))


def cross_entropy(logits, labels) -> Tensor:
    """Categorical CE from logits; ``labels`` are integer class ids."""
    logits = ag.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    onehot = np.eye(logits.shape[-1])[labels]
    return ag.neg(ag.sum(ag.mul(onehot, ag.log_softmax(logits, axis=-1)), axis=-1))


def binary_cross_entropy(p, y) -> Tensor:
    """Per-class BCE on probabilities, summed over classes."""
    y = np.asarray(y, dtype=np.float64)
    pc = _clamp_probs(p)
    terms = ag.add(ag.mul(y, ag.log(pc)), ag.mul(1.0 - y, ag.log(ag.sub(1.0, pc))))
    return ag.neg(ag.sum(terms, axis=-1))


def bce_from_logits(logits, y) -> Tensor:
    y = np.asarray(y, dtype=np.float64)
    logits = ag.as_tensor(logits)
    log_p = _clamp_log(ag.log_sigmoid(logits))
    log_q = _clamp_log(ag.log_sigmoid(ag.neg(logits)))
    return ag.neg(ag.sum(ag.add(ag.mul(y, log_p), ag.mul(1.0 - y, log_q)), axis=-1))


def combine_losses(main, residual, lam: float) -> Tensor:
    """``main + lam * residual``; refuses non-finite inputs."""
    main = ag.as_tensor(main)
    residual = ag.as_tensor(residual)
    for name, t in (("main", main), ("residual", residual)):
        if not np.all(np.isfinite(t.data)):
            raise TrainingFault(f"{name} loss is not finite: {t.data}")
    if lam == 0.0:
        return main
    return ag.add(main, ag.mul(residual, float(lam)))
