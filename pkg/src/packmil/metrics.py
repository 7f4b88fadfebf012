"""Evaluation metrics: macro accuracy, one-vs-rest macro AUC, Harrell's C-index."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata


@dataclass
class MetricsReport:
    accuracy: float | None = None
    auc: float | None = None
    c_index: float | None = None
    main_loss: list[float] = field(default_factory=list)
    residual_loss: list[float] = field(default_factory=list)

    def as_dict(self) -> dict[str, float | None]:
        return {"accuracy": self.accuracy, "auc": self.auc, "c_index": self.c_index}


def macro_accuracy(y_true, y_pred) -> float:
    """Mean per-class recall over the classes present in ``y_true``."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    recalls = [np.mean(y_pred[y_true == c] == c) for c in np.unique(y_true)]
    return float(np.mean(recalls))


def binary_auc(y, score) -> float | None:
    """Mann-Whitney AUC with ties counted half; ``None`` if one class is absent."""
    y = np.asarray(y).astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(score)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def macro_auc(y_true, scores) -> float | None:
    """One-vs-rest AUC averaged over classes where it is defined."""
    y_true = np.asarray(y_true)
    scores = np.asarray(scores)
    vals = [binary_auc(y_true == c, scores[:, c]) for c in range(scores.shape[1])]
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def concordance_index(risk, time, event) -> float | None:
    """Harrell's C: pairs with ``time_i < time_j`` and ``event_i = 1`` are comparable;
    concordant when ``risk_i > risk_j``, ties in risk count 1/2."""
    risk = np.asarray(risk, dtype=np.float64)
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event).astype(bool)
    comparable = (time[:, None] < time[None, :]) & event[:, None]
    n = comparable.sum()
    if n == 0:
        return None
    diff = risk[:, None] - risk[None, :]
    score = (diff > 0) + 0.5 * (diff == 0)
    return float((score * comparable).sum() / n)


def survival_risk(hazards: np.ndarray) -> np.ndarray:
    """Negative expected survival summed over intervals (higher = earlier event)."""
    s = np.cumprod(1.0 - np.asarray(hazards), axis=-1)
    return -s.sum(axis=-1)
