"""Labels for residual-branch packs treated as one composite slide.

Grading and subtyping weight each slide by its patch count; event tasks pick
the highest-priority event present in any slide.  Weighted means are computed
with exact rationals so ties and order-invariance are exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Hashable, Sequence

import numpy as np


@dataclass
class HyperslideLabel:
    task: str
    grade: int | None = None
    soft_vector: np.ndarray | None = None
    event: tuple[int, int] | None = None

    @property
    def degenerate(self) -> bool:
        """All-zero subtype vectors carry no supervision."""
        return self.task == "subtyping" and not np.any(self.soft_vector)


def weighted_grade(slides: Sequence[tuple[int, int]]) -> Fraction:
    if not slides:
        raise ValueError("grading label needs at least one slide")
    num = den = 0
    for g, n in slides:
        if n < 1:
            raise ValueError(f"patch count must be >= 1, got {n}")
        num += int(n) * int(g)
        den += int(n)
    return Fraction(num, den)


def grading_label(slides: Sequence[tuple[int, int]], max_grade: int | None = None) -> int:
    """Patch-weighted mean grade, rounded to nearest with .5 rounding down."""
    g = weighted_grade(slides)
    lo = math.floor(g)
    grade = lo if g - lo <= Fraction(1, 2) else lo + 1
    if max_grade is not None:
        grade = min(grade, max_grade)
    return max(grade, 0)


def subtyping_label(slides: Sequence[tuple[Sequence[int], int]]) -> np.ndarray:
    """Patch-weighted subtype prevalence, scaled so the largest entry is 1."""
    if not slides:
        raise ValueError("subtyping label needs at least one slide")
    n_classes = len(slides[0][0])
    totals = [0] * n_classes
    den = 0
    for t, n in slides:
        if len(t) != n_classes:
            raise ValueError("all subtype vectors must have the same length")
        if n < 1:
            raise ValueError(f"patch count must be >= 1, got {n}")
        den += int(n)
        for c, tc in enumerate(t):
            totals[c] += int(n) * int(tc)
    prevalence = [Fraction(x, den) for x in totals]
    top = max(prevalence)
    if top == 0:
        return np.zeros(n_classes)
    return np.array([float(p / top) for p in prevalence])


def event_label(events: Sequence[Hashable], priority: Sequence[Hashable]) -> Hashable:
    """First entry of ``priority`` (highest first) that occurs among ``events``."""
    if not priority:
        raise ValueError("event priority order is empty")
    if not events:
        raise ValueError("event label needs at least one slide")
    present = set(events)
    for e in priority:
        if e in present:
            return e
    raise ValueError(f"none of the events {sorted(present, key=str)} appear in the priority order")


def survival_priority(T: int) -> list[tuple[int, int]]:
    """Event order for (time_bin, event) records.

    Observed events outrank censoring, earlier events outrank later ones, and
    among censored records the latest at-risk bin wins.
    """
    return [(t, 1) for t in range(1, T + 1)] + [(t, 0) for t in range(T, 0, -1)]


def survival_label(records: Sequence[tuple[int, int]], T: int) -> tuple[int, int]:
    for t, d in records:
        if d not in (0, 1) or not 1 <= t <= T:
            raise ValueError(f"invalid survival record (time_bin={t}, event={d}) for T={T}")
    return event_label(list(records), survival_priority(T))


def hyperslide_label(task: str, labels: Sequence, counts: Sequence[int], *, max_grade=None, time_bins=4) -> HyperslideLabel:
    """Dispatch on task.  ``labels`` are the slides' LabelRecords, ``counts`` their patch counts."""
    if task == "grading":
        g = grading_label([(lab.grade, n) for lab, n in zip(labels, counts)], max_grade)
        return HyperslideLabel(task, grade=g)
    if task == "subtyping":
        return HyperslideLabel(task, soft_vector=subtyping_label([(lab.subtypes, n) for lab, n in zip(labels, counts)]))
    if task == "survival":
        return HyperslideLabel(task, event=survival_label([(lab.time_bin, lab.event) for lab in labels], time_bins))
    raise ValueError(f"unknown task {task!r}")
