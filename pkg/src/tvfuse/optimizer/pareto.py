"""Pareto frontier over (consistency up, perplexity down) and point selection."""

from __future__ import annotations

import math
from typing import Sequence

from ..errors import EmptyFrontierError, NoSuccessfulTrialsError


def pareto_frontier(trials: Sequence) -> list:
    """Exact non-dominated subset, sorted by descending consistency.

    A trial dominates another when it is at least as consistent and at most
    as perplexing, strictly better on one of the two. Trials equal on both
    metrics keep only the lowest trial index.
    """
    completed = [t for t in trials if t.status == "ok"]
    if not completed:
        raise NoSuccessfulTrialsError("no successful trials to build a frontier from")
    ordered = sorted(completed, key=lambda t: (-t.consistency, t.perplexity, t.index))
    frontier = []
    best_perplexity = math.inf
    for trial in ordered:
        if trial.perplexity < best_perplexity:
            frontier.append(trial)
            best_perplexity = trial.perplexity
    return frontier


def select_max_consistency(frontier: Sequence):
    """Highest consistency; ties by lower perplexity, then lower trial index."""
    if not frontier:
        raise EmptyFrontierError("cannot select from an empty frontier")
    return min(frontier, key=lambda t: (-t.consistency, t.perplexity, t.index))


def select_knee(frontier: Sequence):
    """Frontier point nearest the ideal corner in normalized metric space.

    Consistency and perplexity are each min-max normalized over the
    frontier; a zero range normalizes to 0 for every point. The ideal is
    (consistency 1, perplexity 0); ties resolve to the lower trial index.
    """
    if not frontier:
        raise EmptyFrontierError("cannot select from an empty frontier")
    c_values = [t.consistency for t in frontier]
    p_values = [t.perplexity for t in frontier]
    c_lo, c_hi = min(c_values), max(c_values)
    p_lo, p_hi = min(p_values), max(p_values)
    c_range = c_hi - c_lo
    p_range = p_hi - p_lo

    def distance(t) -> float:
        c_norm = (t.consistency - c_lo) / c_range if c_range > 0 else 0.0
        p_norm = (t.perplexity - p_lo) / p_range if p_range > 0 else 0.0
        return math.hypot(c_norm - 1.0, p_norm)

    return min(frontier, key=lambda t: (distance(t), t.index))


SELECTION_RULES = {
    "max-consistency": select_max_consistency,
    "knee": select_knee,
}
