"""Greedy diversity selection over a similarity matrix.

Start from the row with the smallest mean similarity to everything
(diagonal included, which shifts every row mean by the same constant), then
repeatedly add the candidate whose worst-case similarity to the already
selected set is smallest. Every argmin breaks ties toward the lowest index,
so the result is a pure function of the matrix and k.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

from .embedding import SimilarityMatrix


@dataclass(frozen=True)
class SelectionResult:
    """Chosen indices in selection order; ``k`` is the effective count."""

    selected_indices: tuple[int, ...]
    k: int

    def __post_init__(self) -> None:
        indices = tuple(int(i) for i in self.selected_indices)
        object.__setattr__(self, "selected_indices", indices)
        if len(indices) != self.k:
            raise ValueError("k must equal the number of selected indices")
        if len(set(indices)) != len(indices):
            raise ValueError("selected indices must be distinct")


def initial_index(matrix: SimilarityMatrix) -> int:
    """Index of the row with the lowest mean similarity; ties pick lowest.

    Row means use ``math.fsum``, so permuting a row's entries cannot change
    its mean and exact ties stay exact.
    """
    n = matrix.n
    best_index = 0
    best_mean = math.fsum(matrix.entries[0]) / n
    for i in range(1, n):
        mean = math.fsum(matrix.entries[i]) / n
        if mean < best_mean:
            best_index = i
            best_mean = mean
    return best_index


def next_index(
    matrix: SimilarityMatrix,
    selected: Iterable[int],
    candidates: Iterable[int],
) -> int:
    """Candidate whose max similarity to the selected set is smallest."""
    selected = set(selected)
    candidates = set(candidates)
    if not selected or not candidates:
        raise ValueError("selected and candidates must both be nonempty")
    if selected & candidates:
        raise ValueError("selected and candidates must be disjoint")
    n = matrix.n
    if any(not 0 <= i < n for i in selected | candidates):
        raise ValueError(f"indices must lie in [0, {n})")
    best_index = -1
    best_score = math.inf
    for i in sorted(candidates):
        score = max(matrix.entries[i][q] for q in selected)
        if score < best_score:
            best_index = i
            best_score = score
    return best_index


def greedy_diverse_select(matrix: SimilarityMatrix, k: int) -> SelectionResult:
    """Pick up to ``k`` mutually diverse indices from ``matrix``.

    When ``k`` is at least the matrix size, every index is returned in
    natural order; downstream layers can legitimately have fewer live
    candidates than the configured k.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    n = matrix.n
    if k >= n:
        return SelectionResult(tuple(range(n)), n)
    chosen = [initial_index(matrix)]
    candidates = set(range(n)) - set(chosen)
    while len(chosen) < k:
        index = next_index(matrix, chosen, candidates)
        chosen.append(index)
        candidates.remove(index)
    return SelectionResult(tuple(chosen), k)
