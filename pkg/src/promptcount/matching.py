"""Minimal-cost one-to-one assignment of ground-truth points to queries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DataError, ShapeError


@dataclass
class MatchResult:
    """Assignment of every ground-truth index to a distinct query.

    ``assignment[j] = (query, j)`` ordered by ground-truth index; queries
    absent from the assignment are listed in ``unmatched`` (no object).
    """
    assignment: list[tuple[int, int]]
    unmatched: list[int]
    total_cost: float

    @property
    def query_for_target(self) -> np.ndarray:
        return np.array([q for q, _ in self.assignment], dtype=np.int64)


def _solve(cost: np.ndarray) -> float:
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


def hungarian_match(cost: np.ndarray, canonical: bool = True) -> MatchResult:
    """Optimal assignment of all columns (targets) to distinct rows (queries).

    With ``canonical`` the result is the lexicographically smallest row
    tuple (ordered by column) among all minimum-cost assignments, found
    by fixing columns left to right and re-solving the remainder; a
    cheap lower bound prunes candidates that cannot be optimal.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ShapeError(f"cost must be 2-d, got shape {cost.shape}")
    k, l = cost.shape
    if l == 0:
        return MatchResult([], list(range(k)), 0.0)
    if k < l:
        raise DataError(f"more targets than queries ({l} > {k})")
    if not np.all(np.isfinite(cost)):
        raise DataError("matching costs must be finite")

    total = _solve(cost)
    tol = 1e-9 * max(1.0, abs(total))

    if not canonical:
        rows, cols = linear_sum_assignment(cost)
        by_target = sorted(zip(cols.tolist(), rows.tolist()))
        assignment = [(r, c) for c, r in by_target]
    else:
        free_rows = list(range(k))
        assignment = []
        fixed = 0.0
        for j in range(l):
            remaining_cols = np.arange(j + 1, l)
            chosen = None
            for r in free_rows:
                others = [x for x in free_rows if x != r]
                candidate = fixed + cost[r, j]
                if remaining_cols.size:
                    # lower bound: every remaining column pays at least its
                    # cheapest available row
                    lb = cost[np.ix_(others, remaining_cols)].min(axis=0).sum()
                    if candidate + lb > total + tol:
                        continue
                    sub = _solve(cost[np.ix_(others, remaining_cols)])
                    if candidate + sub <= total + tol:
                        chosen = r
                        break
                elif candidate <= total + tol:
                    chosen = r
                    break
            assert chosen is not None, "canonicalization lost the optimum"
            assignment.append((chosen, j))
            fixed += cost[chosen, j]
            free_rows.remove(chosen)

    matched = {q for q, _ in assignment}
    unmatched = [q for q in range(k) if q not in matched]
    return MatchResult(assignment, unmatched, total)
