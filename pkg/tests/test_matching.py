import itertools

import numpy as np
import pytest

from promptcount.errors import DataError
from promptcount.matching import hungarian_match


def brute_force_total(cost: np.ndarray) -> float:
    """Exhaustive minimum over all ways to place the columns on rows."""
    k, l = cost.shape
    best = np.inf
    for rows in itertools.permutations(range(k), l):
        best = min(best, sum(cost[r, j] for j, r in enumerate(rows)))
    return best


def brute_force_lex_assignment(cost: np.ndarray):
    """Lexicographically smallest row tuple among minimum-cost assignments."""
    k, l = cost.shape
    best_total = brute_force_total(cost)
    best = None
    for rows in itertools.permutations(range(k), l):
        total = sum(cost[r, j] for j, r in enumerate(rows))
        if abs(total - best_total) <= 1e-9 * max(1.0, abs(best_total)):
            if best is None or rows < best:
                best = rows
    return list(best)


class TestHungarianMatch:
    def test_two_by_two(self):
        match = hungarian_match(np.array([[1.0, 2.0], [2.0, 1.0]]))
        assert match.assignment == [(0, 0), (1, 1)]
        assert match.total_cost == 2.0
        assert match.unmatched == []

    def test_duplicate_zero_columns_tie_break_lexicographic(self):
        cost = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0]])
        match = hungarian_match(cost)
        assert match.assignment == [(0, 0), (1, 1)]
        assert match.unmatched == [2]

    def test_random_6x6_equals_exhaustive_search(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            cost = rng.uniform(0, 10, size=(6, 6))
            match = hungarian_match(cost)
            assert match.total_cost == pytest.approx(brute_force_total(cost),
                                                     abs=1e-12)

    @pytest.mark.parametrize("k,l", [(3, 2), (5, 5), (7, 4), (9, 7)])
    def test_rectangular_matches_brute_force(self, k, l):
        rng = np.random.default_rng(k * 100 + l)
        for _ in range(10):
            cost = rng.uniform(0, 5, size=(k, l))
            match = hungarian_match(cost)
            assert len(match.assignment) == l
            rows = [q for q, _ in match.assignment]
            assert len(set(rows)) == l
            assert match.total_cost == pytest.approx(brute_force_total(cost),
                                                     abs=1e-12)

    def test_lexicographic_among_tied_optima(self):
        rng = np.random.default_rng(42)
        for _ in range(30):
            # Integer costs in a tiny range force plenty of ties.
            cost = rng.integers(0, 3, size=(5, 3)).astype(float)
            match = hungarian_match(cost)
            got = [q for q, _ in match.assignment]
            assert got == brute_force_lex_assignment(cost)

    def test_more_targets_than_queries_rejected(self):
        with pytest.raises(DataError, match="more targets than queries"):
            hungarian_match(np.zeros((2, 3)))

    def test_non_finite_cost_rejected(self):
        cost = np.array([[1.0, np.inf], [0.0, 1.0]])
        with pytest.raises(DataError):
            hungarian_match(cost)

    def test_zero_targets(self):
        match = hungarian_match(np.zeros((4, 0)))
        assert match.assignment == []
        assert match.unmatched == [0, 1, 2, 3]

    def test_deterministic(self):
        rng = np.random.default_rng(7)
        cost = rng.uniform(size=(8, 5))
        a = hungarian_match(cost)
        b = hungarian_match(cost)
        assert a.assignment == b.assignment
