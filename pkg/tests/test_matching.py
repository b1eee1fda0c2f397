import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hoidet.matching import MatchingError, hungarian
from hoidet.rng import Rng


def brute_force_min(cost: np.ndarray) -> float:
    """Exhaustive minimum over all injections of rows into columns."""
    g, n = cost.shape
    best = None
    for perm in itertools.permutations(range(n), g):
        c = sum(cost[i, perm[i]] for i in range(g))
        if best is None or c < best:
            best = c
    return best


def brute_force_lex(cost: np.ndarray):
    """Lexicographically smallest optimal pair sequence, by enumeration."""
    g, n = cost.shape
    best_cost = brute_force_min(cost)
    best = None
    for perm in itertools.permutations(range(n), g):
        c = sum(cost[i, perm[i]] for i in range(g))
        if c <= best_cost + 1e-12 and (best is None or list(perm) < best):
            best = list(perm)
    return [(i, best[i]) for i in range(g)]


class TestExamples:
    def test_complement_identity_matches_diagonal(self):
        res = hungarian([[0, 1, 1], [1, 0, 1], [1, 1, 0]])
        assert res.pairs == [(0, 0), (1, 1), (2, 2)]
        assert res.total_cost == 0.0
        assert res.unmatched_queries == []

    def test_single_row_argmin_first_on_ties(self):
        res = hungarian([[3.0, 1.0, 1.0, 2.0]])
        assert res.pairs == [(0, 1)]
        assert res.unmatched_queries == [0, 2, 3]

    def test_all_zero_matrix_lexicographic(self):
        res = hungarian(np.zeros((3, 5)))
        assert res.pairs == [(0, 0), (1, 1), (2, 2)]

    def test_crafted_tie(self):
        # two optimal assignments: (0,0),(1,1) and (0,1),(1,0); lexicographic wins
        res = hungarian([[1.0, 1.0], [2.0, 2.0]])
        assert res.pairs == [(0, 0), (1, 1)]

    def test_empty_gt(self):
        res = hungarian(np.zeros((0, 4)))
        assert res.pairs == [] and res.total_cost == 0.0
        assert res.unmatched_queries == [0, 1, 2, 3]


class TestErrors:
    def test_more_rows_than_columns(self):
        with pytest.raises(MatchingError, match="more ground truths"):
            hungarian(np.zeros((3, 2)))

    def test_non_finite(self):
        with pytest.raises(MatchingError, match="non-finite"):
            hungarian([[np.nan, 1.0]])

    def test_non_matrix(self):
        with pytest.raises(MatchingError):
            hungarian(np.zeros(4))


class TestAgainstBruteForce:
    def test_random_suite_small(self):
        rng = Rng(2024)
        for g in range(1, 6):
            for n in range(g, 7):
                stream = rng.split(f"{g}x{n}")
                for case in range(30):
                    cost = stream.uniform((g, n), -2.0, 5.0)
                    res = hungarian(cost)
                    assert res.total_cost == brute_force_min(cost)

    def test_lexicographic_on_integer_ties(self):
        rng = Rng(7)
        for case in range(60):
            g, n = 3, 5
            cost = np.floor(rng.split(case).uniform((g, n), 0, 3))
            res = hungarian(cost)
            assert res.pairs == brute_force_lex(cost), f"case {case}\n{cost}"

    @given(st.integers(1, 4), st.integers(0, 3),
           st.lists(st.floats(-3, 3), min_size=28, max_size=28))
    def test_optimality_property(self, g, extra, values):
        n = g + extra
        cost = np.asarray(values[: g * n]).reshape(g, n)
        res = hungarian(cost)
        assert res.total_cost <= brute_force_min(cost) + 1e-12
        assert len(res.pairs) == g
        cols = [q for _, q in res.pairs]
        assert len(set(cols)) == g


class TestResultShape:
    def test_pairs_ordered_and_injective(self):
        cost = Rng(11).uniform((4, 6), 0, 1)
        res = hungarian(cost)
        assert [p[0] for p in res.pairs] == [0, 1, 2, 3]
        cols = [p[1] for p in res.pairs]
        assert len(set(cols)) == 4
        assert sorted(cols + res.unmatched_queries) == list(range(6))
        assert res.total_cost == sum(cost[i, c] for i, c in res.pairs)
