from functools import lru_cache
from itertools import permutations

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from app.services.assignment import (
    assignment_cost,
    hungarian,
    pad_to_square,
    solve_assignment,
)

pytestmark = pytest.mark.unit


@lru_cache(maxsize=None)
def _permutations(n: int) -> np.ndarray:
    # itertools выдаёт перестановки в лексикографическом порядке
    return np.array(list(permutations(range(n))))


def _brute_force(cost: np.ndarray) -> np.ndarray:
    perms = _permutations(cost.shape[0])
    totals = cost[np.arange(cost.shape[0]), perms].sum(axis=1)
    return perms[int(np.argmin(totals))]


def test_lexicographic_optimum_matches_brute_force(rng):
    for _ in range(1000):
        n = int(rng.integers(1, 9))
        # Малые целые стоимости дают много равноценных назначений
        cost = rng.integers(0, 4, size=(n, n)).astype(float)
        assert list(solve_assignment(cost)) == list(_brute_force(cost))


def test_hungarian_duals_certify_optimality(rng):
    for _ in range(200):
        n = int(rng.integers(1, 12))
        cost = rng.normal(size=(n, n))
        assignment, u, v = hungarian(cost)
        reduced = cost - u[:, None] - v[None, :]
        assert np.min(reduced) > -1e-9
        assert np.allclose(reduced[np.arange(n), assignment], 0.0, atol=1e-9)


def test_rectangular_cost_matches_scipy(rng):
    for _ in range(200):
        r, c = (int(k) for k in rng.integers(1, 10, size=2))
        cost = rng.uniform(0.0, 10.0, size=(r, c))
        assignment = solve_assignment(cost, lexicographic=False)
        rows, cols = linear_sum_assignment(cost)
        assert assignment_cost(cost, assignment) == pytest.approx(cost[rows, cols].sum())
        assigned = assignment[assignment >= 0]
        assert len(set(assigned.tolist())) == len(assigned) == min(r, c)


def test_pad_to_square():
    padded = pad_to_square(np.array([[1.0, -3.0, 2.0]]))
    assert padded.shape == (3, 3)
    assert np.all(padded[1:] == 7.0)


def test_invalid_cost_matrix():
    with pytest.raises(ValueError):
        hungarian(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        hungarian(np.array([[np.inf]]))
