import numpy as np
import pytest

from src.errors import ConfigurationError, ShapeError, SolverError
from src.lqr import (LqrProblem, closed_loop_cost, closed_loop_spectral_radius, lqr_policy, quad_value,
                     riccati_map, riccati_residual, solve_dare)


def scalar_dare(a, b, m, r, gamma):
    """Positive root of gamma b^2 P^2 + ((1 - gamma a^2) r - gamma b^2 m) P - m r = 0."""
    c2 = gamma * b * b
    c1 = (1.0 - gamma * a * a) * r - gamma * b * b * m
    return (-c1 + np.sqrt(c1 * c1 + 4.0 * c2 * m * r)) / (2.0 * c2)


@pytest.mark.parametrize('a', [0.5, 1.2, 2.0])
@pytest.mark.parametrize('b', [1.0, 0.5])
@pytest.mark.parametrize('gamma', [0.9, 1.0])
def test_scalar_solution_matches_quadratic_formula(a, b, gamma):
    prob = LqrProblem([[a]], [[b]], [[1.0]], [[0.5]], gamma)
    sol = solve_dare(prob)
    expected = scalar_dare(a, b, 1.0, 0.5, gamma)
    assert sol.P[0, 0] == pytest.approx(expected, rel=1e-8)
    assert sol.K[0, 0] == pytest.approx(gamma * b * expected * a / (0.5 + gamma * b * b * expected), rel=1e-8)


def test_zero_dynamics_give_state_cost_and_zero_gain():
    M = np.diag([2.0, 3.0])
    prob = LqrProblem(np.zeros((2, 2)), np.ones((2, 1)), M, [[1.0]])
    sol = solve_dare(prob)
    np.testing.assert_allclose(sol.P, M)
    np.testing.assert_allclose(sol.K, np.zeros((1, 2)))


@pytest.mark.parametrize('gamma', [0.9, 1.0])
def test_random_systems_residual_and_closed_loop_cost(gamma):
    rng = np.random.default_rng(42)
    for _ in range(25):
        n = int(rng.integers(1, 5))
        m = int(rng.integers(1, n + 1))
        A = 0.6 * rng.uniform(-1.0, 1.0, size=(n, n))
        B = rng.normal(size=(n, m))
        prob = LqrProblem(A, B, np.eye(n), np.eye(m), gamma)
        sol = solve_dare(prob)
        assert riccati_residual(prob, sol.P) <= 1e-10
        assert closed_loop_spectral_radius(prob, sol) < 1.0
        x0 = rng.normal(size=n)
        assert closed_loop_cost(prob, sol, x0, steps=3000) == pytest.approx(quad_value(sol.P, x0), rel=1e-5)


def test_gain_is_optimal_against_perturbations():
    prob = LqrProblem([[1.0, 0.1], [0.0, 1.0]], [[0.005], [0.1]], np.eye(2), [[1.0]], 0.95)
    sol = solve_dare(prob)
    x0 = np.array([1.0, -0.5])
    best = closed_loop_cost(prob, sol, x0, steps=2000)
    for delta in ([0.05, 0.0], [0.0, -0.05]):
        worse = closed_loop_cost(prob, sol, x0, steps=2000, gain=sol.K + np.array([delta]))
        assert worse > best


def test_unstabilizable_system_diverges():
    prob = LqrProblem([[2.0]], [[0.0]], [[1.0]], [[1.0]])
    with pytest.raises(SolverError):
        solve_dare(prob)


def test_iteration_budget_exhaustion():
    prob = LqrProblem([[1.5]], [[1.0]], [[1.0]], [[1.0]])
    with pytest.raises(SolverError):
        solve_dare(prob, max_iters=2)


def test_problem_validation():
    with pytest.raises(ShapeError):
        LqrProblem(np.eye(2), np.ones((2, 1)), np.eye(3), [[1.0]])
    with pytest.raises(ConfigurationError):
        LqrProblem([[1.0]], [[1.0]], [[1.0]], [[0.0]])
    with pytest.raises(ConfigurationError):
        LqrProblem([[1.0]], [[1.0]], [[-1.0]], [[1.0]])
    with pytest.raises(ConfigurationError):
        LqrProblem([[1.0]], [[1.0]], [[1.0]], [[1.0]], gamma=1.5)


def test_policy_shapes():
    sol = solve_dare(LqrProblem([[1.0, 0.1], [0.0, 1.0]], [[0.0], [0.1]], np.eye(2), [[1.0]]))
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_allclose(lqr_policy(sol, x), -(x @ sol.K.T))
    with pytest.raises(ShapeError):
        lqr_policy(sol, np.ones(3))
    assert quad_value(np.eye(2), [3.0, 4.0]) == pytest.approx(25.0)


def test_uncontrolled_system_matches_lyapunov_series(rng):
    A = rng.normal(size=(3, 3))
    A *= 0.8 / np.max(np.abs(np.linalg.eigvals(A)))
    M = np.diag([1.0, 2.0, 0.5])
    gamma = 0.9
    sol = solve_dare(LqrProblem(A, np.zeros((3, 1)), M, [[1.0]], gamma))
    series, power = np.zeros((3, 3)), np.eye(3)
    for k in range(400):
        series += gamma ** k * power.T @ M @ power
        power = A @ power
    np.testing.assert_allclose(sol.P, series, rtol=1e-8, atol=1e-9)
    np.testing.assert_array_equal(sol.K, np.zeros((1, 3)))


def test_residual_is_the_max_row_sum_norm():
    prob = LqrProblem([[1.0, 0.1], [0.0, 1.0]], [[0.0], [0.1]], np.eye(2), [[1.0]], 0.95)
    P = np.array([[3.0, -1.0], [-1.0, 2.0]])
    gap = P - riccati_map(prob, P)
    assert riccati_residual(prob, P) == pytest.approx(np.max(np.sum(np.abs(gap), axis=1)), rel=1e-14)
    assert riccati_residual(prob, P) > np.max(np.abs(gap))
