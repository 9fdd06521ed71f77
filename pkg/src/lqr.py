# src/lqr.py
"""Discounted discrete-time LQR: Riccati fixed point, gain and quadratic value."""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from config.settings import Config
from src.dynamics import LinearSystem
from src.errors import ConfigurationError, NumericalError, ShapeError, SolverError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LqrProblem:
    A: np.ndarray
    B: np.ndarray
    M: np.ndarray
    R: np.ndarray
    gamma: float = 1.0

    def __post_init__(self):
        system = LinearSystem(self.A, self.B)
        n, m = system.state_dim, system.action_dim
        M = np.atleast_2d(np.asarray(self.M, dtype=np.float64))
        R = np.atleast_2d(np.asarray(self.R, dtype=np.float64))
        if M.shape != (n, n) or R.shape != (m, m):
            raise ShapeError(f"Cost matrices M{M.shape}, R{R.shape} do not fit n={n}, m={m}")
        if not np.allclose(M, M.T) or not np.allclose(R, R.T):
            raise ConfigurationError("LQR cost matrices must be symmetric")
        if np.min(np.linalg.eigvalsh(M)) < -1e-12:
            raise ConfigurationError("State cost M must be positive semidefinite")
        if np.min(np.linalg.eigvalsh(R)) <= 0:
            raise ConfigurationError("Input cost R must be positive definite")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError(f"Discount must lie in [0, 1], got {self.gamma}")
        object.__setattr__(self, 'A', system.A)
        object.__setattr__(self, 'B', system.B)
        object.__setattr__(self, 'M', M)
        object.__setattr__(self, 'R', R)

    @classmethod
    def from_system(cls, system: LinearSystem, M, R, gamma: float = 1.0) -> 'LqrProblem':
        return cls(system.A, system.B, M, R, gamma)

    @property
    def system(self) -> LinearSystem:
        return LinearSystem(self.A, self.B)


@dataclass(frozen=True)
class LqrSolution:
    P: np.ndarray
    K: np.ndarray
    residual: float
    iterations: int


def _gain(prob: LqrProblem, P: np.ndarray) -> np.ndarray:
    A, B, R, gamma = prob.A, prob.B, prob.R, prob.gamma
    try:
        return gamma * np.linalg.solve(R + gamma * B.T @ P @ B, B.T @ P @ A)
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"Riccati inverse (R + gamma B'PB) is singular: {e}") from e


def riccati_map(prob: LqrProblem, P: np.ndarray) -> np.ndarray:
    """One Bellman backup of the quadratic value matrix."""
    A, B, gamma = prob.A, prob.B, prob.gamma
    K = _gain(prob, P)
    nxt = prob.M + gamma * A.T @ P @ A - gamma * A.T @ P @ B @ K
    return 0.5 * (nxt + nxt.T)


def riccati_residual(prob: LqrProblem, P: np.ndarray) -> float:
    return float(np.linalg.norm(P - riccati_map(prob, P), np.inf))


def solve_dare(prob: LqrProblem, tol: float = Config.DARE_TOL,
               max_iters: int = Config.DARE_MAX_ITERS) -> LqrSolution:
    """Fixed-point iteration of the discounted Riccati map starting at P = M."""
    P = prob.M.copy()
    for iteration in range(1, int(max_iters) + 1):
        nxt = riccati_map(prob, P)
        if not np.all(np.isfinite(nxt)):
            raise SolverError(f"Riccati iteration diverged after {iteration} steps")
        residual = float(np.linalg.norm(nxt - P, np.inf))
        if residual <= tol:
            logger.debug(f"DARE converged in {iteration} iterations (residual {residual:.3e})")
            return LqrSolution(P=P, K=_gain(prob, P), residual=residual, iterations=iteration)
        P = nxt
    raise SolverError(f"DARE did not converge within {max_iters} iterations (residual {residual:.3e})")


def lqr_policy(sol: LqrSolution, x) -> np.ndarray:
    """u = -K x for a single state or a batch (last axis = state)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (sol.K.shape[1],):
        raise ShapeError(f"State of shape {x.shape} does not match gain {sol.K.shape}")
    return -(x @ sol.K.T)


def quad_value(P, x) -> float:
    P = np.asarray(P, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    return float(x @ P @ x)


def closed_loop_matrix(prob: LqrProblem, sol: LqrSolution) -> np.ndarray:
    return prob.A - prob.B @ sol.K


def closed_loop_spectral_radius(prob: LqrProblem, sol: LqrSolution) -> float:
    """Spectral radius of A - BK scaled by sqrt(gamma)."""
    eig = np.linalg.eigvals(closed_loop_matrix(prob, sol))
    return float(np.sqrt(prob.gamma) * np.max(np.abs(eig)))


def closed_loop_cost(prob: LqrProblem, sol: LqrSolution, x0, steps: int = 500,
                     gain: Optional[np.ndarray] = None) -> float:
    """Discounted cost of simulating u = -Kx from ``x0`` for ``steps`` steps."""
    K = sol.K if gain is None else np.asarray(gain, dtype=np.float64)
    x = np.asarray(x0, dtype=np.float64)
    cost, discount = 0.0, 1.0
    for _ in range(int(steps)):
        u = -K @ x
        cost += discount * float(x @ prob.M @ x + u @ prob.R @ u)
        x = prob.A @ x + prob.B @ u
        discount *= prob.gamma
    return cost
