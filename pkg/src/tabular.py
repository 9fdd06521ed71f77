# src/tabular.py
"""Tabular robust Q-learning on small scenario-branching MDPs, and its value-iteration fixed point."""
import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from src.errors import ConfigurationError, UsageError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class TabularQ:
    """Q values indexed by (state, goal, action).

    ``alpha=None`` selects the harmonic step size 1/n(s, g, a).
    """

    q: np.ndarray
    alpha: Optional[float] = None
    counts: Optional[np.ndarray] = None

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64)
        if q.ndim != 3:
            raise ConfigurationError(f"TabularQ needs a (state, goal, action) table, got shape {q.shape}")
        object.__setattr__(self, 'q', q)
        if self.counts is None:
            object.__setattr__(self, 'counts', np.zeros(q.shape, dtype=np.int64))

    @classmethod
    def zeros(cls, n_states: int, n_actions: int, n_goals: int = 1, alpha: Optional[float] = None) -> 'TabularQ':
        return cls(np.zeros((n_states, n_goals, n_actions)), alpha=alpha)

    @property
    def shape(self):
        return self.q.shape

    def values(self, goal: int = 0) -> np.ndarray:
        """(state, action) slice for one goal."""
        return self.q[:, goal, :]


def tabular_q_update(table: TabularQ, state: int, goal: int, action: int, reward: float, next_state: int,
                     gamma: float) -> TabularQ:
    """Q <- (1 - alpha) Q + alpha (r + gamma max_a' Q(s', g, a'))."""
    n_states, n_goals, n_actions = table.shape
    if not (0 <= state < n_states and 0 <= next_state < n_states and 0 <= goal < n_goals
            and 0 <= action < n_actions):
        raise UsageError(f"Index out of range for table {table.shape}: "
                         f"s={state}, g={goal}, a={action}, s'={next_state}")
    counts = table.counts.copy()
    counts[state, goal, action] += 1
    alpha = 1.0 / counts[state, goal, action] if table.alpha is None else table.alpha
    q = table.q.copy()
    target = reward + gamma * np.max(q[next_state, goal, :])
    q[state, goal, action] = (1.0 - alpha) * q[state, goal, action] + alpha * target
    return replace(table, q=q, counts=counts)


@dataclass(frozen=True, eq=False)
class BranchingMdp:
    """Deterministic transitions per scenario: next_states[i, s, a]."""

    rewards: np.ndarray
    next_states: np.ndarray

    def __post_init__(self):
        rewards = np.asarray(self.rewards, dtype=np.float64)
        nxt = np.asarray(self.next_states, dtype=np.int64)
        if nxt.ndim != 3 or nxt.shape[1:] != rewards.shape:
            raise ConfigurationError(f"Transition table {nxt.shape} does not match rewards {rewards.shape}")
        if np.any(nxt < 0) or np.any(nxt >= rewards.shape[0]):
            raise ConfigurationError("Transition table points outside the state space")
        object.__setattr__(self, 'rewards', rewards)
        object.__setattr__(self, 'next_states', nxt)

    @property
    def n_states(self) -> int:
        return self.rewards.shape[0]

    @property
    def n_actions(self) -> int:
        return self.rewards.shape[1]

    @property
    def n_scenarios(self) -> int:
        return self.next_states.shape[0]


def random_branching_mdp(seed: int, n_states: int = 5, n_actions: int = 2, n_scenarios: int = 3,
                         reward_high: float = 0.1) -> BranchingMdp:
    rng = np.random.default_rng(seed)
    rewards = rng.uniform(0.0, reward_high, size=(n_states, n_actions))
    next_states = rng.integers(0, n_states, size=(n_scenarios, n_states, n_actions))
    return BranchingMdp(rewards, next_states)


def robust_value_iteration(mdp: BranchingMdp, gamma: float, tol: float = 1e-13,
                           max_iters: int = 100000) -> np.ndarray:
    """Fixed point of q(s, a) = r + gamma mean_i max_a' q(s'_i, a')."""
    q = np.zeros_like(mdp.rewards)
    for _ in range(int(max_iters)):
        nxt = mdp.rewards + gamma * np.mean(np.max(q, axis=1)[mdp.next_states], axis=0)
        if np.max(np.abs(nxt - q)) <= tol:
            return nxt
        q = nxt
    logger.warning(f"Robust value iteration stopped after {max_iters} sweeps without reaching {tol}")
    return q


def run_tabular_q(mdp: BranchingMdp, gamma: float, n_samples: int, seed: int,
                  alpha: Optional[float] = None) -> TabularQ:
    """Q-learning from uniformly sampled (s, a) pairs with a uniformly drawn scenario per sample."""
    rng = np.random.default_rng(seed)
    table = TabularQ.zeros(mdp.n_states, mdp.n_actions, alpha=alpha)
    states = rng.integers(0, mdp.n_states, size=n_samples)
    actions = rng.integers(0, mdp.n_actions, size=n_samples)
    scenarios = rng.integers(0, mdp.n_scenarios, size=n_samples)
    for s, a, i in zip(states, actions, scenarios):
        table = tabular_q_update(table, int(s), 0, int(a), float(mdp.rewards[s, a]),
                                 int(mdp.next_states[i, s, a]), gamma)
    return table
