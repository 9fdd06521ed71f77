# src/envs.py
"""Goal-conditioned environments over scenario-branching models, plus the rollout metrics."""
import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from itertools import product
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config.settings import Config
from src import numgrad as ng
from src.dynamics import (CstrModel, LinearModel, LinearSystem, ScenarioParam, SimConfig,
                          cstr_scenario, stack_scenarios)
from src.errors import ConfigurationError, IntegrationError

logger = logging.getLogger(__name__)

REWARD_KINDS = ('gaussian', 'sparse')


@dataclass(frozen=True, eq=False)
class GoalObservation:
    state: np.ndarray
    achieved_goal: np.ndarray
    desired_goal: np.ndarray
    t: int = 0

    def with_goal(self, goal) -> 'GoalObservation':
        return replace(self, desired_goal=np.array(goal, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class BoxConstraint:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.atleast_1d(np.asarray(self.lower, dtype=np.float64))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=np.float64))
        if lower.shape != upper.shape:
            raise ConfigurationError(f"Box bounds differ in shape: {lower.shape} vs {upper.shape}")
        if np.any(np.isnan(lower)) or np.any(np.isnan(upper)) or np.any(lower > upper):
            raise ConfigurationError(f"Box lower bound exceeds upper bound: {lower} > {upper}")
        object.__setattr__(self, 'lower', lower)
        object.__setattr__(self, 'upper', upper)

    @classmethod
    def unbounded(cls, dim: int) -> 'BoxConstraint':
        return cls(np.full(dim, -np.inf), np.full(dim, np.inf))

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def bounded(self) -> np.ndarray:
        return np.isfinite(self.lower) & np.isfinite(self.upper)

    @property
    def center(self) -> np.ndarray:
        center = np.zeros(self.dim)
        mask = self.bounded
        center[mask] = 0.5 * (self.lower[mask] + self.upper[mask])
        return center

    @property
    def half_width(self) -> np.ndarray:
        """Half the box width; 1 along unbounded or degenerate coordinates."""
        half = np.where(self.bounded, 0.5 * (self.upper - self.lower), 1.0)
        return np.where(half > 0, half, 1.0)

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=np.float64)
        return bool(np.all((x >= self.lower) & (x <= self.upper)))

    def project(self, x):
        """Closest point of the box (elementwise clamp)."""
        return ng.clip(x, self.lower, self.upper)

    def violation(self, x):
        """Elementwise hinge distance outside the box."""
        return ng.maximum(self.lower - x, 0.0) + ng.maximum(x - self.upper, 0.0)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        if not np.all(self.bounded):
            raise ConfigurationError("Cannot sample from an unbounded box")
        return rng.uniform(self.lower, self.upper)


class ScenarioSet:
    """Uniformly weighted realizations of the uncertain parameters."""

    def __init__(self, scenarios: Sequence[ScenarioParam]):
        self.scenarios: Tuple[ScenarioParam, ...] = tuple(scenarios)
        if not self.scenarios:
            raise ConfigurationError("A scenario set needs at least one scenario")

    def __len__(self) -> int:
        return len(self.scenarios)

    def __getitem__(self, index: int) -> ScenarioParam:
        return self.scenarios[index]

    def __iter__(self):
        return iter(self.scenarios)

    @property
    def weights(self) -> np.ndarray:
        return np.full(len(self), 1.0 / len(self))

    @cached_property
    def stacked(self) -> ScenarioParam:
        return stack_scenarios(self.scenarios)

    def take(self, indices: Sequence[int]) -> ScenarioParam:
        """Stacked parameters for ``indices`` (repeats allowed)."""
        return stack_scenarios([self.scenarios[int(i)] for i in indices])

    def subset(self, indices: Sequence[int]) -> 'ScenarioSet':
        return ScenarioSet([self.scenarios[int(i)] for i in indices])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([{k: float(v) for k, v in s.as_dict().items()} for s in self.scenarios])


@dataclass(frozen=True, eq=False)
class GoalEnv:
    model: object
    scenarios: ScenarioSet
    goal_indices: Tuple[int, ...]
    sigma2: float
    init_box: BoxConstraint
    goal_box: BoxConstraint
    episode_length: int
    action_box: BoxConstraint
    state_box: BoxConstraint
    reward_kind: str = 'gaussian'
    threshold: float = Config.SPARSE_THRESHOLD
    time_limit_terminal: bool = True
    name: str = 'env'

    def __post_init__(self):
        object.__setattr__(self, 'goal_indices', tuple(int(i) for i in self.goal_indices))
        if not self.sigma2 > 0:
            raise ConfigurationError(f"Reward variance must be positive, got {self.sigma2}")
        if int(self.episode_length) < 1:
            raise ConfigurationError(f"Episode length must be >= 1, got {self.episode_length}")
        if self.reward_kind not in REWARD_KINDS:
            raise ConfigurationError(f"Unknown reward kind '{self.reward_kind}'")
        if self.reward_kind == 'sparse' and not self.threshold > 0:
            raise ConfigurationError("Sparse reward threshold must be positive")
        n, m = self.model.state_dim, self.model.action_dim
        if self.init_box.dim != n or self.state_box.dim != n:
            raise ConfigurationError(f"State boxes must have dimension {n}")
        if self.action_box.dim != m:
            raise ConfigurationError(f"Action box must have dimension {m}")
        if self.goal_box.dim != len(self.goal_indices) or any(i >= n for i in self.goal_indices):
            raise ConfigurationError("Goal indices and goal box disagree with the state dimension")

    @property
    def state_dim(self) -> int:
        return self.model.state_dim

    @property
    def action_dim(self) -> int:
        return self.model.action_dim

    @property
    def goal_dim(self) -> int:
        return len(self.goal_indices)

    def goal_map(self, state):
        return ng.stack([state[..., i] for i in self.goal_indices], axis=-1)

    def reward(self, achieved, desired):
        if self.reward_kind == 'sparse':
            return sparse_reward(achieved, desired, self.threshold)
        return gaussian_reward(achieved, desired, self.sigma2)

    def observe(self, state, goal, t: int = 0) -> GoalObservation:
        state = np.asarray(state, dtype=np.float64)
        return GoalObservation(state=state, achieved_goal=np.asarray(self.goal_map(state)),
                               desired_goal=np.atleast_1d(np.asarray(goal, dtype=np.float64)), t=t)


class StepResult(NamedTuple):
    obs: GoalObservation
    reward: float
    done: bool
    scenario_index: int
    failed: bool = False


def sparse_reward(achieved, desired, threshold: float):
    """1 inside the closed ball of radius ``threshold`` around the goal, else 0."""
    diff = np.atleast_1d(np.asarray(achieved, dtype=np.float64) - np.asarray(desired, dtype=np.float64))
    distance = np.linalg.norm(diff, axis=-1)
    return np.where(distance <= threshold, 1.0, 0.0)


def gaussian_reward(achieved, desired, sigma2: float):
    """exp(-|desired - achieved|^2 / (2 sigma2)); works on arrays and Tensors."""
    if not isinstance(achieved, ng.Tensor):
        achieved = np.atleast_1d(np.asarray(achieved, dtype=np.float64))
    if not isinstance(desired, ng.Tensor):
        desired = np.atleast_1d(np.asarray(desired, dtype=np.float64))
    return ng.exp(ng.total(ng.square(desired - achieved), axis=-1) * (-0.5 / sigma2))


def env_reset(env: GoalEnv, rng: np.random.Generator) -> GoalObservation:
    state = env.init_box.sample(rng)
    goal = env.goal_box.sample(rng)
    return env.observe(state, goal, t=0)


def advance(env: GoalEnv, states: np.ndarray, actions: np.ndarray, psi: ScenarioParam) -> np.ndarray:
    """Batched one-step transition; the leading axis of ``states`` matches ``psi``."""
    actions = np.asarray(env.action_box.project(actions))
    return np.asarray(env.model.step(states, actions, psi))


def step_with_scenario(env: GoalEnv, obs: GoalObservation, action, scenario_index: int) -> StepResult:
    """Transition under a given scenario, flagging non-finite states as failures."""
    psi = env.scenarios.take([scenario_index])
    t = obs.t + 1
    try:
        next_state = advance(env, obs.state[None, :], np.asarray(action, dtype=np.float64)[None, :], psi)[0]
    except IntegrationError:
        next_state = None
    if next_state is None or not np.all(np.isfinite(next_state)):
        logger.debug(f"Transition failed at t={t} under scenario {scenario_index}")
        return StepResult(obs=replace(obs, t=t), reward=0.0, done=True, scenario_index=scenario_index, failed=True)
    next_obs = env.observe(next_state, obs.desired_goal, t=t)
    reward = float(env.reward(next_obs.achieved_goal, next_obs.desired_goal))
    return StepResult(obs=next_obs, reward=reward, done=t >= env.episode_length, scenario_index=scenario_index)


def env_step(env: GoalEnv, obs: GoalObservation, action, rng: np.random.Generator) -> StepResult:
    """Draw a scenario uniformly, then transition under it."""
    scenario_index = int(rng.integers(len(env.scenarios)))
    return step_with_scenario(env, obs, action, scenario_index)


def branch_all(env: GoalEnv, state, action) -> np.ndarray:
    """Next state under every scenario, in scenario-set order; shape (N_s, n)."""
    n_s = len(env.scenarios)
    states = np.broadcast_to(np.asarray(state, dtype=np.float64), (n_s, env.state_dim))
    actions = np.broadcast_to(np.asarray(action, dtype=np.float64), (n_s, env.action_dim))
    return advance(env, states, actions, env.scenarios.stacked)


def branch_batch(env: GoalEnv, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Every scenario for every (state, action) row; shape (N_s, B, n)."""
    n_s, batch = len(env.scenarios), states.shape[0]
    psi = env.scenarios.take(np.repeat(np.arange(n_s), batch))
    flat = advance(env, np.tile(states, (n_s, 1)), np.tile(actions, (n_s, 1)), psi)
    return flat.reshape(n_s, batch, env.state_dim)


def time_near_goal(achieved, goal, sigma2: float = Config.METRIC_VARIANCE) -> float:
    """Sum of Gaussian goal proximity over the achieved goals of a trajectory."""
    achieved = np.asarray(achieved, dtype=np.float64)
    if achieved.shape[0] == 0:
        return 0.0
    return float(np.sum(gaussian_reward(achieved, np.asarray(goal, dtype=np.float64), sigma2)))


def time_outside_constraints(states, box: BoxConstraint, sigma2: float = Config.METRIC_VARIANCE) -> float:
    """Sum of exp(-|s - prox(s)|^2 / (2 sigma2)) - 1; zero while the box is respected."""
    states = np.asarray(states, dtype=np.float64)
    if states.shape[0] == 0:
        return 0.0
    return float(np.sum(gaussian_reward(box.project(states), states, sigma2) - 1.0))


def action_total_variation(actions, scale=None) -> float:
    """Sum of |a_t - a_(t-1)| over consecutive actions, optionally in scaled units."""
    actions = np.asarray(actions, dtype=np.float64)
    if actions.shape[0] < 2:
        return 0.0
    if scale is not None:
        actions = actions / np.asarray(scale, dtype=np.float64)
    return float(np.sum(np.linalg.norm(np.diff(actions, axis=0), axis=-1)))


@dataclass
class Trajectory:
    """States x_0..x_T, actions a_0..a_(T-1) and per-step rewards/scenarios."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    scenario_indices: np.ndarray
    goal: np.ndarray
    failed: bool = False
    solver_failures: int = 0

    @property
    def length(self) -> int:
        return len(self.actions)

    def achieved(self, env: GoalEnv) -> np.ndarray:
        return np.asarray(env.goal_map(self.states[1:]))

    def metrics(self, env: GoalEnv, sigma2: float = Config.METRIC_VARIANCE) -> dict:
        scale = env.action_box.half_width
        return {
            'time_near_goal': time_near_goal(self.achieved(env), self.goal, sigma2),
            'time_outside_constraints': time_outside_constraints(self.states[1:], env.state_box, sigma2),
            'action_total_variation': action_total_variation(self.actions, scale),
            'solver_failures': float(self.solver_failures),
        }

    def to_frame(self, env: GoalEnv) -> pd.DataFrame:
        """Trajectory dump: step, states, actions, reward, scenario_index."""
        frame = pd.DataFrame({'step': np.arange(self.length, dtype=int)})
        for i, name in enumerate(env.model.state_names):
            frame[name] = self.states[:self.length, i]
        for i, name in enumerate(env.model.action_names):
            frame[name] = self.actions[:, i]
        frame['reward'] = self.rewards
        frame['scenario_index'] = self.scenario_indices.astype(int)
        return frame


Policy = Callable[[GoalObservation], np.ndarray]


def rollout(env: GoalEnv, policy: Policy, obs: GoalObservation, horizon: int, rng: np.random.Generator,
            scenario_index: Optional[int] = None) -> Trajectory:
    """Run ``policy`` for ``horizon`` steps, under a fixed scenario when one is given."""
    states = [obs.state]
    actions, rewards, indices = [], [], []
    failed = False
    for _ in range(int(horizon)):
        action = np.asarray(env.action_box.project(np.asarray(policy(obs), dtype=np.float64)))
        if scenario_index is None:
            result = env_step(env, obs, action, rng)
        else:
            result = step_with_scenario(env, obs, action, scenario_index)
        if result.failed:
            failed = True
            break
        actions.append(action)
        rewards.append(result.reward)
        indices.append(result.scenario_index)
        states.append(result.obs.state)
        obs = result.obs
    return Trajectory(states=np.array(states),
                      actions=np.array(actions).reshape(-1, env.action_dim),
                      rewards=np.array(rewards, dtype=np.float64),
                      scenario_indices=np.array(indices, dtype=int),
                      goal=np.asarray(obs.desired_goal), failed=failed)


def percent_error(achieved, goal) -> np.ndarray:
    goal = np.asarray(goal, dtype=np.float64)
    return 100.0 * np.abs(np.asarray(achieved) - goal) / np.abs(goal)


# Scenario grids

def cstr_training_grid(size: int = Config.TRAINING_GRID_SIZE) -> ScenarioSet:
    """Cartesian product of evenly spaced alpha and beta values (alpha outer)."""
    alphas = np.linspace(*Config.ALPHA_RANGE, int(size))
    betas = np.linspace(*Config.BETA_RANGE, int(size))
    return ScenarioSet([cstr_scenario(a, b) for a, b in product(alphas, betas)])


def cstr_extreme_subset() -> ScenarioSet:
    """{min, nominal, max} for each multiplier: nine scenarios."""
    alphas = (Config.ALPHA_RANGE[0], 1.0, Config.ALPHA_RANGE[1])
    betas = (Config.BETA_RANGE[0], 1.0, Config.BETA_RANGE[1])
    return ScenarioSet([cstr_scenario(a, b) for a, b in product(alphas, betas)])


def cstr_evaluation_grid(size: int = Config.TRAINING_GRID_SIZE) -> ScenarioSet:
    """Midpoints between consecutive training values, disjoint from the training grid."""
    alphas = np.linspace(*Config.ALPHA_RANGE, int(size))
    betas = np.linspace(*Config.BETA_RANGE, int(size))
    mid_a = 0.5 * (alphas[1:] + alphas[:-1])
    mid_b = 0.5 * (betas[1:] + betas[:-1])
    return ScenarioSet([cstr_scenario(a, b) for a, b in product(mid_a, mid_b)])


def nominal_scenarios() -> ScenarioSet:
    return ScenarioSet([cstr_scenario(1.0, 1.0)])


CSTR_SCENARIO_SETS = {
    'nominal': nominal_scenarios,
    'grid': cstr_training_grid,
    'extreme': cstr_extreme_subset,
    'evaluation': cstr_evaluation_grid,
}


def cstr_scenario_set(kind: str) -> ScenarioSet:
    if kind not in CSTR_SCENARIO_SETS:
        raise ConfigurationError(f"Unknown CSTR scenario selection '{kind}' (choose from {sorted(CSTR_SCENARIO_SETS)})")
    return CSTR_SCENARIO_SETS[kind]()


# Environment factories

def make_cstr_env(scenarios='grid', sigma2: float = Config.TRAIN_REWARD_VARIANCE,
                  episode_length: int = Config.EPISODE_LENGTH, reward_kind: str = 'gaussian',
                  sim: Optional[SimConfig] = None, init_box: Optional[BoxConstraint] = None,
                  **kwargs) -> GoalEnv:
    """Reactor environment controlling c_B; initial states span the whole state box."""
    if isinstance(scenarios, str):
        scenarios = cstr_scenario_set(scenarios)
    state_box = BoxConstraint(Config.CSTR_STATE_LOWER, Config.CSTR_STATE_UPPER)
    return GoalEnv(
        model=CstrModel(sim),
        scenarios=scenarios,
        goal_indices=(1,),
        sigma2=sigma2,
        init_box=init_box or state_box,
        goal_box=BoxConstraint([Config.CSTR_GOAL_LOWER], [Config.CSTR_GOAL_UPPER]),
        episode_length=episode_length,
        action_box=BoxConstraint(Config.CSTR_ACTION_LOWER, Config.CSTR_ACTION_UPPER),
        state_box=state_box,
        reward_kind=reward_kind,
        name='cstr',
        **kwargs,
    )


def make_linear_env(system: LinearSystem, state_box: BoxConstraint, action_box: BoxConstraint,
                    goal_box: BoxConstraint, goal_indices: Sequence[int] = (0,),
                    disturbances: Sequence[float] = (0.0,), disturbance_direction=None,
                    sigma2: float = Config.METRIC_VARIANCE, episode_length: int = Config.EPISODE_LENGTH,
                    init_box: Optional[BoxConstraint] = None, **kwargs) -> GoalEnv:
    """Linear benchmark with one scenario per additive disturbance level."""
    return GoalEnv(
        model=LinearModel(system, disturbance_direction),
        scenarios=ScenarioSet([ScenarioParam(disturbance=float(d)) for d in disturbances]),
        goal_indices=tuple(goal_indices),
        sigma2=sigma2,
        init_box=init_box or state_box,
        goal_box=goal_box,
        episode_length=episode_length,
        action_box=action_box,
        state_box=state_box,
        name='linear',
        **kwargs,
    )


def make_trivial_env(episode_length: int = 10, time_limit_terminal: bool = False) -> GoalEnv:
    """One frozen state that always sits on its goal: reward 1 at every step."""
    system = LinearSystem(A=np.zeros((1, 1)), B=np.zeros((1, 1)))
    point = BoxConstraint([0.0], [0.0])
    return GoalEnv(
        model=LinearModel(system),
        scenarios=ScenarioSet([ScenarioParam(disturbance=0.0)]),
        goal_indices=(0,),
        sigma2=Config.METRIC_VARIANCE,
        init_box=point,
        goal_box=point,
        episode_length=episode_length,
        action_box=BoxConstraint([-1.0], [1.0]),
        state_box=BoxConstraint([-1.0], [1.0]),
        time_limit_terminal=time_limit_terminal,
        name='trivial',
    )
