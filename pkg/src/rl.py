# src/rl.py
"""Goal-conditioned deterministic actor-critic with hindsight relabeling.

Training runs against a scenario-branching :class:`~src.envs.GoalEnv`: every
environment step draws a model realization, and the critic learns either from
the sampled next state or from the average over all branches.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config.settings import Config
from src import numgrad as ng
from src.envs import (GoalEnv, GoalObservation, ScenarioSet, branch_batch, env_reset, env_step,
                      percent_error, rollout)
from src.errors import ConfigurationError, IntegrationError, NumericalError, TrainingAborted

logger = logging.getLogger(__name__)

TARGET_MODES = ('sampled', 'full-branch')
METRIC_COLUMNS = ['step', 'episode', 'return', 'critic_loss', 'actor_objective', 'buffer_size']
EVAL_COLUMNS = ['rollout', 'scenario_index', 'goal', 'tail_reward', 'tail_pct_error']


@dataclass(frozen=True, eq=False)
class Transition:
    obs: GoalObservation
    action: np.ndarray
    reward: float
    next_obs: GoalObservation
    done: bool
    scenario_index: int


@dataclass
class Batch:
    states: np.ndarray
    goals: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    scenario_indices: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)

    def subset(self, mask) -> 'Batch':
        return Batch(**{f.name: getattr(self, f.name)[mask] for f in fields(self)})

    @classmethod
    def from_transitions(cls, transitions: Sequence[Transition]) -> 'Batch':
        return cls(
            states=np.array([t.obs.state for t in transitions]),
            goals=np.array([t.obs.desired_goal for t in transitions]),
            actions=np.array([t.action for t in transitions]),
            rewards=np.array([t.reward for t in transitions], dtype=np.float64),
            next_states=np.array([t.next_obs.state for t in transitions]),
            dones=np.array([float(t.done) for t in transitions]),
            scenario_indices=np.array([t.scenario_index for t in transitions], dtype=int),
        )


class ReplayBuffer:
    """Fixed-capacity ring of transitions stored column-wise."""

    def __init__(self, capacity: int, state_dim: int, goal_dim: int, action_dim: int):
        if int(capacity) < 1:
            raise ConfigurationError(f"Replay capacity must be >= 1, got {capacity}")
        self.capacity = int(capacity)
        self.states = np.zeros((self.capacity, state_dim))
        self.goals = np.zeros((self.capacity, goal_dim))
        self.actions = np.zeros((self.capacity, action_dim))
        self.rewards = np.zeros(self.capacity)
        self.next_states = np.zeros((self.capacity, state_dim))
        self.dones = np.zeros(self.capacity)
        self.scenario_indices = np.zeros(self.capacity, dtype=int)
        self.counter = 0

    def __len__(self) -> int:
        return min(self.counter, self.capacity)

    def add(self, transition: Transition):
        i = self.counter % self.capacity
        self.states[i] = transition.obs.state
        self.goals[i] = transition.obs.desired_goal
        self.actions[i] = transition.action
        self.rewards[i] = transition.reward
        self.next_states[i] = transition.next_obs.state
        self.dones[i] = float(transition.done)
        self.scenario_indices[i] = transition.scenario_index
        self.counter += 1

    def add_many(self, transitions: Sequence[Transition]):
        for transition in transitions:
            self.add(transition)

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if len(self) == 0:
            raise ConfigurationError("Cannot sample from an empty replay buffer")
        return rng.integers(0, len(self), size=int(batch_size))

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        idx = self.sample_indices(batch_size, rng)
        return Batch(self.states[idx], self.goals[idx], self.actions[idx], self.rewards[idx],
                     self.next_states[idx], self.dones[idx], self.scenario_indices[idx])


def her_relabel(episode: Sequence[Transition], reward_fn: Callable) -> List[Transition]:
    """Copy every step with the episode's final achieved goal as the desired goal."""
    if not episode:
        return []
    goal = np.array(episode[-1].next_obs.achieved_goal, dtype=np.float64)
    relabeled = []
    for transition in episode:
        next_obs = transition.next_obs.with_goal(goal)
        relabeled.append(replace(
            transition,
            obs=transition.obs.with_goal(goal),
            next_obs=next_obs,
            reward=float(reward_fn(next_obs.achieved_goal, goal)),
        ))
    return relabeled


@dataclass(frozen=True, eq=False)
class InputScaling:
    """Fixed affine standardization of network inputs and outputs."""

    state_center: np.ndarray
    state_scale: np.ndarray
    goal_indices: Tuple[int, ...]
    action_center: np.ndarray
    action_scale: np.ndarray

    @classmethod
    def for_env(cls, env: GoalEnv) -> 'InputScaling':
        return cls(state_center=env.state_box.center, state_scale=env.state_box.half_width,
                   goal_indices=env.goal_indices, action_center=env.action_box.center,
                   action_scale=env.action_box.half_width)

    @property
    def goal_scale(self) -> np.ndarray:
        return self.state_scale[list(self.goal_indices)]

    @property
    def feature_dim(self) -> int:
        return self.state_center.size + len(self.goal_indices)

    def encode(self, state, goal):
        """Scaled full state concatenated with the scaled goal error g - achieved."""
        achieved = ng.stack([state[..., i] for i in self.goal_indices], axis=-1)
        error = (goal - achieved) * (1.0 / self.goal_scale)
        scaled = (state - self.state_center) * (1.0 / self.state_scale)
        return ng.concat([scaled, ng.broadcast_to(error, np.shape(ng.value_of(scaled))[:-1] + (len(self.goal_indices),))],
                         axis=-1)

    def encode_action(self, action):
        return (action - self.action_center) * (1.0 / self.action_scale)

    def decode_action(self, squashed):
        return self.action_center + squashed * self.action_scale

    def to_dict(self) -> dict:
        return {
            'state_center': self.state_center.tolist(),
            'state_scale': self.state_scale.tolist(),
            'goal_indices': list(self.goal_indices),
            'action_center': self.action_center.tolist(),
            'action_scale': self.action_scale.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'InputScaling':
        return cls(state_center=np.array(data['state_center'], dtype=np.float64),
                   state_scale=np.array(data['state_scale'], dtype=np.float64),
                   goal_indices=tuple(int(i) for i in data['goal_indices']),
                   action_center=np.array(data['action_center'], dtype=np.float64),
                   action_scale=np.array(data['action_scale'], dtype=np.float64))


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = Config.TOTAL_STEPS
    batch_size: int = Config.BATCH_SIZE
    buffer_capacity: int = Config.BUFFER_CAPACITY
    warmup_steps: int = Config.WARMUP_STEPS
    target_mode: str = Config.TARGET_MODE
    her_enabled: bool = Config.HER_ENABLED
    seed: int = Config.SEED
    hidden_sizes: Tuple[int, ...] = tuple(Config.HIDDEN_SIZES)
    gamma: float = Config.GAMMA
    tau: float = Config.TAU
    actor_lr: float = Config.ACTOR_LR
    critic_lr: float = Config.CRITIC_LR
    noise_fraction: float = Config.NOISE_FRACTION
    updates_per_step: int = Config.UPDATES_PER_STEP
    log_every: int = Config.LOG_EVERY_EPISODES

    def __post_init__(self):
        object.__setattr__(self, 'hidden_sizes', tuple(int(h) for h in self.hidden_sizes))
        if self.total_steps < 0:
            raise ConfigurationError("total_steps must be >= 0")
        if self.total_steps > 0 and not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigurationError(
                f"warmup_steps ({self.warmup_steps}) must be smaller than total_steps ({self.total_steps})")
        if self.batch_size < 1 or self.buffer_capacity < 1 or self.updates_per_step < 0:
            raise ConfigurationError("batch_size and buffer_capacity must be >= 1, updates_per_step >= 0")
        if self.target_mode not in TARGET_MODES:
            raise ConfigurationError(f"Unknown target mode '{self.target_mode}' (choose from {TARGET_MODES})")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigurationError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigurationError(f"tau must lie in [0, 1], got {self.tau}")
        if self.actor_lr < 0 or self.critic_lr < 0 or self.noise_fraction < 0:
            raise ConfigurationError("learning rates and noise fraction must be non-negative")


@dataclass(eq=False)
class ActorCritic:
    actor: ng.MlpParams
    critic: ng.MlpParams
    actor_target: ng.MlpParams
    critic_target: ng.MlpParams
    scaling: InputScaling
    gamma: float = Config.GAMMA
    tau: float = Config.TAU
    noise_fraction: float = Config.NOISE_FRACTION
    actor_opt: Optional[ng.AdamState] = None
    critic_opt: Optional[ng.AdamState] = None

    def __post_init__(self):
        if self.actor_opt is None:
            self.actor_opt = ng.adam_init(self.actor.arrays(), lr=Config.ACTOR_LR)
        if self.critic_opt is None:
            self.critic_opt = ng.adam_init(self.critic.arrays(), lr=Config.CRITIC_LR)

    @classmethod
    def from_networks(cls, actor: ng.MlpParams, critic: ng.MlpParams, scaling: InputScaling,
                      gamma: float = Config.GAMMA, tau: float = Config.TAU,
                      noise_fraction: float = Config.NOISE_FRACTION, actor_lr: float = Config.ACTOR_LR,
                      critic_lr: float = Config.CRITIC_LR) -> 'ActorCritic':
        """Online networks plus freshly copied targets and optimizer state."""
        return cls(actor=actor, critic=critic, actor_target=actor.copy(), critic_target=critic.copy(),
                   scaling=scaling, gamma=gamma, tau=tau, noise_fraction=noise_fraction,
                   actor_opt=ng.adam_init(actor.arrays(), lr=actor_lr),
                   critic_opt=ng.adam_init(critic.arrays(), lr=critic_lr))

    @property
    def state_dim(self) -> int:
        return self.scaling.state_center.size

    @property
    def action_dim(self) -> int:
        return self.scaling.action_center.size

    @property
    def noise_std(self) -> np.ndarray:
        return self.noise_fraction * 2.0 * self.scaling.action_scale

    def act(self, state, goal, target: bool = False):
        return actor_apply(self, state, goal, target=target)

    def q_value(self, state, action, goal, target: bool = False):
        return critic_apply(self, state, action, goal, target=target)

    def explore(self, obs: GoalObservation, rng: np.random.Generator) -> np.ndarray:
        """Deterministic action plus Gaussian noise, clamped to the action box."""
        action = np.asarray(self.act(obs.state, obs.desired_goal))
        noisy = action + rng.normal(0.0, 1.0, size=action.shape) * self.noise_std
        lower = self.scaling.action_center - self.scaling.action_scale
        upper = self.scaling.action_center + self.scaling.action_scale
        return np.clip(noisy, lower, upper)

    def policy(self) -> Callable[[GoalObservation], np.ndarray]:
        return lambda obs: np.asarray(self.act(obs.state, obs.desired_goal))


def actor_apply(ac: ActorCritic, state, goal, arrays=None, target: bool = False):
    params = ac.actor_target if target else ac.actor
    squashed = ng.mlp_apply(params, ac.scaling.encode(state, goal), arrays)
    return ac.scaling.decode_action(squashed)


def critic_apply(ac: ActorCritic, state, action, goal, arrays=None, target: bool = False):
    params = ac.critic_target if target else ac.critic
    features = ng.concat([ac.scaling.encode(state, goal), ac.scaling.encode_action(action)], axis=-1)
    return ng.mlp_apply(params, features, arrays)[..., 0]


def init_actor_critic(env: GoalEnv, config: TrainConfig) -> ActorCritic:
    scaling = InputScaling.for_env(env)
    hidden = list(config.hidden_sizes)
    actor = ng.mlp_init([scaling.feature_dim, *hidden, env.action_dim], seed=config.seed,
                        output_activation='tanh')
    critic = ng.mlp_init([scaling.feature_dim + env.action_dim, *hidden, 1], seed=config.seed + 1)
    return ActorCritic.from_networks(actor, critic, scaling, gamma=config.gamma, tau=config.tau,
                                     noise_fraction=config.noise_fraction, actor_lr=config.actor_lr,
                                     critic_lr=config.critic_lr)


def _bootstrap(ac: ActorCritic, next_states: np.ndarray, goals: np.ndarray) -> np.ndarray:
    next_actions = actor_apply(ac, next_states, goals, target=True)
    return critic_apply(ac, next_states, next_actions, goals, target=True)


def _branch_rows(env: GoalEnv, states: np.ndarray, actions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """branch_batch, retried row by row when a branch diverges; failed rows are NaN and flagged False."""
    try:
        return branch_batch(env, states, actions), np.ones(len(states), dtype=bool)
    except IntegrationError:
        pass
    branches = np.full((len(env.scenarios), len(states), env.state_dim), np.nan)
    ok = np.zeros(len(states), dtype=bool)
    for i in range(len(states)):
        try:
            branches[:, i] = branch_batch(env, states[i:i + 1], actions[i:i + 1])[:, 0]
            ok[i] = True
        except IntegrationError:
            continue
    return branches, ok


def critic_targets(batch: Batch, ac: ActorCritic, env: GoalEnv, mode: str = 'sampled') -> np.ndarray:
    """r + gamma (1 - done) V_target(s'), with s' sampled or averaged over every branch.

    In full-branch mode a row with any diverging branch gets a NaN target.
    """
    if len(batch) == 0:
        raise ConfigurationError("critic_targets needs a nonempty batch")
    if mode == 'sampled':
        bootstrap = _bootstrap(ac, batch.next_states, batch.goals)
    elif mode == 'full-branch':
        branches, ok = _branch_rows(env, batch.states, batch.actions)
        branches = np.where(ok[None, :, None], branches, batch.states[None])
        goals = np.broadcast_to(batch.goals, branches.shape[:-1] + (batch.goals.shape[-1],))
        bootstrap = np.mean(_bootstrap(ac, branches, goals), axis=0)
        bootstrap = np.where(ok, bootstrap, np.nan)
    else:
        raise ConfigurationError(f"Unknown target mode '{mode}'")
    return batch.rewards + ac.gamma * (1.0 - batch.dones) * bootstrap


def critic_loss(ac: ActorCritic, batch: Batch, targets: np.ndarray, arrays=None):
    q = critic_apply(ac, batch.states, batch.actions, batch.goals, arrays)
    return ng.mean(ng.square(q - targets))


def actor_objective(ac: ActorCritic, batch: Batch, arrays=None):
    actions = actor_apply(ac, batch.states, batch.goals, arrays)
    return ng.mean(critic_apply(ac, batch.states, actions, batch.goals))


def polyak(target: ng.MlpParams, online: ng.MlpParams, tau: float) -> ng.MlpParams:
    return target.with_arrays([(1.0 - tau) * t + tau * o for t, o in zip(target.arrays(), online.arrays())])


def update_step(ac: ActorCritic, batch: Batch, env: GoalEnv,
                config: Optional[TrainConfig] = None) -> Tuple[ActorCritic, float, float]:
    """Critic descent, actor ascent on the updated critic, then Polyak targets."""
    mode = config.target_mode if config is not None else Config.TARGET_MODE
    targets = critic_targets(batch, ac, env, mode)
    if mode == 'full-branch':
        keep = np.isfinite(targets)
        if not np.all(keep):
            logger.warning(f"Dropping {int(np.sum(~keep))} of {len(batch)} transitions with a diverging branch")
            if not np.any(keep):
                return ac, float('nan'), float('nan')
            batch, targets = batch.subset(keep), targets[keep]

    loss, critic_grads = ng.value_and_grad(lambda w: critic_loss(ac, batch, targets, w), ac.critic.arrays())
    if not np.isfinite(loss):
        raise TrainingAborted(f"critic loss became non-finite ({loss})")
    try:
        critic_arrays, critic_opt = ng.adam_step(ac.critic.arrays(), critic_grads, ac.critic_opt)
    except NumericalError as e:
        raise TrainingAborted(f"critic update failed: {e}") from e
    ac = replace(ac, critic=ac.critic.with_arrays(critic_arrays), critic_opt=critic_opt)

    neg_objective, actor_grads = ng.value_and_grad(lambda w: -actor_objective(ac, batch, w), ac.actor.arrays())
    if not np.isfinite(neg_objective):
        raise TrainingAborted(f"actor objective became non-finite ({-neg_objective})")
    try:
        actor_arrays, actor_opt = ng.adam_step(ac.actor.arrays(), actor_grads, ac.actor_opt)
    except NumericalError as e:
        raise TrainingAborted(f"actor update failed: {e}") from e
    ac = replace(ac, actor=ac.actor.with_arrays(actor_arrays), actor_opt=actor_opt)

    ac = replace(ac, actor_target=polyak(ac.actor_target, ac.actor, ac.tau),
                 critic_target=polyak(ac.critic_target, ac.critic, ac.tau))
    return ac, float(loss), float(-neg_objective)


def train(env: GoalEnv, config: TrainConfig, on_episode: Optional[Callable[[dict], None]] = None
          ) -> Tuple[ActorCritic, pd.DataFrame]:
    """Run the off-policy training loop; returns the agent and per-episode metrics."""
    rng = np.random.default_rng(config.seed)
    ac = init_actor_critic(env, config)
    rows: List[dict] = []
    if config.total_steps == 0:
        return ac, pd.DataFrame(rows, columns=METRIC_COLUMNS)

    logger.info(f"Training on '{env.name}' with {len(env.scenarios)} scenarios for {config.total_steps} steps "
                f"(target mode {config.target_mode}, HER {'on' if config.her_enabled else 'off'})")
    buffer = ReplayBuffer(min(config.buffer_capacity, config.total_steps * (2 if config.her_enabled else 1)),
                          env.state_dim, env.goal_dim, env.action_dim)
    obs = env_reset(env, rng)
    episode: List[Transition] = []
    episode_return, n_episodes, dropped = 0.0, 0, 0
    last_loss, last_objective = float('nan'), float('nan')

    for step in range(1, config.total_steps + 1):
        if step <= config.warmup_steps:
            action = env.action_box.sample(rng)
        else:
            action = ac.explore(obs, rng)
        result = env_step(env, obs, action, rng)

        if result.failed:
            dropped += 1
            logger.warning(f"Episode dropped at step {step}: non-finite state under scenario {result.scenario_index}")
            episode, episode_return = [], 0.0
            obs = env_reset(env, rng)
            continue

        done = result.done and env.time_limit_terminal
        episode.append(Transition(obs, np.asarray(action, dtype=np.float64), result.reward, result.obs,
                                  done, result.scenario_index))
        episode_return += result.reward

        if step > config.warmup_steps and len(buffer) >= config.batch_size:
            for _ in range(config.updates_per_step):
                ac, last_loss, last_objective = update_step(ac, buffer.sample(config.batch_size, rng), env, config)

        if result.done:
            buffer.add_many(episode)
            if config.her_enabled:
                buffer.add_many(her_relabel(episode, env.reward))
            n_episodes += 1
            row = {'step': step, 'episode': n_episodes, 'return': episode_return, 'critic_loss': last_loss,
                   'actor_objective': last_objective, 'buffer_size': len(buffer)}
            rows.append(row)
            if on_episode is not None:
                on_episode(row)
            if config.log_every and n_episodes % config.log_every == 0:
                logger.info(f"Episode {n_episodes} (step {step}): return {episode_return:.3f}, "
                            f"critic loss {last_loss:.4g}, actor objective {last_objective:.4g}")
            episode, episode_return = [], 0.0
            obs = env_reset(env, rng)
        else:
            obs = result.obs

    if dropped:
        logger.warning(f"{dropped} episodes dropped after integration failures")
    logger.info(f"Training finished: {n_episodes} episodes, buffer holds {len(buffer)} transitions")
    return ac, pd.DataFrame(rows, columns=METRIC_COLUMNS)


def _evaluate_rollout(policy, env: GoalEnv, eval_scenarios: ScenarioSet, horizon: int, tail: int,
                      seed: int, rollout_id: int) -> dict:
    rng = np.random.default_rng([seed, rollout_id])
    obs = env_reset(env, rng)
    scenario_index = int(rng.integers(len(eval_scenarios)))
    plant = replace(env, scenarios=eval_scenarios, episode_length=max(int(horizon), 1))
    trajectory = rollout(plant, policy, obs, horizon, rng, scenario_index=scenario_index)
    window = max(min(int(tail), trajectory.length), 0)
    if window == 0:
        tail_reward, tail_error = float('nan'), float('nan')
    else:
        achieved = trajectory.achieved(env)[-window:]
        tail_reward = float(np.mean(trajectory.rewards[-window:]))
        tail_error = float(np.mean(percent_error(achieved, obs.desired_goal)))
    return {'rollout': rollout_id, 'scenario_index': scenario_index,
            'goal': float(obs.desired_goal[0]), 'tail_reward': tail_reward, 'tail_pct_error': tail_error}


def evaluate_rl(policy, env: GoalEnv, n_starts: int = Config.EVAL_STARTS, horizon: int = Config.EVAL_HORIZON,
                tail: int = Config.EVAL_TAIL, eval_scenarios: Optional[ScenarioSet] = None,
                seed: int = Config.SEED, threads: int = 1) -> pd.DataFrame:
    """Noise-free rollouts from sampled starts/goals under one fixed evaluation scenario each.

    ``policy`` is an :class:`ActorCritic` or any callable mapping an observation
    to an action. Rows are ordered by rollout id.
    """
    if isinstance(policy, ActorCritic):
        policy = policy.policy()
    eval_scenarios = eval_scenarios or env.scenarios
    ids = range(int(n_starts))

    def run(rollout_id: int) -> dict:
        return _evaluate_rollout(policy, env, eval_scenarios, horizon, tail, seed, rollout_id)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(run, ids))
    else:
        rows = [run(i) for i in ids]
    return pd.DataFrame(rows, columns=EVAL_COLUMNS)
