# utils/comparison.py
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from typing import Callable, Dict, List, Optional

import numpy as np
import pandas as pd

from config.settings import Config
from src.envs import GoalEnv, GoalObservation, ScenarioSet, Trajectory, env_reset, rollout

COMPARE_COLUMNS = ['agent', 'rollout', 'metric', 'value']
METRICS = ['time_near_goal', 'time_outside_constraints', 'action_total_variation', 'solver_failures']

# builds a fresh policy for one rollout; the generator seeds any solver restarts
AgentFactory = Callable[[np.random.Generator], Callable[[GoalObservation], np.ndarray]]


class AgentComparison:
    """Paired closed-loop rollouts of several agents on a common plant.

    Rollout ``r`` draws its start state, goal and plant scenario from a generator
    seeded with ``(seed, r)``, so every agent faces the same conditions.
    """

    def __init__(self, env: GoalEnv, agents: Dict[str, AgentFactory], plant_scenarios: ScenarioSet,
                 length: int = Config.COMPARE_LENGTH, seed: int = Config.SEED, threads: int = 1,
                 metric_sigma2: float = Config.METRIC_VARIANCE):
        self.env = env
        self.agents = dict(agents)
        self.plant = replace(env, scenarios=plant_scenarios, episode_length=max(int(length), 1))
        self.length = int(length)
        self.seed = int(seed)
        self.threads = max(int(threads), 1)
        self.metric_sigma2 = metric_sigma2
        self.logger = logging.getLogger(__name__)

    def draw_conditions(self, rollout_id: int):
        """Start observation and plant scenario for one paired rollout."""
        rng = np.random.default_rng([self.seed, rollout_id])
        obs = env_reset(self.env, rng)
        scenario_index = int(rng.integers(len(self.plant.scenarios)))
        return obs, scenario_index

    def run_agent(self, name: str, obs: GoalObservation, scenario_index: int, rollout_id: int,
                  length: Optional[int] = None) -> Trajectory:
        agent_index = list(self.agents).index(name)
        rng = np.random.default_rng([self.seed, rollout_id, agent_index])
        policy = self.agents[name](rng)
        trajectory = rollout(self.plant, policy, obs, self.length if length is None else length, rng,
                             scenario_index=scenario_index)
        trajectory.solver_failures = int(getattr(policy, 'failures', 0))
        if trajectory.failed:
            self.logger.warning(f"Agent {name} hit a non-finite plant state in rollout {rollout_id}")
        return trajectory

    def _rollout_rows(self, rollout_id: int) -> List[Dict]:
        obs, scenario_index = self.draw_conditions(rollout_id)
        rows = []
        for name in self.agents:
            metrics = self.run_agent(name, obs, scenario_index, rollout_id).metrics(self.plant, self.metric_sigma2)
            rows.extend({'agent': name, 'rollout': rollout_id, 'metric': metric, 'value': metrics[metric]}
                        for metric in METRICS)
        return rows

    def run_comparison(self, n_rollouts: int = Config.COMPARE_ROLLOUTS) -> pd.DataFrame:
        """Long-format metrics, ordered by agent then rollout id."""
        self.logger.info(f"Comparing {', '.join(self.agents)} over {n_rollouts} paired rollouts "
                         f"of {self.length} steps")
        ids = range(int(n_rollouts))
        if self.threads > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                chunks = list(pool.map(self._rollout_rows, ids))
        else:
            chunks = [self._rollout_rows(i) for i in ids]
        frame = pd.DataFrame([row for chunk in chunks for row in chunk], columns=COMPARE_COLUMNS)
        if frame.empty:
            return frame
        order = {name: i for i, name in enumerate(self.agents)}
        frame = frame.assign(_order=frame['agent'].map(order), _metric=frame['metric'].map(METRICS.index))
        frame = frame.sort_values(['_order', 'rollout', '_metric'], kind='mergesort')
        return frame.drop(columns=['_order', '_metric']).reset_index(drop=True)

    def run_profile(self, obs: GoalObservation, scenario_index: int, length: Optional[int] = None) -> pd.DataFrame:
        """One trajectory per agent from a common start, goal and scenario."""
        frames = []
        for name in self.agents:
            trajectory = self.run_agent(name, obs, scenario_index, rollout_id=0, length=length)
            frame = trajectory.to_frame(self.plant)
            frame.insert(0, 'agent', name)
            frame['goal'] = float(obs.desired_goal[0])
            frames.append(frame)
        return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()
