# src/__init__.py
"""Robust goal-conditioned control: autodiff, models, LQR, environments, RL and scenario MPC."""

from .envs import GoalEnv, ScenarioSet, BoxConstraint
from .rl import ActorCritic, TrainConfig
from .mpc import MpcProblem, RecedingHorizonController
from .lqr import LqrProblem, solve_dare
from .logger import MetricsLogger
from .errors import HindsightError

__all__ = [
    'GoalEnv',
    'ScenarioSet',
    'BoxConstraint',
    'ActorCritic',
    'TrainConfig',
    'MpcProblem',
    'RecedingHorizonController',
    'LqrProblem',
    'solve_dare',
    'MetricsLogger',
    'HindsightError'
]
