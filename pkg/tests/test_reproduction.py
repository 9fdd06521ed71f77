"""Long CSTR runs checking the qualitative orderings between agents.

These are skipped unless HF_RUN_SLOW=1; each takes from minutes to hours on one CPU.
"""
import numpy as np
import pytest

from src.envs import cstr_scenario_set, make_cstr_env
from src.mpc import CriticTerminal, GaussianGoalStage, MpcProblem, QuadraticStage, RecedingHorizonController
from src.rl import TrainConfig, evaluate_rl, train
from utils.analytics import ExperimentAnalytics
from utils.comparison import AgentComparison

pytestmark = pytest.mark.slow


@pytest.fixture(scope='module')
def agents():
    robust, _ = train(make_cstr_env('grid'), TrainConfig(total_steps=100000, target_mode='full-branch', seed=0))
    nominal, _ = train(make_cstr_env('nominal'), TrainConfig(total_steps=100000, seed=0))
    return robust, nominal


def test_robust_training_beats_nominal_training(agents):
    robust, nominal = agents
    env = make_cstr_env('grid')
    scenarios = cstr_scenario_set('evaluation')
    robust_err = evaluate_rl(robust, env, 200, 50, 25, scenarios, seed=1)['tail_pct_error'].median()
    nominal_err = evaluate_rl(nominal, env, 200, 50, 25, scenarios, seed=1)['tail_pct_error'].median()
    assert robust_err <= 5.0
    assert robust_err < nominal_err


def build_comparison(env, robust):
    extreme = cstr_scenario_set('extreme')
    goal_weight = np.diag([0.0, 1.0, 0.0, 0.0])
    baseline = MpcProblem.for_env(env, 20, QuadraticStage(goal_weight, np.zeros((2, 2))), scenarios=extreme,
                                  penalty_weight=100.0)
    unified = MpcProblem.for_env(env, 5, GaussianGoalStage(0.0625), scenarios=extreme,
                                 terminal=CriticTerminal(robust))
    return AgentComparison(env, {
        'mpc': lambda rng: RecedingHorizonController(baseline, rng),
        'rl': lambda rng: robust.policy(),
        'rl_mpc': lambda rng: RecedingHorizonController(unified, rng),
    }, cstr_scenario_set('evaluation'), length=100, seed=2)


def test_unified_policy_orderings(agents, tmp_path):
    robust, _ = agents
    comparison = build_comparison(make_cstr_env('grid'), robust)
    comparison.run_comparison(100).to_csv(tmp_path / 'compare.csv', index=False)

    analytics = ExperimentAnalytics(str(tmp_path))
    assert analytics.violation_fraction('rl') >= 0.8
    assert analytics.violation_fraction('rl_mpc') < analytics.violation_fraction('rl')
    assert np.median(analytics.metric_values('rl_mpc', 'time_near_goal')) > \
        np.median(analytics.metric_values('mpc', 'time_near_goal'))


def shows_characteristic_profile(frame, env):
    """MPC parked on an input bound, RL leaving the box then settling, RL+MPC inside and converging."""
    states = list(env.model.state_names)
    actions = list(env.model.action_names)

    def part(name):
        return frame[frame['agent'] == name]

    def outside(rows):
        x = rows[states].to_numpy()
        return np.any((x < env.state_box.lower - 1e-9) | (x > env.state_box.upper + 1e-9), axis=1)

    def tail_error(rows):
        return float(np.mean(np.abs(rows['c_B'].to_numpy()[-10:] - rows['goal'].to_numpy()[-10:])))

    mpc, rl, unified = part('mpc'), part('rl'), part('rl_mpc')
    u = mpc[actions].to_numpy()[-20:]
    tol = 1e-6 * env.action_box.half_width
    parked = np.all(np.any((u <= env.action_box.lower + tol) | (u >= env.action_box.upper - tol), axis=1))
    rl_out = outside(rl)
    rl_settles = rl_out[:len(rl_out) // 2].any() and not rl_out[-10:].any()
    unified_ok = outside(unified).mean() < rl_out.mean() and tail_error(unified) < tail_error(mpc)
    return bool(parked and rl_settles and unified_ok)


def test_some_paired_profile_shows_the_characteristic_pattern(agents):
    robust, _ = agents
    env = make_cstr_env('grid')
    comparison = build_comparison(env, robust)
    for rollout_id in range(20):
        obs, scenario_index = comparison.draw_conditions(rollout_id)
        if shows_characteristic_profile(comparison.run_profile(obs, scenario_index), env):
            return
    pytest.fail("no paired profile among 20 shows the characteristic pattern")
