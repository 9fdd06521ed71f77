import numpy as np
import pandas as pd
import pytest

from src.dynamics import LinearSystem, ScenarioParam
from src.envs import BoxConstraint, ScenarioSet, make_linear_env
from utils.analytics import ExperimentAnalytics
from utils.comparison import METRICS, AgentComparison


def write_compare(path):
    rows = []
    for rollout, (a, b) in enumerate([(-0.5, 0.0), (0.0, 0.0), (-1.0, -2.0), (0.0, -0.1)]):
        rows.append({'agent': 'mpc', 'rollout': rollout, 'metric': 'time_outside_constraints', 'value': a})
        rows.append({'agent': 'rl_mpc', 'rollout': rollout, 'metric': 'time_outside_constraints', 'value': b})
    pd.DataFrame(rows).to_csv(path / 'compare.csv', index=False)


def test_empty_directory_gives_empty_summaries(tmp_path):
    analytics = ExperimentAnalytics(str(tmp_path))
    assert analytics.training_summary() == {}
    assert analytics.evaluation_summary().empty
    assert np.isnan(analytics.violation_fraction('mpc'))
    report = analytics.generate_report()
    assert open(report).read().startswith('EXPERIMENT SUMMARY')


def test_blank_file_is_treated_as_empty(tmp_path):
    (tmp_path / 'compare.csv').write_text('')
    assert ExperimentAnalytics(str(tmp_path)).comparison.empty


def test_comparison_statistics(tmp_path):
    write_compare(tmp_path)
    analytics = ExperimentAnalytics(str(tmp_path))
    assert analytics.violation_fraction('mpc') == pytest.approx(0.5)
    assert analytics.violation_fraction('rl_mpc') == pytest.approx(0.5)
    assert analytics.paired_wins('rl_mpc', 'mpc', 'time_outside_constraints') == pytest.approx(0.25)
    assert np.isnan(analytics.paired_wins('mpc', 'absent', 'time_outside_constraints'))
    summary = analytics.comparison_summary()
    row = summary[summary['agent'] == 'mpc'].iloc[0]
    assert row['median'] == pytest.approx(-0.25)
    assert row['negative_fraction'] == pytest.approx(0.5)
    text = open(analytics.generate_report()).read()
    assert 'AGENT COMPARISON' in text and 'rl_mpc:' in text


def test_training_and_evaluation_sections(tmp_path):
    pd.DataFrame({'step': [10, 20], 'episode': [1, 2], 'return': [1.0, 3.0], 'critic_loss': [np.nan, 0.5],
                  'actor_objective': [np.nan, 1.5], 'buffer_size': [20, 40]}).to_csv(
        tmp_path / 'train_metrics.csv', index=False)
    pd.DataFrame({'agent': ['a'] * 3, 'mode': ['robust'] * 3, 'rollout': [0, 1, 2], 'scenario_index': [0, 1, 2],
                  'goal': [0.5] * 3, 'tail_reward': [0.9, 0.8, 0.7], 'tail_pct_error': [1.0, 2.0, 3.0]}).to_csv(
        tmp_path / 'eval_rl.csv', index=False)
    analytics = ExperimentAnalytics(str(tmp_path))
    training = analytics.training_summary()
    assert training['episodes'] == 2 and training['recent_return'] == pytest.approx(2.0)
    evaluation = analytics.evaluation_summary().iloc[0]
    assert evaluation['rollouts'] == 3 and evaluation['median_pct_error'] == pytest.approx(2.0)
    text = open(analytics.generate_report()).read()
    assert 'TRAINING:' in text and 'a / robust: median 2.000%' in text


def scalar_env():
    return make_linear_env(LinearSystem(A=[[1.0]], B=[[1.0]]), state_box=BoxConstraint([-1.0], [1.0]),
                           action_box=BoxConstraint([-0.5], [0.5]), goal_box=BoxConstraint([-0.5], [0.5]),
                           disturbances=(-0.1, 0.1))


class CountingPolicy:
    failures = 2

    def __call__(self, obs):
        return -obs.state


def test_paired_rollouts_share_conditions_and_order():
    env = scalar_env()
    agents = {'hold': lambda rng: (lambda obs: np.zeros(1)), 'counting': lambda rng: CountingPolicy()}
    comparison = AgentComparison(env, agents, env.scenarios, length=4, seed=3, threads=2)
    frame = comparison.run_comparison(3)
    assert list(frame.columns) == ['agent', 'rollout', 'metric', 'value']
    assert len(frame) == 2 * 3 * len(METRICS)
    assert list(frame['agent'][:3 * len(METRICS)]) == ['hold'] * 3 * len(METRICS)
    assert list(frame['metric'][:len(METRICS)]) == METRICS
    failures = frame[(frame['agent'] == 'counting') & (frame['metric'] == 'solver_failures')]['value']
    assert (failures == 2.0).all()
    assert frame.equals(AgentComparison(env, agents, env.scenarios, length=4, seed=3).run_comparison(3))

    obs, scenario_index = comparison.draw_conditions(1)
    again, index_again = comparison.draw_conditions(1)
    np.testing.assert_array_equal(obs.state, again.state)
    assert scenario_index == index_again


def test_profile_frames_per_agent():
    env = scalar_env()
    comparison = AgentComparison(env, {'hold': lambda rng: (lambda obs: np.zeros(1))},
                                 ScenarioSet([ScenarioParam(disturbance=0.1)]), length=3)
    frame = comparison.run_profile(env.observe([0.0], [0.25]), 0)
    np.testing.assert_allclose(frame['x0'], [0.0, 0.1, 0.2])
    assert (frame['goal'] == 0.25).all() and (frame['agent'] == 'hold').all()
