from dataclasses import replace

import numpy as np
import pytest

from conftest import central_difference, relative_error
from src import numgrad as ng
from src.dynamics import LinearSystem
from src.envs import BoxConstraint, env_reset, make_linear_env, make_trivial_env
from src.errors import ConfigurationError, IntegrationError
from src.rl import (METRIC_COLUMNS, Batch, InputScaling, ReplayBuffer, TrainConfig, Transition,
                    actor_objective, critic_loss, critic_targets, evaluate_rl, her_relabel,
                    init_actor_critic, polyak, train, update_step)

SMALL = dict(hidden_sizes=(8, 8), batch_size=16, warmup_steps=20, buffer_capacity=1000)


def integrator_env(disturbances=(0.0,), **kwargs):
    return make_linear_env(LinearSystem(A=[[1.0, 0.1], [0.0, 1.0]], B=[[0.0], [0.1]]),
                           state_box=BoxConstraint([-2.0, -2.0], [2.0, 2.0]),
                           action_box=BoxConstraint([-1.0], [1.0]), goal_box=BoxConstraint([-1.0], [1.0]),
                           disturbances=disturbances, sigma2=0.05, episode_length=5, **kwargs)


def random_batch(env, rng, size=6):
    transitions = []
    for _ in range(size):
        obs = env_reset(env, rng)
        action = env.action_box.sample(rng)
        next_state = obs.state + np.array([0.1 * obs.state[1], 0.1 * action[0]])
        next_obs = env.observe(next_state, obs.desired_goal, t=1)
        reward = float(env.reward(next_obs.achieved_goal, next_obs.desired_goal))
        transitions.append(Transition(obs, action, reward, next_obs, False, 0))
    return Batch.from_transitions(transitions)


def episode_of(env, rng, length=4):
    obs = env_reset(env, rng)
    episode = []
    for t in range(length):
        action = env.action_box.sample(rng)
        nxt = env.observe(obs.state + rng.normal(size=env.state_dim) * 0.1, obs.desired_goal, t=t + 1)
        episode.append(Transition(obs, action, float(env.reward(nxt.achieved_goal, nxt.desired_goal)), nxt,
                                  t == length - 1, t % 2))
        obs = nxt
    return episode


def test_replay_buffer_ring_overwrites_oldest(rng):
    env = integrator_env()
    buffer = ReplayBuffer(3, env.state_dim, env.goal_dim, env.action_dim)
    episode = episode_of(env, rng, length=5)
    buffer.add_many(episode)
    assert len(buffer) == 3 and buffer.counter == 5
    np.testing.assert_array_equal(buffer.states[0], episode[3].obs.state)
    batch = buffer.sample(10, rng)
    assert len(batch) == 10
    with pytest.raises(ConfigurationError):
        ReplayBuffer(0, 1, 1, 1)


def test_her_relabel_properties(rng):
    env = integrator_env()
    episode = episode_of(env, rng, length=6)
    relabeled = her_relabel(episode, env.reward)
    assert len(relabeled) == len(episode)
    final_goal = episode[-1].next_obs.achieved_goal
    assert relabeled[-1].reward == 1.0
    for original, copy in zip(episode, relabeled):
        np.testing.assert_array_equal(copy.obs.desired_goal, final_goal)
        np.testing.assert_array_equal(copy.next_obs.desired_goal, final_goal)
        np.testing.assert_array_equal(copy.obs.state, original.obs.state)
        np.testing.assert_array_equal(copy.next_obs.state, original.next_obs.state)
        np.testing.assert_array_equal(copy.action, original.action)
        assert copy.done == original.done and copy.scenario_index == original.scenario_index
    assert her_relabel([], env.reward) == []


def test_her_with_sparse_reward(rng):
    env = integrator_env(reward_kind='sparse', threshold=0.01)
    relabeled = her_relabel(episode_of(env, rng), env.reward)
    assert relabeled[-1].reward == 1.0


def test_input_scaling_encodes_goal_error():
    env = integrator_env()
    scaling = InputScaling.for_env(env)
    features = scaling.encode(np.array([1.0, -2.0]), np.array([0.0]))
    np.testing.assert_allclose(features, [0.5, -1.0, -0.5])
    restored = InputScaling.from_dict(scaling.to_dict())
    np.testing.assert_array_equal(restored.state_scale, scaling.state_scale)
    assert restored.goal_indices == scaling.goal_indices
    np.testing.assert_allclose(scaling.decode_action(scaling.encode_action(np.array([0.3]))), [0.3])


@pytest.mark.parametrize('kwargs', [dict(total_steps=10, warmup_steps=10), dict(gamma=1.0), dict(tau=1.5),
                                    dict(target_mode='all'), dict(batch_size=0)])
def test_train_config_validation(kwargs):
    with pytest.raises(ConfigurationError):
        TrainConfig(**kwargs)


def test_actions_stay_in_box(rng):
    env = integrator_env()
    ac = init_actor_critic(env, TrainConfig(**SMALL))
    for _ in range(10):
        obs = env_reset(env, rng)
        assert env.action_box.contains(ac.act(obs.state, obs.desired_goal))
        assert env.action_box.contains(ac.explore(obs, rng))


def test_terminal_transitions_do_not_bootstrap(rng):
    env = integrator_env()
    ac = init_actor_critic(env, TrainConfig(**SMALL))
    batch = random_batch(env, rng)
    batch.dones[:] = 1.0
    np.testing.assert_array_equal(critic_targets(batch, ac, env), batch.rewards)


def test_full_branch_equals_sampled_for_single_scenario(rng):
    env = integrator_env()
    ac = init_actor_critic(env, TrainConfig(**SMALL))
    batch = random_batch(env, rng)
    np.testing.assert_allclose(critic_targets(batch, ac, env, 'full-branch'),
                               critic_targets(batch, ac, env, 'sampled'), rtol=1e-12, atol=1e-12)


def test_full_branch_averages_every_scenario(rng):
    env = integrator_env(disturbances=(-0.1, 0.2))
    ac = init_actor_critic(env, TrainConfig(**SMALL))
    batch = random_batch(env, rng)
    expected = np.zeros(len(batch))
    for d in (-0.1, 0.2):
        nxt = batch.states @ env.model.system.A.T + batch.actions @ env.model.system.B.T + d
        manual = replace(batch, next_states=nxt)
        expected += 0.5 * critic_targets(manual, ac, env, 'sampled')
    np.testing.assert_allclose(critic_targets(batch, ac, env, 'full-branch'), expected, rtol=1e-10)
    with pytest.raises(ConfigurationError):
        critic_targets(batch, ac, env, 'other')


def test_critic_and_actor_gradients_match_finite_differences(rng):
    env = integrator_env()
    for trial in range(20):
        ac = init_actor_critic(env, TrainConfig(seed=trial, **SMALL))
        batch = random_batch(env, rng)
        targets = critic_targets(batch, ac, env)

        critic = ac.critic.arrays()
        _, grads = ng.value_and_grad(lambda w: critic_loss(ac, batch, targets, w), critic)
        fd = central_difference(lambda a: float(critic_loss(ac, batch, targets, [a] + critic[1:])), critic[0])
        assert relative_error(grads[0], fd) <= 1e-4

        actor = ac.actor.arrays()
        _, grads = ng.value_and_grad(lambda w: actor_objective(ac, batch, w), actor)
        fd = central_difference(lambda a: float(actor_objective(ac, batch, actor[:-1] + [a])), actor[-1])
        assert relative_error(grads[-1], fd) <= 1e-4


def test_polyak_extremes():
    a = ng.mlp_init([2, 3, 1], seed=0)
    b = ng.mlp_init([2, 3, 1], seed=1)
    for x, y in zip(polyak(a, b, 1.0).arrays(), b.arrays()):
        np.testing.assert_array_equal(x, y)
    for x, y in zip(polyak(a, b, 0.0).arrays(), a.arrays()):
        np.testing.assert_array_equal(x, y)


def test_update_step_moves_online_and_targets(rng):
    env = integrator_env()
    ac = init_actor_critic(env, TrainConfig(**SMALL))
    new, loss, objective = update_step(ac, random_batch(env, rng), env, TrainConfig(**SMALL))
    assert np.isfinite(loss) and np.isfinite(objective)
    assert not np.array_equal(new.critic.weights[0], ac.critic.weights[0])
    assert not np.array_equal(new.actor.weights[0], ac.actor.weights[0])
    assert not np.array_equal(new.critic_target.weights[0], ac.critic_target.weights[0])
    assert new.critic_opt.step == 1 and new.actor_opt.step == 1


def test_zero_step_training_returns_initial_networks():
    env = integrator_env()
    config = TrainConfig(total_steps=0, **SMALL)
    ac, metrics = train(env, config)
    assert list(metrics.columns) == METRIC_COLUMNS and metrics.empty
    np.testing.assert_array_equal(ac.actor.weights[0], init_actor_critic(env, config).actor.weights[0])


def test_training_is_deterministic():
    env = integrator_env(disturbances=(-0.05, 0.05))
    config = TrainConfig(total_steps=80, **SMALL)
    (a, m1), (b, m2) = train(env, config), train(env, config)
    for x, y in zip(a.actor.arrays() + a.critic.arrays(), b.actor.arrays() + b.critic.arrays()):
        np.testing.assert_array_equal(x, y)
    assert m1.equals(m2)
    assert len(m1) == 80 // env.episode_length


def test_critic_learns_geometric_series_value():
    # reward 1 forever and no terminal flag: Q* = 1 / (1 - gamma)
    env = make_trivial_env(episode_length=10)
    config = TrainConfig(total_steps=4000, batch_size=32, warmup_steps=100, buffer_capacity=10000,
                         hidden_sizes=(16, 16), gamma=0.5, tau=0.05, critic_lr=3e-3, actor_lr=1e-3,
                         her_enabled=False)
    ac, _ = train(env, config)
    state, goal = np.zeros(1), np.zeros(1)
    q = float(ac.q_value(state, ac.act(state, goal), goal))
    assert q == pytest.approx(2.0, rel=0.01)


def test_evaluate_rl_single_degenerate_start(rng):
    env = integrator_env(init_box=BoxConstraint([0.5, 0.0], [0.5, 0.0]))
    ac = init_actor_critic(env, TrainConfig(**SMALL))
    first = evaluate_rl(ac, env, n_starts=1, horizon=10, tail=5, seed=3)
    again = evaluate_rl(ac, env, n_starts=1, horizon=10, tail=5, seed=3)
    assert len(first) == 1
    assert first.equals(again)
    assert list(first.columns) == ['rollout', 'scenario_index', 'goal', 'tail_reward', 'tail_pct_error']


def test_evaluate_rl_orders_rows_by_rollout_across_threads():
    env = integrator_env(disturbances=(-0.1, 0.0, 0.1))
    ac = init_actor_critic(env, TrainConfig(**SMALL))
    serial = evaluate_rl(ac, env, n_starts=6, horizon=5, tail=2, seed=9, threads=1)
    parallel = evaluate_rl(ac, env, n_starts=6, horizon=5, tail=2, seed=9, threads=3)
    assert list(serial['rollout']) == list(range(6))
    assert serial.equals(parallel)


def test_evaluate_accepts_plain_policy():
    env = integrator_env()
    frame = evaluate_rl(lambda obs: np.zeros(1), env, n_starts=2, horizon=3, tail=10, seed=0)
    assert frame['tail_reward'].notna().all()
    assert list(frame['rollout']) == [0, 1]


def test_replay_sampling_is_uniform(rng):
    env = integrator_env()
    buffer = ReplayBuffer(100, env.state_dim, env.goal_dim, env.action_dim)
    for i in range(100):
        obs = env.observe([i / 100.0, 0.0], [0.0])
        buffer.add(Transition(obs, np.zeros(1), 0.0, obs, False, 0))
    counts = np.zeros(100)
    for _ in range(50):
        drawn = np.rint(buffer.sample(2000, rng).states[:, 0] * 100).astype(int)
        counts += np.bincount(drawn, minlength=100)
    assert counts.sum() == 100000
    assert counts.min() > 850 and counts.max() < 1150
    assert np.sum((counts - 1000.0) ** 2 / 1000.0) < 160.0


def test_update_step_without_learning_keeps_every_parameter(rng):
    env = integrator_env(disturbances=(-0.1, 0.1))
    config = TrainConfig(actor_lr=0.0, critic_lr=0.0, tau=0.0, target_mode='full-branch', **SMALL)
    ac = init_actor_critic(env, config)
    new, loss, _ = update_step(ac, random_batch(env, rng), env, config)
    assert np.isfinite(loss)
    for before, after in ((ac.actor, new.actor), (ac.critic, new.critic),
                          (ac.actor_target, new.actor_target), (ac.critic_target, new.critic_target)):
        for x, y in zip(before.arrays(), after.arrays()):
            np.testing.assert_array_equal(x, y)


def test_single_scenario_training_is_the_same_in_both_target_modes():
    env = integrator_env()
    sampled, m1 = train(env, TrainConfig(total_steps=80, target_mode='sampled', **SMALL))
    branched, m2 = train(env, TrainConfig(total_steps=80, target_mode='full-branch', **SMALL))
    for x, y in zip(sampled.actor.arrays() + sampled.critic.arrays(),
                    branched.actor.arrays() + branched.critic.arrays()):
        np.testing.assert_allclose(x, y, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(m1['critic_loss'].to_numpy(), m2['critic_loss'].to_numpy(), rtol=1e-9)
    assert list(m1['return']) == pytest.approx(list(m2['return']), rel=1e-9)


class PositiveBranchDiverges:
    """Scalar integrator whose positive-disturbance scenario blows up from positive states."""

    state_dim = 1
    action_dim = 1

    def step(self, x, u, psi):
        d = np.asarray(psi.get('disturbance'), dtype=np.float64)
        if np.any((d > 0) & (np.asarray(x)[..., 0] > 0)):
            raise IntegrationError("state left the finite range")
        return x + u + d[..., None]


def branching_scalar_env():
    env = make_linear_env(LinearSystem(A=[[1.0]], B=[[1.0]]), state_box=BoxConstraint([-1.0], [1.0]),
                          action_box=BoxConstraint([-0.5], [0.5]), goal_box=BoxConstraint([-0.5], [0.5]),
                          disturbances=(0.0, 0.1), sigma2=0.05, episode_length=5)
    return replace(env, model=PositiveBranchDiverges())


def scalar_batch(env, states):
    transitions = []
    for x in states:
        obs = env.observe([x], [0.0])
        nxt = env.observe([x], [0.0], t=1)
        transitions.append(Transition(obs, np.zeros(1), 0.5, nxt, False, 0))
    return Batch.from_transitions(transitions)


def test_full_branch_drops_rows_with_a_diverging_branch(caplog):
    env = branching_scalar_env()
    config = TrainConfig(target_mode='full-branch', **SMALL)
    ac = init_actor_critic(env, config)
    batch = scalar_batch(env, [-0.5, 0.5, -0.2])
    targets = critic_targets(batch, ac, env, 'full-branch')
    assert np.isfinite(targets[[0, 2]]).all() and np.isnan(targets[1])

    new, loss, objective = update_step(ac, batch, env, config)
    assert np.isfinite(loss) and np.isfinite(objective)
    assert new.critic_opt.step == 1
    assert 'Dropping 1 of 3 transitions' in caplog.text

    stuck, loss, _ = update_step(ac, scalar_batch(env, [0.3, 0.4]), env, config)
    assert np.isnan(loss) and stuck is ac


def test_evaluate_rl_with_a_perfect_controller():
    env = make_linear_env(LinearSystem(A=[[1.0]], B=[[1.0]]), state_box=BoxConstraint([-5.0], [5.0]),
                          action_box=BoxConstraint([-5.0], [5.0]), goal_box=BoxConstraint([0.5], [1.0]),
                          init_box=BoxConstraint([-1.0], [1.0]), sigma2=0.01)
    frame = evaluate_rl(lambda obs: obs.desired_goal - obs.state, env, n_starts=20, horizon=10, tail=5, seed=4)
    np.testing.assert_allclose(frame['tail_reward'], 1.0, atol=1e-12)
    np.testing.assert_allclose(frame['tail_pct_error'], 0.0, atol=1e-10)
