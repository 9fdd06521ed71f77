# src/cli.py
"""Command-line runner: train, eval-rl, compare, profile and lqr-demo."""
import argparse
import logging
import math
import os
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config.experiment import ExperimentConfig
from config.settings import Config
from src.checkpoint import load_actor_critic, save_actor_critic
from src.dynamics import LinearSystem, ScenarioParam, SimConfig, double_integrator
from src.envs import BoxConstraint, GoalEnv, ScenarioSet, cstr_scenario_set, make_cstr_env, make_linear_env
from src.errors import ConfigurationError, HindsightError, SolverError, exit_code_for
from src.logger import MetricsLogger, write_frame
from src.lqr import LqrProblem, closed_loop_spectral_radius, solve_dare
from src.mpc import (CriticTerminal, GaussianGoalStage, MpcProblem, QuadraticStage, RecedingHorizonController,
                     lqr_equivalence_errors)
from src.rl import METRIC_COLUMNS, ActorCritic, TrainConfig, evaluate_rl, init_actor_critic, train
from src.tabular import random_branching_mdp, robust_value_iteration, run_tabular_q
from utils.analytics import ExperimentAnalytics
from utils.comparison import AgentComparison

logger = logging.getLogger(__name__)

COMMANDS = ('train', 'eval-rl', 'compare', 'profile', 'lqr-demo')
EVAL_MODES = ('nominal', 'robust')

EPILOG = """\
output files (written under --out, CSVs carry a header row):
  checkpoint/          actor.rgvf, critic.rgvf, manifest.json        (train)
  train_metrics.csv    step, episode, return, critic_loss, actor_objective, buffer_size
  tabular.csv          state, action, q_learned, q_oracle           (train, run.env = tabular)
  eval_rl.csv          agent, mode, rollout, scenario_index, goal, tail_reward, tail_pct_error
  compare.csv          agent, rollout, metric, value
                       metric: time_near_goal, time_outside_constraints,
                               action_total_variation, solver_failures
  profile.csv          agent, step, <state columns>, <action columns>, reward, scenario_index, goal
  summary.txt          text report of whatever CSVs exist

configuration: --config FILE with 'section.key = value' lines; HF_<SECTION>_<KEY>
environment variables (and HF_SEED, HF_OUT, HF_THREADS) override the file,
--set section.key=value and the global flags override both.

exit codes: 0 success, 2 configuration error, 3 runtime or solver failure
"""


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', metavar='PATH', default=argparse.SUPPRESS, help='experiment file')
    common.add_argument('--seed', type=int, default=argparse.SUPPRESS, help='master seed (run.seed)')
    common.add_argument('--out', metavar='DIR', default=argparse.SUPPRESS, help='output directory (run.out)')
    common.add_argument('--threads', type=int, default=argparse.SUPPRESS, help='rollout workers (run.threads)')
    common.add_argument('--set', metavar='SECTION.KEY=VALUE', action='append', default=argparse.SUPPRESS,
                        help='override one setting (repeatable)')
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    parser = argparse.ArgumentParser(prog='main.py', parents=[common], epilog=EPILOG,
                                     formatter_class=argparse.RawDescriptionHelpFormatter,
                                     description='Robust goal-conditioned RL and scenario MPC experiments.')
    sub = parser.add_subparsers(dest='command', metavar='COMMAND')
    sub.required = True

    sub.add_parser('train', parents=[common], help='train an actor-critic (or the tabular toy)')

    eval_rl = sub.add_parser('eval-rl', parents=[common], help='evaluate trained actors')
    eval_rl.add_argument('--checkpoint', action='append', metavar='DIR', help='checkpoint directory (repeatable)')
    eval_rl.add_argument('--include-untrained', action='store_true',
                         help='also evaluate freshly initialized networks')

    for name, text in (('compare', 'paired multi-agent comparison'), ('profile', 'one trace per agent')):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument('--checkpoint', metavar='DIR', help='checkpoint directory for the RL agents')

    sub.add_parser('lqr-demo', parents=[common], help='Riccati solution and the MPC/LQR consistency check')
    return parser


def load_config(args: argparse.Namespace, environ=None) -> ExperimentConfig:
    overrides = list(getattr(args, 'set', None) or [])
    for flag, key in (('seed', 'run.seed'), ('out', 'run.out'), ('threads', 'run.threads')):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    return ExperimentConfig.load(getattr(args, 'config', None), environ=environ, overrides=overrides)


# Builders


def _split(text: str) -> List[str]:
    return [item.strip() for item in text.split(',') if item.strip()]


def _box(lower: Sequence[float], upper: Sequence[float]) -> Optional[BoxConstraint]:
    if not lower and not upper:
        return None
    return BoxConstraint(lower, upper)


def _matrix_system(a: Sequence[float], b: Sequence[float], dt: float) -> LinearSystem:
    """Row-major flat A (n*n values) and B (n*m values); empty A selects the double integrator."""
    if not a:
        return double_integrator(dt)
    n = int(round(math.sqrt(len(a))))
    if n * n != len(a) or not b or len(b) % n:
        raise ConfigurationError(f"Cannot shape {len(a)} A values and {len(b)} B values into a system")
    return LinearSystem(np.reshape(a, (n, n)), np.reshape(b, (n, -1)))


def build_env(config: ExperimentConfig) -> GoalEnv:
    kind = config.get('run', 'env')
    section = config.section('env')
    common = dict(sigma2=section['sigma2'], episode_length=section['episode_length'],
                  reward_kind=section['reward_kind'], threshold=section['threshold'],
                  time_limit_terminal=section['time_limit_terminal'],
                  init_box=_box(section['init_lower'], section['init_upper']))
    if kind == 'cstr':
        return make_cstr_env(scenarios=section['scenarios'],
                             sim=SimConfig(section['sample_time'], section['substeps']), **common)
    if kind == 'linear':
        lin = config.section('linear')
        return make_linear_env(_matrix_system(lin['a'], lin['b'], lin['dt']),
                               state_box=BoxConstraint(lin['state_lower'], lin['state_upper']),
                               action_box=BoxConstraint(lin['action_lower'], lin['action_upper']),
                               goal_box=BoxConstraint(lin['goal_lower'], lin['goal_upper']),
                               goal_indices=tuple(range(len(lin['goal_lower']))),
                               disturbances=lin['disturbances'], **common)
    raise ConfigurationError(f"run.env = {kind} has no continuous environment for this command")


def scenario_selection(config: ExperimentConfig, env: GoalEnv, name: str) -> ScenarioSet:
    """Named scenario set for the environment ('nominal', 'grid', 'extreme', 'evaluation')."""
    if config.get('run', 'env') == 'cstr':
        return cstr_scenario_set(name)
    if name == 'nominal':
        return ScenarioSet([ScenarioParam(disturbance=0.0)])
    return env.scenarios


def build_train_config(config: ExperimentConfig) -> TrainConfig:
    t = config.section('train')
    return TrainConfig(total_steps=t['total_steps'], batch_size=t['batch_size'],
                       buffer_capacity=t['buffer_capacity'], warmup_steps=t['warmup_steps'],
                       target_mode=t['target_mode'], her_enabled=t['her'], seed=config.seed,
                       hidden_sizes=tuple(int(h) for h in t['hidden_sizes']), gamma=t['gamma'], tau=t['tau'],
                       actor_lr=t['actor_lr'], critic_lr=t['critic_lr'], noise_fraction=t['noise_fraction'],
                       updates_per_step=t['updates_per_step'])


def _solver_options(config: ExperimentConfig) -> dict:
    m = config.section('mpc')
    return dict(iterations=m['iterations'], restarts=m['restarts'], step_size=m['step_size'],
                step_decay=m['step_decay'])


def baseline_mpc_problem(config: ExperimentConfig, env: GoalEnv, scenarios: Optional[ScenarioSet] = None
                         ) -> MpcProblem:
    """Quadratic tracking MPC; by default only the goal coordinates are weighted."""
    m = config.section('mpc')
    m_diag = m['baseline_m_diag'] or [1.0 if i in env.goal_indices else 0.0 for i in range(env.state_dim)]
    r_diag = m['baseline_r_diag'] or [0.0] * env.action_dim
    if len(m_diag) != env.state_dim or len(r_diag) != env.action_dim:
        raise ConfigurationError("mpc.baseline_m_diag / baseline_r_diag do not match the environment dimensions")
    return MpcProblem.for_env(env, horizon=m['baseline_horizon'], stage=QuadraticStage(np.diag(m_diag), np.diag(r_diag)),
                              scenarios=scenarios or scenario_selection(config, env, m['scenarios']),
                              penalty_weight=m['baseline_penalty_weight'], **_solver_options(config))


def unified_mpc_problem(config: ExperimentConfig, env: GoalEnv, ac: ActorCritic,
                        horizon: Optional[int] = None) -> MpcProblem:
    """Gaussian goal reward over the horizon plus the critic value at the end."""
    m = config.section('mpc')
    return MpcProblem.for_env(env, horizon=m['horizon'] if horizon is None else int(horizon),
                              stage=GaussianGoalStage(m['sigma2']),
                              scenarios=scenario_selection(config, env, m['scenarios']),
                              terminal=CriticTerminal(ac), penalty_weight=m['penalty_weight'],
                              **_solver_options(config))


def _controller_factory(prob: MpcProblem) -> Callable:
    return lambda rng: RecedingHorizonController(prob, rng)


def build_agents(config: ExperimentConfig, env: GoalEnv, load_agent: Callable[[], ActorCritic]) -> Dict:
    """Agent factories named in compare.agents, plus the rl_mpc horizon sweep."""
    names = _split(config.get('compare', 'agents'))
    horizons = [int(h) for h in config.get('compare', 'rl_mpc_horizons')]
    agents: Dict[str, Callable] = {}
    ac = load_agent() if any(n in ('rl', 'rl_mpc') for n in names) or horizons else None
    for name in names:
        if name == 'mpc':
            agents[name] = _controller_factory(baseline_mpc_problem(config, env))
        elif name == 'nominal_mpc':
            agents[name] = _controller_factory(
                baseline_mpc_problem(config, env, scenario_selection(config, env, 'nominal')))
        elif name == 'rl':
            agents[name] = lambda rng, agent=ac: agent.policy()
        elif name == 'rl_mpc':
            agents[name] = _controller_factory(unified_mpc_problem(config, env, ac))
        else:
            raise ConfigurationError(f"Unknown agent '{name}' (choose from mpc, nominal_mpc, rl, rl_mpc)")
    for horizon in horizons:
        agents[f"rl_mpc_n{horizon}"] = _controller_factory(unified_mpc_problem(config, env, ac, horizon))
    if not agents:
        raise ConfigurationError("compare.agents names no agent")
    return agents


def _checkpoint_dirs(config: ExperimentConfig, given) -> List[str]:
    if isinstance(given, str):
        given = [given]
    dirs = list(given or []) or _split(config.get('run', 'checkpoints')) or [os.path.join(config.out, 'checkpoint')]
    for directory in dirs:
        if not os.path.isdir(directory):
            raise ConfigurationError(f"Checkpoint directory not found: {directory}")
    return dirs


def _checkpoint_label(directory: str) -> str:
    path = os.path.normpath(directory)
    label = os.path.basename(path)
    if label == 'checkpoint' and os.path.basename(os.path.dirname(path)):
        label = os.path.basename(os.path.dirname(path))
    return label


def _labelled(dirs: Sequence[str]) -> List[Tuple[str, str]]:
    labels, seen = [], {}
    for directory in dirs:
        label = _checkpoint_label(directory)
        seen[label] = seen.get(label, 0) + 1
        labels.append((label if seen[label] == 1 else f"{label}_{seen[label]}", directory))
    return labels


# Commands


def cmd_train(config: ExperimentConfig, args: argparse.Namespace) -> int:
    if config.get('run', 'env') == 'tabular':
        return _train_tabular(config)
    env = build_env(config)
    train_config = build_train_config(config)
    metrics = MetricsLogger(os.path.join(config.out, 'train_metrics.csv'), METRIC_COLUMNS)
    ac, _ = train(env, train_config, on_episode=metrics)
    save_actor_critic(os.path.join(config.out, 'checkpoint'), ac, config.seed, config.digest(), env.name,
                      extra={'scenarios': config.get('env', 'scenarios'), 'target_mode': train_config.target_mode})
    ExperimentAnalytics(config.out).generate_report()
    return 0


def _train_tabular(config: ExperimentConfig) -> int:
    """Robust Q-learning on a random branching MDP, written next to its value-iteration fixed point."""
    t = config.section('train')
    mdp = random_branching_mdp(config.seed)
    table = run_tabular_q(mdp, t['gamma'], t['total_steps'], config.seed)
    oracle = robust_value_iteration(mdp, t['gamma'])
    learned = table.values()
    states, actions = np.meshgrid(np.arange(mdp.n_states), np.arange(mdp.n_actions), indexing='ij')
    frame = pd.DataFrame({'state': states.ravel(), 'action': actions.ravel(),
                          'q_learned': learned.ravel(), 'q_oracle': oracle.ravel()})
    write_frame(frame, os.path.join(config.out, 'tabular.csv'))
    logger.info(f"Tabular Q-learning: max |Q - Q*| = {np.max(np.abs(learned - oracle)):.3e} "
                f"after {t['total_steps']} samples")
    return 0


def cmd_eval_rl(config: ExperimentConfig, args: argparse.Namespace) -> int:
    env = build_env(config)
    ev = config.section('eval')
    modes = _split(ev['modes'])
    unknown = [m for m in modes if m not in EVAL_MODES]
    if unknown or not modes:
        raise ConfigurationError(f"eval.modes must list nominal and/or robust, got '{ev['modes']}'")

    agents: List[Tuple[str, ActorCritic]] = []
    for label, directory in _labelled(_checkpoint_dirs(config, getattr(args, 'checkpoint', None))):
        agents.append((label, load_actor_critic(directory, env)[0]))
    if getattr(args, 'include_untrained', False):
        agents.append(('untrained', init_actor_critic(env, build_train_config(config))))

    frames = []
    for label, ac in agents:
        for mode in modes:
            scenarios = scenario_selection(config, env, 'nominal' if mode == 'nominal' else ev['scenarios'])
            frame = evaluate_rl(ac, env, ev['n_starts'], ev['horizon'], ev['tail'], scenarios,
                                seed=config.seed, threads=config.threads)
            frame.insert(0, 'mode', mode)
            frame.insert(0, 'agent', label)
            frames.append(frame)
            logger.info(f"{label} / {mode}: median tail error {frame['tail_pct_error'].median():.3f}%")
    write_frame(pd.concat(frames, ignore_index=True), os.path.join(config.out, 'eval_rl.csv'))
    ExperimentAnalytics(config.out).generate_report()
    return 0


def _comparison(config: ExperimentConfig, args: argparse.Namespace, length: int) -> AgentComparison:
    env = build_env(config)

    def load_agent() -> ActorCritic:
        return load_actor_critic(_checkpoint_dirs(config, getattr(args, 'checkpoint', None))[0], env)[0]

    agents = build_agents(config, env, load_agent)
    return AgentComparison(env, agents, scenario_selection(config, env, config.get('compare', 'scenarios')),
                           length=length, seed=config.seed, threads=config.threads)


def cmd_compare(config: ExperimentConfig, args: argparse.Namespace) -> int:
    comparison = _comparison(config, args, config.get('compare', 'length'))
    frame = comparison.run_comparison(config.get('compare', 'rollouts'))
    write_frame(frame, os.path.join(config.out, 'compare.csv'))
    ExperimentAnalytics(config.out).generate_report()
    return 0


def cmd_profile(config: ExperimentConfig, args: argparse.Namespace) -> int:
    p = config.section('profile')
    comparison = _comparison(config, args, p['length'])
    env = comparison.env
    obs, scenario_index = comparison.draw_conditions(0)
    state, goal = obs.state, obs.desired_goal
    if p['start']:
        if len(p['start']) != env.state_dim:
            raise ConfigurationError(f"profile.start needs {env.state_dim} values, got {len(p['start'])}")
        state = np.array(p['start'])
    if math.isfinite(p['goal']):
        goal = np.array([p['goal']])
    if p['scenario_index'] >= 0:
        if p['scenario_index'] >= len(comparison.plant.scenarios):
            raise ConfigurationError(f"profile.scenario_index {p['scenario_index']} is out of range")
        scenario_index = p['scenario_index']
    frame = comparison.run_profile(env.observe(state, goal), scenario_index, p['length'])
    write_frame(frame, os.path.join(config.out, 'profile.csv'))
    return 0


def cmd_lqr_demo(config: ExperimentConfig, args: argparse.Namespace) -> int:
    section = config.section('lqr')
    if section['system'] not in ('double_integrator', 'custom'):
        raise ConfigurationError(f"lqr.system must be double_integrator or custom, got '{section['system']}'")
    if section['system'] == 'custom' and not section['a']:
        raise ConfigurationError("lqr.system = custom needs lqr.a and lqr.b")
    system = _matrix_system(section['a'], section['b'], section['dt'])
    n, m = system.state_dim, system.action_dim
    M = np.diag(section['m_diag']) if section['m_diag'] else np.eye(n)
    R = np.diag(section['r_diag']) if section['r_diag'] else np.eye(m)
    prob = LqrProblem.from_system(system, M, R, section['gamma'])
    solution = solve_dare(prob, section['tol'], section['max_iters'])

    print("=" * 50)
    print("LQR SOLUTION")
    print("=" * 50)
    print(f"P =\n{np.array2string(solution.P, precision=10)}")
    print(f"K =\n{np.array2string(solution.K, precision=10)}")
    print(f"Residual: {solution.residual:.3e} after {solution.iterations} iterations")
    print(f"Closed-loop spectral radius: {closed_loop_spectral_radius(prob, solution):.6f}")

    states = np.random.default_rng(config.seed).normal(size=(section['check_states'], n))
    errors = lqr_equivalence_errors(prob, solution, states, horizon=section['mpc_horizon'], seed=config.seed)
    worst = float(np.max(errors)) if len(errors) else 0.0
    passed = worst <= 1e-3
    print(f"MPC/LQR check: {len(errors)} states, horizon {section['mpc_horizon']}, "
          f"worst relative gap {worst:.3e} -> {'PASS' if passed else 'FAIL'}")
    print("=" * 50)
    if not passed:
        raise SolverError(f"Receding-horizon actions differ from -Kx by up to {worst:.3e}")
    return 0


HANDLERS = {
    'train': cmd_train,
    'eval-rl': cmd_eval_rl,
    'compare': cmd_compare,
    'profile': cmd_profile,
    'lqr-demo': cmd_lqr_demo,
}


def run(argv: Optional[Sequence[str]] = None, environ=None,
        setup_logging: Optional[Callable[[str, str], None]] = None) -> int:
    """Parse, configure and dispatch; returns the process exit code."""
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args, environ)
        if setup_logging is not None:
            setup_logging(config.out, args.command)
        logger.info(f"Running {args.command} (seed {config.seed}, config {config.source}, "
                    f"digest {config.digest()[:12]})")
        return HANDLERS[args.command](config, args)
    except HindsightError as e:
        logger.error(f"{args.command} failed: {e}")
        return exit_code_for(e)
