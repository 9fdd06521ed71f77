# src/mpc.py
"""Scenario-based receding-horizon control by single shooting.

Plans share one first action across all scenarios and carry one action tail
per scenario. Soft state constraints enter as an L1 hinge penalty, so the
solver optimizes actions only; actions are kept inside their box by projection.
"""
import logging
from dataclasses import dataclass, replace
from typing import List, NamedTuple, Optional, Union

import numpy as np

from config.settings import Config
from src import numgrad as ng
from src.dynamics import LinearModel, ScenarioParam
from src.envs import BoxConstraint, GoalEnv, GoalObservation, ScenarioSet, Trajectory, rollout
from src.errors import ConfigurationError, IntegrationError, ShapeError, SolverError
from src.lqr import LqrProblem, LqrSolution, lqr_policy
from src.rl import ActorCritic, actor_apply, critic_apply

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class QuadraticStage:
    """(x - x_ref)' M (x - x_ref) + u' R u, x_ref = goal on the goal coordinates."""

    M: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'M', np.atleast_2d(np.asarray(self.M, dtype=np.float64)))
        object.__setattr__(self, 'R', np.atleast_2d(np.asarray(self.R, dtype=np.float64)))


@dataclass(frozen=True)
class GaussianGoalStage:
    """Negative Gaussian goal proximity."""

    sigma2: float = Config.MPC_REWARD_VARIANCE

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ConfigurationError(f"Stage variance must be positive, got {self.sigma2}")


@dataclass(frozen=True, eq=False)
class QuadraticTerminal:
    P: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'P', np.atleast_2d(np.asarray(self.P, dtype=np.float64)))


@dataclass(frozen=True, eq=False)
class CriticTerminal:
    """Terminal reward V(x) = Q(x, mu(x, g), g) of a trained agent."""

    ac: ActorCritic


Stage = Union[QuadraticStage, GaussianGoalStage]
Terminal = Union[None, QuadraticTerminal, CriticTerminal]


@dataclass(frozen=True, eq=False)
class MpcProblem:
    model: object
    horizon: int
    scenarios: ScenarioSet
    stage: Stage
    action_box: BoxConstraint
    state_box: BoxConstraint
    goal_indices: tuple = (0,)
    terminal: Terminal = None
    terminal_box: Optional[BoxConstraint] = None
    control_horizon: Optional[int] = None
    feedback_gain: Optional[np.ndarray] = None
    penalty_weight: float = Config.MPC_PENALTY_WEIGHT
    discount: float = 1.0
    iterations: int = Config.MPC_ITERATIONS
    restarts: int = Config.MPC_RESTARTS
    step_size: float = Config.MPC_STEP_SIZE
    step_decay: float = Config.MPC_STEP_DECAY

    def __post_init__(self):
        object.__setattr__(self, 'goal_indices', tuple(int(i) for i in self.goal_indices))
        if self.terminal_box is None:
            object.__setattr__(self, 'terminal_box', self.state_box)
        if self.control_horizon is None:
            object.__setattr__(self, 'control_horizon', self.horizon)
        if self.horizon < 0 or not 0 <= self.control_horizon <= self.horizon:
            raise ConfigurationError(f"Need 0 <= control horizon ({self.control_horizon}) "
                                     f"<= horizon ({self.horizon})")
        if len(self.scenarios) < 1:
            raise ConfigurationError("MPC needs at least one scenario")
        if self.control_horizon < self.horizon and self.feedback_gain is None:
            raise ConfigurationError("A control horizon shorter than the horizon needs a feedback gain")
        if self.feedback_gain is not None:
            gain = np.atleast_2d(np.asarray(self.feedback_gain, dtype=np.float64))
            if gain.shape != (self.action_dim, self.state_dim):
                raise ShapeError(f"Feedback gain {gain.shape} does not map state to action")
            object.__setattr__(self, 'feedback_gain', gain)
        if self.action_box.dim != self.action_dim or self.state_box.dim != self.state_dim \
                or self.terminal_box.dim != self.state_dim:
            raise ConfigurationError("Constraint boxes do not match the model dimensions")
        if isinstance(self.terminal, CriticTerminal):
            ac = self.terminal.ac
            if ac.state_dim != self.state_dim or ac.action_dim != self.action_dim \
                    or tuple(ac.scaling.goal_indices) != self.goal_indices:
                raise ConfigurationError("Critic checkpoint does not match the MPC problem dimensions")
        if self.iterations < 0 or self.restarts < 0 or self.penalty_weight < 0:
            raise ConfigurationError("iterations, restarts and penalty weight must be non-negative")
        if not 0 < self.discount <= 1:
            raise ConfigurationError(f"MPC discount must lie in (0, 1], got {self.discount}")

    @property
    def state_dim(self) -> int:
        return self.model.state_dim

    @property
    def action_dim(self) -> int:
        return self.model.action_dim

    @property
    def n_scenarios(self) -> int:
        return len(self.scenarios)

    @property
    def tail_length(self) -> int:
        return max(self.control_horizon - 1, 0)

    @classmethod
    def for_env(cls, env: GoalEnv, horizon: int, stage: Stage, scenarios: Optional[ScenarioSet] = None,
                **kwargs) -> 'MpcProblem':
        """Problem sharing the environment's model and constraint boxes."""
        return cls(model=env.model, horizon=horizon, scenarios=scenarios or env.scenarios, stage=stage,
                   action_box=env.action_box, state_box=env.state_box, goal_indices=env.goal_indices, **kwargs)


@dataclass(frozen=True, eq=False)
class ActionPlan:
    """Shared first action (m,) and per-scenario tails (N_s, N_c - 1, m)."""

    first: np.ndarray
    tails: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'first', np.asarray(self.first, dtype=np.float64))
        object.__setattr__(self, 'tails', np.asarray(self.tails, dtype=np.float64))
        if self.tails.ndim != 3 or self.first.shape != self.tails.shape[2:]:
            raise ShapeError(f"Plan tails {self.tails.shape} do not match first action {self.first.shape}")

    @classmethod
    def constant(cls, prob: MpcProblem, action) -> 'ActionPlan':
        action = np.asarray(action, dtype=np.float64)
        return cls(action, np.broadcast_to(action, (prob.n_scenarios, prob.tail_length, prob.action_dim)).copy())

    def check(self, prob: MpcProblem):
        expected = (prob.n_scenarios, prob.tail_length, prob.action_dim)
        if self.first.shape != (prob.action_dim,) or self.tails.shape != expected:
            raise ShapeError(f"Plan shapes {self.first.shape}/{self.tails.shape} do not fit problem {expected}")

    def shifted(self) -> 'ActionPlan':
        """Drop the applied action, repeat the last one; the new first action averages the scenarios."""
        if self.tails.shape[1] == 0:
            return self
        first = np.mean(self.tails[:, 0, :], axis=0)
        tails = np.concatenate([self.tails[:, 1:, :], self.tails[:, -1:, :]], axis=1)
        return ActionPlan(first, tails)


def _reference(prob: MpcProblem, goal) -> np.ndarray:
    ref = np.zeros(prob.state_dim)
    ref[list(prob.goal_indices)] = np.asarray(goal, dtype=np.float64)
    return ref


def _quad_form(d, W: np.ndarray):
    return ng.total(ng.linear(d, W) * d, axis=-1)


def _goal_of(prob: MpcProblem, x):
    return ng.stack([x[..., i] for i in prob.goal_indices], axis=-1)


def _stage_cost(prob: MpcProblem, x, u, goal, ref):
    if isinstance(prob.stage, QuadraticStage):
        return _quad_form(x - ref, prob.stage.M) + _quad_form(u, prob.stage.R)
    error = ng.total(ng.square(goal - _goal_of(prob, x)), axis=-1)
    return -ng.exp(error * (-0.5 / prob.stage.sigma2))


def _terminal_cost(prob: MpcProblem, x, goal, ref):
    if isinstance(prob.terminal, QuadraticTerminal):
        return _quad_form(x - ref, prob.terminal.P)
    if isinstance(prob.terminal, CriticTerminal):
        return -critic_terminal(prob.terminal.ac, x, goal)
    return None


def _penalty(prob: MpcProblem, x, box: BoxConstraint):
    return ng.total(box.violation(x), axis=-1) * prob.penalty_weight


def _rollout_costs(prob: MpcProblem, first, tails, x0, goal):
    """Per-scenario discounted cost; ``first``/``tails`` may be Tensors."""
    n_s, m = prob.n_scenarios, prob.action_dim
    psi = prob.scenarios.stacked
    goal = np.atleast_1d(np.asarray(goal, dtype=np.float64))
    ref = _reference(prob, goal)
    x = np.broadcast_to(np.asarray(x0, dtype=np.float64), (n_s, prob.state_dim))
    total = np.zeros(n_s)
    weight = 1.0
    for t in range(prob.horizon):
        if t == 0:
            u = ng.broadcast_to(first, (n_s, m))
        elif t < prob.control_horizon:
            u = tails[:, t - 1, :]
        else:
            u = ng.linear(x, -prob.feedback_gain)
        u = prob.action_box.project(u)
        total = total + (_stage_cost(prob, x, u, goal, ref) + _penalty(prob, x, prob.state_box)) * weight
        x = prob.model.step(x, u, psi)
        weight *= prob.discount
    terminal = _terminal_cost(prob, x, goal, ref)
    if terminal is not None:
        total = total + terminal * weight
    return total + _penalty(prob, x, prob.terminal_box) * weight


def scenario_costs(prob: MpcProblem, plan: ActionPlan, x0, goal) -> np.ndarray:
    """Cost of ``plan`` under each scenario of the problem (+inf where the rollout fails)."""
    plan.check(prob)
    try:
        costs = np.asarray(_rollout_costs(prob, plan.first, plan.tails, x0, goal), dtype=np.float64)
    except IntegrationError:
        return np.full(prob.n_scenarios, np.inf)
    return np.where(np.isfinite(costs), costs, np.inf)


def plan_cost(prob: MpcProblem, plan: ActionPlan, x0, goal) -> float:
    """Scenario-averaged plan cost; +inf marks an infeasible (non-finite) rollout."""
    costs = scenario_costs(prob, plan, x0, goal)
    if not np.all(np.isfinite(costs)):
        return float('inf')
    return float(np.mean(costs))


def critic_terminal(ac: ActorCritic, x, goal):
    """V(x, g) = Q(x, mu(x, g), g) with the online networks; differentiable in x."""
    if np.shape(ng.value_of(x))[-1:] != (ac.state_dim,):
        raise ConfigurationError(f"Critic expects states of dimension {ac.state_dim}, "
                                 f"got shape {np.shape(ng.value_of(x))}")
    goal = np.asarray(goal, dtype=np.float64)
    return critic_apply(ac, x, actor_apply(ac, x, goal), goal)


class SolveResult(NamedTuple):
    plan: ActionPlan
    action: np.ndarray
    cost: float
    start_costs: List[float]


class _ZSpace:
    """Affine map between actions and normalized decision variables."""

    def __init__(self, box: BoxConstraint):
        self.center = box.center
        self.scale = box.half_width
        self.lower = np.where(box.bounded, -1.0, -np.inf)
        self.upper = np.where(box.bounded, 1.0, np.inf)

    def to_action(self, z):
        return self.center + z * self.scale

    def from_action(self, u) -> np.ndarray:
        return self.project((np.asarray(u, dtype=np.float64) - self.center) / self.scale)

    def project(self, z) -> np.ndarray:
        return np.clip(z, self.lower, self.upper)


def _optimize_start(prob: MpcProblem, zs: _ZSpace, z_first: np.ndarray, z_tails: np.ndarray, x0, goal):
    """Projected Adam from one start; returns (best cost, best z_first, best z_tails)."""

    def objective(z):
        first, tails = zs.to_action(z[0]), zs.to_action(z[1])
        return ng.mean(_rollout_costs(prob, first, tails, x0, goal))

    def evaluate(z_f, z_t) -> float:
        try:
            value = float(np.mean(_rollout_costs(prob, zs.to_action(z_f), zs.to_action(z_t), x0, goal)))
        except IntegrationError:
            return float('inf')
        return value if np.isfinite(value) else float('inf')

    z_first, z_tails = zs.project(z_first), zs.project(z_tails)
    best = (evaluate(z_first, z_tails), z_first, z_tails)
    if not np.isfinite(best[0]):
        return best
    state = ng.adam_init([z_first, z_tails], lr=prob.step_size)
    iterations = int(prob.iterations)
    for k in range(iterations):
        lr = prob.step_size * prob.step_decay ** (k / max(iterations - 1, 1))
        try:
            value, grads = ng.value_and_grad(objective, [z_first, z_tails])
        except IntegrationError:
            value = float('inf')
        if not np.isfinite(value):
            # back off halfway toward the best iterate
            z_first = 0.5 * (z_first + best[1])
            z_tails = 0.5 * (z_tails + best[2])
            continue
        if value < best[0]:
            best = (value, z_first, z_tails)
        (z_first, z_tails), state = ng.adam_step([z_first, z_tails], grads, replace(state, lr=lr))
        z_first, z_tails = zs.project(z_first), zs.project(z_tails)
    final = evaluate(z_first, z_tails)
    if final < best[0]:
        best = (final, z_first, z_tails)
    return best


def _feedback_plan(prob: MpcProblem, x0) -> ActionPlan:
    first = np.asarray(prob.action_box.project(-prob.feedback_gain @ np.asarray(x0, dtype=np.float64)))
    return ActionPlan(first, np.zeros((prob.n_scenarios, 0, prob.action_dim)))


def solve(prob: MpcProblem, x0, goal, warm_start: Optional[ActionPlan] = None,
          rng: Optional[np.random.Generator] = None) -> SolveResult:
    """Multi-start projected-Adam single shooting; the best final cost wins."""
    rng = rng if rng is not None else np.random.default_rng(Config.SEED)
    if warm_start is None:
        warm_start = ActionPlan.constant(prob, prob.action_box.center)
    warm_start.check(prob)

    if prob.horizon == 0:
        cost = plan_cost(prob, warm_start, x0, goal)
        return SolveResult(warm_start, warm_start.first.copy(), cost, [cost])
    if prob.control_horizon == 0:
        plan = _feedback_plan(prob, x0)
        cost = plan_cost(prob, plan, x0, goal)
        return SolveResult(plan, plan.first.copy(), cost, [cost])

    zs = _ZSpace(prob.action_box)
    starts = [(zs.from_action(warm_start.first), zs.from_action(warm_start.tails))]
    for _ in range(int(prob.restarts)):
        starts.append((rng.uniform(-1.0, 1.0, size=prob.action_dim),
                       rng.uniform(-1.0, 1.0, size=(prob.n_scenarios, prob.tail_length, prob.action_dim))))

    start_costs: List[float] = []
    best = None
    for z_first, z_tails in starts:
        result = _optimize_start(prob, zs, z_first, z_tails, x0, goal)
        start_costs.append(result[0])
        if np.isfinite(result[0]) and (best is None or result[0] < best[0]):
            best = result
    if best is None:
        raise SolverError(f"All {len(starts)} starts produced non-finite rollouts")

    plan = ActionPlan(np.asarray(zs.to_action(best[1])), np.asarray(zs.to_action(best[2])))
    return SolveResult(plan, np.asarray(prob.action_box.project(plan.first)), best[0], start_costs)


class RecedingHorizonController:
    """Re-solves at every state, applies the first action and shifts the plan."""

    def __init__(self, prob: MpcProblem, rng: Optional[np.random.Generator] = None):
        self.prob = prob
        self.rng = rng if rng is not None else np.random.default_rng(Config.SEED)
        self.logger = logging.getLogger(__name__)
        self.plan: Optional[ActionPlan] = None
        self.last_action = np.asarray(prob.action_box.center, dtype=np.float64)
        self.failures = 0
        self.last_result: Optional[SolveResult] = None

    def reset(self):
        self.plan = None
        self.last_action = np.asarray(self.prob.action_box.center, dtype=np.float64)
        self.failures = 0

    def act(self, state, goal) -> np.ndarray:
        try:
            result = solve(self.prob, state, goal, self.plan, self.rng)
        except SolverError as e:
            self.failures += 1
            self.logger.warning(f"MPC solve failed ({e}); holding previous action")
            return self.last_action
        self.last_result = result
        self.plan = result.plan.shifted() if self.prob.control_horizon > 0 else None
        self.last_action = result.action
        return result.action

    def __call__(self, obs: GoalObservation) -> np.ndarray:
        return self.act(obs.state, obs.desired_goal)


def receding_horizon_run(prob: MpcProblem, plant: GoalEnv, obs: GoalObservation, horizon: int,
                         rng: Optional[np.random.Generator] = None, scenario_index: Optional[int] = None,
                         metric_sigma2: float = Config.METRIC_VARIANCE):
    """Closed loop on ``plant`` for ``horizon`` steps; returns (trajectory, metrics)."""
    rng = rng if rng is not None else np.random.default_rng(Config.SEED)
    controller = RecedingHorizonController(prob, rng)
    plant = replace(plant, episode_length=max(int(horizon), 1))
    trajectory = rollout(plant, controller, obs, horizon, rng, scenario_index=scenario_index)
    trajectory.solver_failures = controller.failures
    if controller.failures:
        logger.info(f"Receding-horizon run finished with {controller.failures} solver failures")
    return trajectory, trajectory.metrics(plant, metric_sigma2)


def nominal_linear_mpc(prob: MpcProblem, solution, rng: Optional[np.random.Generator] = None
                       ) -> RecedingHorizonController:
    """Receding-horizon policy whose tail beyond the control horizon follows u = -Kx."""
    if not isinstance(prob.stage, QuadraticStage):
        raise ConfigurationError("Nominal linear MPC needs a quadratic stage cost")
    prob = replace(prob, feedback_gain=solution.K)
    return RecedingHorizonController(prob, rng)


def lqr_mpc_problem(lqr: LqrProblem, solution: LqrSolution, horizon: int, **kwargs) -> MpcProblem:
    """Unconstrained single-scenario MPC with the Riccati value as terminal cost."""
    model = LinearModel(lqr.system)
    return MpcProblem(model=model, horizon=horizon, scenarios=ScenarioSet([ScenarioParam(disturbance=0.0)]),
                      stage=QuadraticStage(lqr.M, lqr.R),
                      action_box=BoxConstraint.unbounded(model.action_dim),
                      state_box=BoxConstraint.unbounded(model.state_dim),
                      goal_indices=(0,), terminal=QuadraticTerminal(solution.P), discount=lqr.gamma, **kwargs)


def lqr_equivalence_errors(lqr: LqrProblem, solution: LqrSolution, states, horizon: int = 3,
                           iterations: int = 2000, step_size: float = 0.05, step_decay: float = 1e-3,
                           seed: int = Config.SEED) -> np.ndarray:
    """Relative gap |u_mpc - (-Kx)| / |Kx| between the first MPC action and the LQR action at each state."""
    prob = lqr_mpc_problem(lqr, solution, horizon, iterations=iterations, restarts=0,
                           step_size=step_size, step_decay=step_decay)
    rng = np.random.default_rng(seed)
    errors = []
    for x in np.atleast_2d(np.asarray(states, dtype=np.float64)):
        reference = lqr_policy(solution, x)
        action = solve(prob, x, np.zeros(1), rng=rng).action
        scale = max(np.linalg.norm(reference), 1e-12)
        errors.append(np.linalg.norm(action - reference) / scale)
    return np.array(errors)
