import numpy as np
import pytest

from conftest import central_difference, relative_error
from src import numgrad as ng
from src.dynamics import (CSTR, CstrModel, LinearModel, LinearSystem, ScenarioParam, SimConfig, cstr_derivative,
                          cstr_rates, cstr_scenario, double_integrator, linear_step, rk4_step, stack_scenarios)
from src.errors import ConfigurationError, IntegrationError, ShapeError

STEADY_STATE = np.array([0.8, 0.5, 134.14, 130.0])
ACTION = np.array([18.83, -4495.7])


def reference_derivative(x, u, alpha, beta):
    """Reactor right-hand side written out term by term for one state."""
    c_a, c_b, t_r, t_k = x
    flow, q_dot = u
    t_abs = t_r + 273.15
    k1 = beta * 1.287e12 * np.exp(-9758.3 / t_abs)
    k2 = 1.287e12 * np.exp(-9758.3 / t_abs)
    k3 = 9.043e9 * np.exp(-alpha * 8560.0 / t_abs)
    rho_cp = 0.9342 * 3.01
    return np.array([
        flow * (5.1 - c_a) - k1 * c_a - k3 * c_a ** 2,
        -flow * c_b + k1 * c_a - k2 * c_b,
        (k1 * c_a * 4.2 + k2 * c_b * -11.0 + k3 * c_a ** 2 * -41.85) / -rho_cp
        + flow * (130.0 - t_r) + 4032.0 * 0.215 * (t_k - t_r) / (rho_cp * 10.01),
        (q_dot + 4032.0 * 0.215 * (t_r - t_k)) / (5.0 * 2.0),
    ])


@pytest.mark.parametrize('alpha,beta', [(1.0, 1.0), (0.95, 1.1), (1.05, 0.9)])
def test_cstr_derivative_matches_reference(alpha, beta):
    got = cstr_derivative(STEADY_STATE, ACTION, cstr_scenario(alpha, beta))
    np.testing.assert_allclose(got, reference_derivative(STEADY_STATE, ACTION, alpha, beta), rtol=1e-10)


def test_scenario_defaults_and_validation():
    psi = ScenarioParam(disturbance=0.3)
    assert psi.alpha == 1.0 and psi.beta == 1.0
    assert psi.get('other') == 0.0
    with pytest.raises(ConfigurationError):
        cstr_scenario(0.0, 1.0)
    with pytest.raises(ConfigurationError):
        cstr_scenario(1.0, float('nan'))


def test_stacked_scenarios_give_per_branch_derivatives():
    scenarios = [cstr_scenario(0.95, 0.9), cstr_scenario(1.05, 1.1)]
    batch = cstr_derivative(np.tile(STEADY_STATE, (2, 1)), np.tile(ACTION, (2, 1)), stack_scenarios(scenarios))
    for row, psi in zip(batch, scenarios):
        np.testing.assert_allclose(row, cstr_derivative(STEADY_STATE, ACTION, psi), rtol=1e-10)


def test_rk4_is_exact_for_linear_ode():
    # x' = -x has the exact sample map exp(-dt); RK4 error per step is O(dt^5)
    sim = SimConfig(dt=0.1, substeps=10)
    x = rk4_step(lambda x, u, psi: -x, np.array([1.0]), np.zeros(1), ScenarioParam(), sim)
    np.testing.assert_allclose(x, [np.exp(-0.1)], rtol=1e-10)


def test_rk4_flags_blow_up():
    sim = SimConfig(dt=1.0, substeps=1)
    with pytest.raises(IntegrationError):
        rk4_step(lambda x, u, psi: np.exp(x), np.array([800.0]), np.zeros(1), ScenarioParam(), sim)


def test_sim_config_validation():
    with pytest.raises(ConfigurationError):
        SimConfig(dt=0.0)
    with pytest.raises(ConfigurationError):
        SimConfig(substeps=0)


def test_cstr_step_stays_finite_inside_box():
    model = CstrModel()
    x = model.step(STEADY_STATE, ACTION, cstr_scenario())
    assert np.all(np.isfinite(x))
    assert x.shape == (4,)


def test_cstr_step_is_differentiable():
    model = CstrModel()
    psi = cstr_scenario(1.02, 0.97)

    def f(u):
        return ng.total(model.step(STEADY_STATE, u, psi)[..., 1])

    _, grad = ng.value_and_grad(f, ACTION)
    fd = central_difference(lambda u: float(f(u)), ACTION, eps=1e-4)
    assert relative_error(grad, fd) <= 1e-4


def test_linear_step_and_shapes():
    system = LinearSystem(A=[[1.0, 0.1], [0.0, 1.0]], B=[0.0, 0.1])
    np.testing.assert_allclose(linear_step(system, np.array([1.0, 2.0]), np.array([3.0])), [1.2, 2.3])
    with pytest.raises(ShapeError):
        linear_step(system, np.ones(3), np.ones(1))
    with pytest.raises(ShapeError):
        LinearSystem(A=np.eye(2), B=np.ones((3, 1)))


def test_double_integrator_shapes():
    system = double_integrator(0.2)
    assert system.state_dim == 2 and system.action_dim == 1
    np.testing.assert_allclose(system.B.ravel(), [0.02, 0.2])


def test_linear_model_adds_scenario_disturbance():
    model = LinearModel(LinearSystem(A=[[1.0]], B=[[1.0]]))
    psi = stack_scenarios([ScenarioParam(disturbance=0.5), ScenarioParam(disturbance=-0.5)])
    x = model.step(np.zeros((2, 1)), np.ones((2, 1)), psi)
    np.testing.assert_allclose(x, [[1.5], [0.5]])
    assert CSTR.volume == pytest.approx(10.01)


def taylor_map(M, h, degree):
    term, total = np.eye(len(M)), np.eye(len(M))
    for k in range(1, degree + 1):
        term = term @ (h * M) / k
        total = total + term
    return total


def test_rk4_step_is_the_degree_four_taylor_map(rng):
    M = rng.normal(size=(2, 2))
    x0 = rng.normal(size=2)
    sim = SimConfig(dt=0.3, substeps=3)
    x = rk4_step(lambda x, u, psi: x @ M.T, x0, np.zeros(1), ScenarioParam(), sim)
    expected = np.linalg.matrix_power(taylor_map(M, 0.1, 4), 3) @ x0
    np.testing.assert_allclose(x, expected, rtol=1e-12, atol=1e-14)


def test_rk4_error_shrinks_sixteenfold_when_halving_the_step(rng):
    M = rng.normal(size=(2, 2))
    x0 = rng.normal(size=2)
    exact = taylor_map(M, 0.5, 40) @ x0

    def error(substeps):
        sim = SimConfig(dt=0.5, substeps=substeps)
        return np.linalg.norm(rk4_step(lambda x, u, psi: x @ M.T, x0, np.zeros(1), ScenarioParam(), sim) - exact)

    assert error(16) / error(32) == pytest.approx(16.0, rel=0.1)


def test_cstr_rate_properties():
    temps = np.linspace(60.0, 140.0, 9)
    k1, k2, k3 = cstr_rates(temps, ScenarioParam(alpha=1.0, beta=0.0))
    np.testing.assert_array_equal(k1, 0.0)
    k1, k2, k3 = cstr_rates(temps, cstr_scenario(1.05, 0.9))
    # both reactions share pre-exponential factor and activation energy
    np.testing.assert_allclose(k2 / k1, 1.0 / 0.9, rtol=1e-12)
    for k in (k1, k2, k3):
        assert np.all(np.diff(k) > 0)
