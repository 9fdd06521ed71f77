# src/dynamics.py
"""System models with explicit uncertainty parameters and a fixed-step RK4 integrator.

All functions accept numpy arrays or numgrad Tensors with an arbitrary number of
leading batch axes; scenario values may be scalars or arrays that broadcast
against the batch (see :func:`stack_scenarios`).
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Optional, Sequence, Tuple

import numpy as np

from config.settings import Config
from src import numgrad as ng
from src.errors import ConfigurationError, IntegrationError, ShapeError

logger = logging.getLogger(__name__)

# Parameters that default to 1 when absent (multipliers); everything else defaults to 0.
_UNIT_DEFAULTS = ('alpha', 'beta')


class ScenarioParam:
    """One realization of the uncertain model parameters."""

    __slots__ = ('_values',)

    def __init__(self, **values):
        self._values: Dict[str, object] = dict(values)

    def __getitem__(self, name: str):
        return self._values[name]

    def get(self, name: str, default=None):
        if default is None:
            default = 1.0 if name in _UNIT_DEFAULTS else 0.0
        return self._values.get(name, default)

    @property
    def alpha(self):
        return self.get('alpha')

    @property
    def beta(self):
        return self.get('beta')

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(sorted(self._values))

    def as_dict(self) -> Dict[str, float]:
        return {k: self._values[k] for k in self.names}

    def __eq__(self, other) -> bool:
        if not isinstance(other, ScenarioParam):
            return NotImplemented
        return self.names == other.names and all(
            np.array_equal(self._values[k], other._values[k]) for k in self.names)

    def __hash__(self) -> int:
        return hash(tuple((k, float(np.sum(self._values[k]))) for k in self.names))

    def __repr__(self) -> str:
        body = ', '.join(f"{k}={self._values[k]!r}" for k in self.names)
        return f"ScenarioParam({body})"


def cstr_scenario(alpha: float = 1.0, beta: float = 1.0) -> ScenarioParam:
    """CSTR realization; both multipliers must be finite and positive."""
    for name, value in (('alpha', alpha), ('beta', beta)):
        if not np.isfinite(value) or value <= 0:
            raise ConfigurationError(f"CSTR multiplier {name} must be finite and > 0, got {value}")
    return ScenarioParam(alpha=float(alpha), beta=float(beta))


def stack_scenarios(scenarios: Sequence[ScenarioParam]) -> ScenarioParam:
    """Vectorize scenarios: each parameter becomes an array over the scenario axis."""
    names = sorted({name for s in scenarios for name in s.names})
    return ScenarioParam(**{name: np.array([float(s.get(name)) for s in scenarios]) for name in names})


@dataclass(frozen=True)
class SimConfig:
    dt: float = Config.SAMPLE_TIME
    substeps: int = Config.RK4_SUBSTEPS

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigurationError(f"Sample time must be positive, got {self.dt}")
        if int(self.substeps) < 1:
            raise ConfigurationError(f"RK4 substeps must be >= 1, got {self.substeps}")


@dataclass(frozen=True)
class CstrConstants:
    k0_ab: float = 1.287e12     # 1/h
    k0_bc: float = 1.287e12     # 1/h
    k0_ad: float = 9.043e9      # l/(mol h)
    theta_ab: float = 9758.3    # K, activation energy over R
    theta_bc: float = 9758.3    # K
    theta_ad: float = 8560.0    # K
    h_ab: float = 4.2           # kJ/mol A
    h_bc: float = -11.0         # kJ/mol B
    h_ad: float = -41.85        # kJ/mol A
    rho: float = 0.9342         # kg/l
    cp: float = 3.01            # kJ/(kg K)
    cp_k: float = 2.0           # kJ/(kg K)
    area: float = 0.215         # m^2
    volume: float = 10.01       # l
    m_k: float = 5.0            # kg
    t_in: float = 130.0         # degC
    k_w: float = 4032.0         # kJ/(h m^2 K)
    c_a0: float = 5.1           # mol/l


CSTR = CstrConstants()


def cstr_rates(t_r, psi: ScenarioParam, const: CstrConstants = CSTR):
    """Arrhenius rate coefficients (k1, k2, k3) at reactor temperature ``t_r`` [degC]."""
    t_abs = t_r + 273.15
    k1 = psi.beta * const.k0_ab * ng.exp(-const.theta_ab / t_abs)
    k2 = const.k0_bc * ng.exp(-const.theta_bc / t_abs)
    k3 = const.k0_ad * ng.exp(-psi.alpha * const.theta_ad / t_abs)
    return k1, k2, k3


def cstr_derivative(x, u, psi: ScenarioParam, const: CstrConstants = CSTR):
    """Right-hand side of the four-state reactor model (units per hour)."""
    c_a, c_b, t_r, t_k = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
    flow, q_dot = u[..., 0], u[..., 1]
    k1, k2, k3 = cstr_rates(t_r, psi, const)

    dc_a = flow * (const.c_a0 - c_a) - k1 * c_a - k3 * c_a * c_a
    dc_b = -flow * c_b + k1 * c_a - k2 * c_b
    heat = k1 * c_a * const.h_ab + k2 * c_b * const.h_bc + k3 * c_a * c_a * const.h_ad
    # T_dif = T_R - T_K
    dt_r = (heat / (-const.rho * const.cp)
            + flow * (const.t_in - t_r)
            + const.k_w * const.area * (t_k - t_r) / (const.rho * const.cp * const.volume))
    dt_k = (q_dot + const.k_w * const.area * (t_r - t_k)) / (const.m_k * const.cp_k)
    return ng.stack([dc_a, dc_b, dt_r, dt_k], axis=-1)


Derivative = Callable[..., object]


def rk4_step(derivative: Derivative, x, u, psi: ScenarioParam, sim: SimConfig):
    """Classical RK4 over one sample with zero-order-hold input."""
    h = sim.dt / sim.substeps
    for _ in range(int(sim.substeps)):
        k1 = derivative(x, u, psi)
        k2 = derivative(x + (0.5 * h) * k1, u, psi)
        k3 = derivative(x + (0.5 * h) * k2, u, psi)
        k4 = derivative(x + h * k3, u, psi)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(ng.value_of(x))):
            raise IntegrationError("RK4 produced a non-finite state")
    return x


@dataclass(frozen=True)
class LinearSystem:
    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        b = np.asarray(self.B, dtype=np.float64)
        if b.ndim == 1:
            b = b.reshape(-1, 1)
        if a.shape[0] != a.shape[1] or b.shape[0] != a.shape[0]:
            raise ShapeError(f"Inconsistent system dimensions A{a.shape}, B{b.shape}")
        object.__setattr__(self, 'A', a)
        object.__setattr__(self, 'B', b)

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def action_dim(self) -> int:
        return self.B.shape[1]


def linear_step(system: LinearSystem, x, u):
    """x' = A x + B u over the last axis."""
    if np.shape(ng.value_of(x))[-1:] != (system.state_dim,):
        raise ShapeError(f"State has shape {np.shape(ng.value_of(x))}, system needs {system.state_dim}")
    if np.shape(ng.value_of(u))[-1:] != (system.action_dim,):
        raise ShapeError(f"Action has shape {np.shape(ng.value_of(u))}, system needs {system.action_dim}")
    return ng.linear(x, system.A) + ng.linear(u, system.B)


def double_integrator(dt: float = 0.1) -> LinearSystem:
    """Two-state position/velocity benchmark."""
    return LinearSystem(A=np.array([[1.0, dt], [0.0, 1.0]]), B=np.array([[0.5 * dt * dt], [dt]]))


class CstrModel:
    """Reactor dynamics sampled with RK4."""

    name = 'cstr'
    state_names = ('c_A', 'c_B', 'T_R', 'T_K')
    action_names = ('F', 'Qdot')
    state_dim = 4
    action_dim = 2

    def __init__(self, sim: Optional[SimConfig] = None, const: CstrConstants = CSTR):
        self.sim = sim or SimConfig()
        self.const = const

    def derivative(self, x, u, psi: ScenarioParam):
        return cstr_derivative(x, u, psi, self.const)

    def step(self, x, u, psi: ScenarioParam):
        return rk4_step(self.derivative, x, u, psi, self.sim)


class LinearModel:
    """Discrete linear system with an optional additive scenario disturbance."""

    name = 'linear'

    def __init__(self, system: LinearSystem, disturbance_direction: Optional[Iterable[float]] = None,
                 state_names: Optional[Sequence[str]] = None, action_names: Optional[Sequence[str]] = None):
        self.system = system
        self.state_dim = system.state_dim
        self.action_dim = system.action_dim
        if disturbance_direction is None:
            disturbance_direction = np.ones(self.state_dim)
        self.disturbance_direction = np.asarray(list(disturbance_direction), dtype=np.float64)
        self.state_names = tuple(state_names or [f"x{i}" for i in range(self.state_dim)])
        self.action_names = tuple(action_names or [f"u{i}" for i in range(self.action_dim)])

    def step(self, x, u, psi: ScenarioParam):
        x_next = linear_step(self.system, x, u)
        d = np.asarray(psi.get('disturbance'), dtype=np.float64)
        if not np.any(d):
            return x_next
        return x_next + d[..., None] * self.disturbance_direction
