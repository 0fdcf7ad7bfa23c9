"""Longitudinal vehicle models.

Leader state vector is ``[p, h, d_tl, v, T_a]`` with the front-vehicle velocity
as disturbance.  Follower state vector is ``[p, h, s, d_tl, v, T_a]`` with
``[v_leader, v_front]`` as disturbance.  Inputs are always
``[T_a_ref, T_b]`` (wheel torques, Nm).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import expm

LEADER = "leader"
FOLLOWER = "follower"

# index maps into the state vectors
LEADER_IDX = {"p": 0, "h": 1, "d_tl": 2, "v": 3, "T_a": 4}
FOLLOWER_IDX = {"p": 0, "h": 1, "s": 2, "d_tl": 3, "v": 4, "T_a": 5}


@dataclass(frozen=True)
class VehicleParams:
    mass_kg: float = 2044.0
    wheel_radius_m: float = 0.3074
    friction_const_N: float = 339.1329
    friction_quad_N_per_m2s2: float = 0.77
    accel_time_const_s: float = 0.7868
    sample_time_s: float = 0.1

    def __post_init__(self):
        for name in ("mass_kg", "wheel_radius_m", "friction_const_N",
                     "friction_quad_N_per_m2s2", "accel_time_const_s", "sample_time_s"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")


@dataclass
class VehicleState:
    position_m: float = 0.0
    headway_m: float = 0.0
    dist_to_stopbar_m: float = 0.0
    velocity_m_s: float = 0.0
    accel_torque_Nm: float = 0.0
    # followers only
    dist_to_leader_m: Optional[float] = None

    @property
    def role(self) -> str:
        return LEADER if self.dist_to_leader_m is None else FOLLOWER

    def to_vector(self) -> np.ndarray:
        if self.dist_to_leader_m is None:
            return np.array([self.position_m, self.headway_m, self.dist_to_stopbar_m,
                             self.velocity_m_s, self.accel_torque_Nm])
        return np.array([self.position_m, self.headway_m, self.dist_to_leader_m,
                         self.dist_to_stopbar_m, self.velocity_m_s, self.accel_torque_Nm])

    @classmethod
    def from_vector(cls, x, role: str) -> "VehicleState":
        x = [float(xi) for xi in x]
        if role == LEADER:
            return cls(x[0], x[1], x[2], x[3], x[4])
        return cls(position_m=x[0], headway_m=x[1], dist_to_leader_m=x[2],
                   dist_to_stopbar_m=x[3], velocity_m_s=x[4], accel_torque_Nm=x[5])


@dataclass
class ControlInput:
    accel_torque_ref_Nm: float = 0.0
    brake_torque_Nm: float = 0.0

    def to_vector(self) -> np.ndarray:
        return np.array([self.accel_torque_ref_Nm, self.brake_torque_Nm])

    def clipped(self, max_accel_Nm: float, max_brake_Nm: float) -> "ControlInput":
        return ControlInput(min(max(self.accel_torque_ref_Nm, 0.0), max_accel_Nm),
                            min(max(self.brake_torque_Nm, 0.0), max_brake_Nm))


@dataclass
class LinearModel:
    """``x' = A x + B u + E w + c`` (continuous) or ``x+ = ...`` (discrete)."""

    state_matrix: np.ndarray
    input_matrix: np.ndarray
    disturbance_matrix: np.ndarray
    affine_offset: np.ndarray
    nominal_velocity_m_s: float
    role: str = LEADER
    dt_s: Optional[float] = None  # None for continuous time

    @property
    def is_discrete(self) -> bool:
        return self.dt_s is not None

    def step(self, x, u, w) -> np.ndarray:
        if not self.is_discrete:
            raise ValueError("step() needs a discretized model")
        return (self.state_matrix @ np.asarray(x, float) + self.input_matrix @ np.asarray(u, float)
                + self.disturbance_matrix @ np.atleast_1d(np.asarray(w, float))
                + self.affine_offset)


def friction_force(params: VehicleParams, velocity_m_s: float) -> float:
    """Lumped rolling + aerodynamic resistance ``beta + gamma v^2`` (N)."""
    if velocity_m_s < 0:
        raise ValueError("friction model is defined for nonnegative velocity only")
    return params.friction_const_N + params.friction_quad_N_per_m2s2 * velocity_m_s ** 2


def cruise_torque(params: VehicleParams, velocity_m_s: float) -> float:
    """Accelerating wheel torque that holds ``velocity_m_s`` constant."""
    return friction_force(params, velocity_m_s) * params.wheel_radius_m


def _accel(params: VehicleParams, v, torque_a, torque_b):
    drive = (torque_a - torque_b) / params.wheel_radius_m
    return (drive - params.friction_const_N - params.friction_quad_N_per_m2s2 * v * v) / params.mass_kg


def _derivative_vec(params, x, u, w, role, clamp=False):
    idx = LEADER_IDX if role == LEADER else FOLLOWER_IDX
    w = np.atleast_1d(np.asarray(w, float))
    v = x[idx["v"]]
    torque_a = x[idx["T_a"]]
    acc = _accel(params, v, torque_a, u[1])
    if clamp:
        # no reverse motion; braking and resistance cannot push below rest
        if v <= 0.0:
            v = 0.0
            acc = max(acc, 0.0)
    dx = np.zeros_like(x, dtype=float)
    dx[idx["p"]] = v
    dx[idx["d_tl"]] = -v
    dx[idx["v"]] = acc
    dx[idx["T_a"]] = (u[0] - torque_a) / params.accel_time_const_s
    if role == LEADER:
        dx[idx["h"]] = w[0] - v
    else:
        dx[idx["h"]] = w[1] - v
        dx[idx["s"]] = w[0] - v
    return dx


def nonlinear_derivative(params: VehicleParams, state, control, disturbance_velocities) -> np.ndarray:
    """Right-hand side of the nonlinear longitudinal model.

    ``state`` may be a :class:`VehicleState` or a raw vector (the role is then
    inferred from its length).  The result is in state-vector ordering.
    """
    if isinstance(state, VehicleState):
        role, x = state.role, state.to_vector()
    else:
        x = np.asarray(state, float)
        role = LEADER if x.size == 5 else FOLLOWER
    u = control.to_vector() if isinstance(control, ControlInput) else np.asarray(control, float)
    return _derivative_vec(params, x, u, disturbance_velocities, role)


def linearize(params: VehicleParams, nominal_velocity_m_s: float, role: str = LEADER,
              v_max_m_s: float = 20.0, at_rest: bool = False) -> LinearModel:
    """Affine model exact at ``nominal_velocity_m_s``.

    With ``at_rest`` the resistive offset is dropped: a standing vehicle is
    held by static friction rather than pushed backwards, so zero torque keeps
    it at rest.
    """
    v0 = float(nominal_velocity_m_s)
    if not 0.0 <= v0 <= v_max_m_s:
        raise ValueError(f"nominal velocity {v0} outside [0, {v_max_m_s}]")
    if role not in (LEADER, FOLLOWER):
        raise ValueError(f"unknown role {role!r}")
    M, Rw = params.mass_kg, params.wheel_radius_m
    beta, gamma, tau = params.friction_const_N, params.friction_quad_N_per_m2s2, params.accel_time_const_s
    idx = LEADER_IDX if role == LEADER else FOLLOWER_IDX
    n = len(idx)
    nw = 1 if role == LEADER else 2
    A = np.zeros((n, n))
    B = np.zeros((n, 2))
    E = np.zeros((n, nw))
    c = np.zeros(n)
    iv, it = idx["v"], idx["T_a"]
    A[idx["p"], iv] = 1.0
    A[idx["d_tl"], iv] = -1.0
    A[idx["h"], iv] = -1.0
    A[iv, iv] = -2.0 * gamma * v0 / M
    A[iv, it] = 1.0 / (M * Rw)
    A[it, it] = -1.0 / tau
    B[iv, 1] = -1.0 / (M * Rw)
    B[it, 0] = 1.0 / tau
    # affine residual keeps the model exact at v0
    c[iv] = 0.0 if at_rest else -(beta - gamma * v0 ** 2) / M
    if role == LEADER:
        E[idx["h"], 0] = 1.0
    else:
        A[idx["s"], iv] = -1.0
        E[idx["s"], 0] = 1.0
        E[idx["h"], 1] = 1.0
    return LinearModel(A, B, E, c, v0, role)


def discretize(model: LinearModel, dt_s: float) -> LinearModel:
    """Exact zero-order-hold discretization (inputs, disturbance and offset held)."""
    if not dt_s > 0:
        raise ValueError("dt_s must be positive")
    if model.is_discrete:
        raise ValueError("model is already discrete")
    A = model.state_matrix
    n = A.shape[0]
    blocks = [model.input_matrix, model.disturbance_matrix, model.affine_offset[:, None]]
    widths = [b.shape[1] for b in blocks]
    k = sum(widths)
    aug = np.zeros((n + k, n + k))
    aug[:n, :n] = A
    aug[:n, n:] = np.hstack(blocks)
    phi = expm(aug * dt_s)
    Ad = phi[:n, :n]
    rest = phi[:n, n:]
    Bd = rest[:, :widths[0]]
    Ed = rest[:, widths[0]:widths[0] + widths[1]]
    cd = rest[:, -1].copy()
    return LinearModel(Ad, Bd, Ed, cd, model.nominal_velocity_m_s, model.role, dt_s)


def discrete_model(params: VehicleParams, nominal_velocity_m_s: float, role: str = LEADER,
                   v_max_m_s: float = 20.0, at_rest: bool = False) -> LinearModel:
    v0 = min(max(nominal_velocity_m_s, 0.0), v_max_m_s)
    return discretize(linearize(params, v0, role, v_max_m_s, at_rest), params.sample_time_s)


def rk4(fun, x, dt, substeps):
    h = dt / substeps
    for _ in range(substeps):
        k1 = fun(x)
        k2 = fun(x + 0.5 * h * k1)
        k3 = fun(x + 0.5 * h * k2)
        k4 = fun(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


def plant_step(params: VehicleParams, state: VehicleState, control: ControlInput,
               disturbance_velocities, dt_s: float, substeps: int = 10) -> VehicleState:
    """Ground-truth integration of the nonlinear model over ``dt_s``.

    RK4 with ``substeps`` sub-intervals; velocity and accelerating torque are
    clamped at zero after every sub-step so the vehicle never rolls backwards.
    """
    if not dt_s > 0:
        raise ValueError("dt_s must be positive")
    role = state.role
    idx = LEADER_IDX if role == LEADER else FOLLOWER_IDX
    u = control.to_vector()
    w = np.atleast_1d(np.asarray(disturbance_velocities, float))
    x = state.to_vector()
    h = dt_s / substeps
    for _ in range(substeps):
        x = rk4(lambda z: _derivative_vec(params, z, u, w, role, clamp=True), x, h, 1)
        x[idx["v"]] = max(x[idx["v"]], 0.0)
        x[idx["T_a"]] = max(x[idx["T_a"]], 0.0)
    return VehicleState.from_vector(x, role)


__all__ = [
    "LEADER", "FOLLOWER", "LEADER_IDX", "FOLLOWER_IDX", "VehicleParams", "VehicleState",
    "ControlInput", "LinearModel", "friction_force", "cruise_torque", "nonlinear_derivative",
    "linearize", "discretize", "discrete_model", "plant_step", "rk4",
]
