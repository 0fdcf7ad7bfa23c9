"""Leader and follower model predictive controllers.

The QPs are condensed: the decision vector holds only the inputs
``u_0 .. u_{N_p}`` and the predicted states are affine functions of it, so
the planned trajectories satisfy the discrete dynamics exactly.  Inside the
QP torques are expressed in kNm; input weights (``jerk_weight`` and the
entries of ``R``) apply to torques in kNm as well.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import qp as qpmod
from .dynamics import (FOLLOWER, FOLLOWER_IDX, LEADER, LEADER_IDX, ControlInput, LinearModel,
                       VehicleParams, VehicleState, discrete_model)
from .safety import (FrontSetFamily, LightDecision, PolyhedralSet, PriorityObstacle, SafetyParams,
                     polyhedral_stopbar_set, priority_obstacle, should_stop_at_light)

log = logging.getLogger(__name__)

KNM = 1000.0  # Nm per QP torque unit
STANDSTILL_M_S = 1e-3


@dataclass(frozen=True)
class MpcParams:
    horizon_steps: int = 20
    d_des_m: float = 6.0
    d_min_front_m: float = 6.0
    d_min_stopbar_m: float = 5.0
    time_headway_s: float = 1.6
    v_des_m_s: float = 15.0
    v_min_m_s: float = 0.0
    v_max_m_s: float = 20.0
    T_max_a_Nm: float = 1500.0
    T_max_b_Nm: float = 2000.0
    jerk_weight: float = 0.3
    R_a: float = 0.1
    R_b: float = 0.1
    R_0: float = 0.09     # cross term discourages pressing both pedals
    trust_horizon: int = 20
    soft_weight: float = 1e3
    front_speed_margin_m_s: float = 0.2
    forecast_decrement: str = "constant"    # or "accelerating"
    set_facets: int = 16
    set_grid_m_s: float = 0.5
    warm_start: bool = True
    solver_tol: float = 1e-6
    solver_max_iter: int = 60

    def __post_init__(self):
        if self.horizon_steps < 1:
            raise ValueError("horizon must be at least one step")
        if not 0 <= self.trust_horizon <= self.horizon_steps:
            raise ValueError("trust horizon must lie in [0, horizon_steps]")
        if self.R_a < 0 or self.R_b < 0 or self.R_0 ** 2 > self.R_a * self.R_b + 1e-18:
            raise ValueError("input weight matrix must be positive semidefinite")
        if self.jerk_weight < 0 or self.soft_weight <= 0:
            raise ValueError("weights must be nonnegative (soft weight positive)")
        if self.forecast_decrement not in ("constant", "accelerating"):
            raise ValueError("forecast_decrement must be 'constant' or 'accelerating'")

    @property
    def R(self) -> np.ndarray:
        return np.array([[self.R_a, self.R_0], [self.R_0, self.R_b]])

    @property
    def forecast_length(self) -> int:
        return self.horizon_steps + 2


@dataclass
class VelocityForecast:
    sender_id: int
    issue_step: int
    velocities_m_s: np.ndarray

    def __post_init__(self):
        self.velocities_m_s = np.asarray(self.velocities_m_s, float).ravel()
        if self.velocities_m_s.size == 0:
            raise ValueError("empty forecast")

    def at(self, step: int) -> float:
        """Forecast velocity for absolute ``step``; held at the ends."""
        k = min(max(step - self.issue_step, 0), self.velocities_m_s.size - 1)
        return float(self.velocities_m_s[k])

    def staleness(self, step: int) -> int:
        return step - self.issue_step

    def to_list(self) -> List[float]:
        return [float(v) for v in self.velocities_m_s]


def worst_case_front_forecast(v0_m_s: float, a_max_brake: float, dt: float, horizon: int,
                              variant: str = "constant") -> np.ndarray:
    """Front velocity under maximal braking, ``horizon + 1`` samples starting at ``v0``.

    ``variant="accelerating"`` subtracts ``k * a * dt`` at step ``k`` instead of a
    constant decrement.
    """
    if v0_m_s < 0:
        raise ValueError("v0 must be nonnegative")
    out = np.empty(horizon + 1)
    out[0] = v0_m_s
    for k in range(1, horizon + 1):
        dec = a_max_brake * dt * (k if variant == "accelerating" else 1)
        out[k] = max(0.0, out[k - 1] - dec)
    return out


class Condensed:
    """Prediction ``X = free + Su @ U`` for inputs ``u_0..u_{N-1}`` (QP units)."""

    def __init__(self, model: LinearModel, x0, w_seq, n_inputs: int):
        Ad, Bd = model.state_matrix, model.input_matrix * KNM
        Ed, cd = model.disturbance_matrix, model.affine_offset
        nx, nu = Bd.shape
        N = n_inputs
        w_seq = np.atleast_2d(np.asarray(w_seq, float))
        if w_seq.shape[0] != N:
            w_seq = w_seq.reshape(N, -1)
        self.nx, self.nu, self.N = nx, nu, N
        Su = np.zeros((N * nx, N * nu))
        free = np.zeros(N * nx)
        xk = np.asarray(x0, float)
        row_prev = np.zeros((nx, N * nu))
        for k in range(N):
            xk = Ad @ xk + Ed @ w_seq[k] + cd
            row = Ad @ row_prev
            row[:, k * nu:(k + 1) * nu] += Bd
            Su[k * nx:(k + 1) * nx] = row
            free[k * nx:(k + 1) * nx] = xk
            row_prev = row
        self.Su, self.free = Su, free
        self.x0 = np.asarray(x0, float)

    def state_row(self, step: int, i: int):
        """(gradient row, constant) for state ``i`` at ``step`` in 1..N."""
        r = (step - 1) * self.nx + i
        return self.Su[r], self.free[r]

    def series(self, i: int):
        rows = self.Su[i::self.nx]
        return rows, self.free[i::self.nx]

    def trajectory(self, U) -> np.ndarray:
        X = (self.free + self.Su @ U).reshape(self.N, self.nx)
        return np.vstack([self.x0, X])


class _Rows:
    def __init__(self, n):
        self.n = n
        self.G: List[np.ndarray] = []
        self.h: List[float] = []
        self.tags: List[str] = []

    def add(self, g, rhs, tag):
        # rows independent of the decision variables are fixed by the initial state
        if not np.any(g):
            return
        self.G.append(np.asarray(g, float))
        self.h.append(float(rhs))
        self.tags.append(tag)

    def affine_le(self, row, const, bound, tag):
        """``row @ U + const <= bound``."""
        self.add(row, bound - const, tag)

    def affine_ge(self, row, const, bound, tag):
        self.add(-row, const - bound, tag)


def _input_cost(params: MpcParams, N: int, nu: int = 2):
    R = params.R
    P = np.kron(np.eye(N), 2.0 * R)
    if params.jerk_weight > 0 and N > 1:
        D = np.zeros(((N - 1) * nu, N * nu))
        for k in range(N - 1):
            D[k * nu:(k + 1) * nu, k * nu:(k + 1) * nu] = -np.eye(nu)
            D[k * nu:(k + 1) * nu, (k + 1) * nu:(k + 2) * nu] = np.eye(nu)
        P += 2.0 * params.jerk_weight * D.T @ D
    return P


def _input_bounds(rows: _Rows, params: MpcParams, N: int):
    ta, tb = params.T_max_a_Nm / KNM, params.T_max_b_Nm / KNM
    for k in range(N):
        for j, top in ((0, ta), (1, tb)):
            e = np.zeros(rows.n)
            e[2 * k + j] = 1.0
            rows.add(e, top, "input_max")
            rows.add(-e, 0.0, "input_min")


def _velocity_bounds(rows: _Rows, cond: Condensed, iv: int, params: MpcParams):
    for k in range(1, cond.N + 1):
        g, c = cond.state_row(k, iv)
        rows.affine_le(g, c, params.v_max_m_s, "v_max")
        rows.affine_ge(g, c, params.v_min_m_s, "v_min")


def _terminal_rows(rows: _Rows, cond: Condensed, step: int, i_dist: int, i_v: int,
                   pset: PolyhedralSet):
    gd, cd = cond.state_row(step, i_dist)
    gv, cv = cond.state_row(step, i_v)
    for (a_d, a_v), b in zip(pset.normals, pset.offsets):
        rows.affine_le(a_d * gd + a_v * gv, a_d * cd + a_v * cv, b, "terminal")


@dataclass
class MpcQp:
    problem: qpmod.QpProblem
    condensed: Condensed
    role: str
    tags: List[str]
    obstacle: PriorityObstacle = PriorityObstacle.NONE
    terminal: Optional[str] = None
    terminal_step: Optional[int] = None
    disturbance: Optional[np.ndarray] = None

    def trajectory(self, U) -> np.ndarray:
        return self.condensed.trajectory(U)

    def velocities(self, U) -> np.ndarray:
        iv = (LEADER_IDX if self.role == LEADER else FOLLOWER_IDX)["v"]
        return self.trajectory(U)[:, iv]


def _safety_for(params: MpcParams, safety: SafetyParams) -> SafetyParams:
    return replace(safety, d_min_front_m=params.d_min_front_m,
                   d_min_stopbar_m=params.d_min_stopbar_m, v_max_m_s=params.v_max_m_s)


def build_leader_qp(state: VehicleState, front_forecast: Optional[Sequence[float]],
                    stop_required: bool, model: LinearModel, params: MpcParams,
                    safety: Optional[SafetyParams] = None,
                    v_des: Optional[Sequence[float]] = None,
                    front_family: Optional[FrontSetFamily] = None) -> MpcQp:
    """Leader QP over inputs ``u_0..u_{N_p}``.

    ``front_forecast`` is the worst-case front velocity sequence (``N_p + 2``
    samples starting now) or None when no vehicle is ahead.  ``stop_required``
    marks an upcoming stop bar that must be respected.
    """
    safety = _safety_for(params, safety or SafetyParams())
    Np = params.horizon_steps
    N = Np + 1
    n = 2 * N
    idx = LEADER_IDX
    x0 = state.to_vector()
    if front_forecast is not None:
        w = np.asarray(front_forecast, float)[:N]
        if w.size < N:
            w = np.concatenate([w, np.full(N - w.size, w[-1])])
    else:
        # nothing ahead: let the headway state ride along with the ego vehicle
        w = np.full(N, state.velocity_m_s)
    cond = Condensed(model, x0, w[:, None], N)

    if v_des is None:
        v_des = np.full(N + 1, params.v_des_m_s)
    v_des = np.asarray(v_des, float)
    gv, cv = cond.series(idx["v"])
    P = 2.0 * gv.T @ gv + _input_cost(params, N)
    q = 2.0 * gv.T @ (cv - v_des[1:N + 1])
    const = float((state.velocity_m_s - v_des[0]) ** 2 + np.sum((cv - v_des[1:N + 1]) ** 2))

    rows = _Rows(n)
    _velocity_bounds(rows, cond, idx["v"], params)
    _input_bounds(rows, params, N)

    front = front_forecast is not None
    vF0 = float(w[0]) if front else 0.0
    obstacle = priority_obstacle(state.headway_m, vF0, state.dist_to_stopbar_m, stop_required,
                                 front, safety)
    terminal = None
    if obstacle != PriorityObstacle.NONE:
        if obstacle == PriorityObstacle.FRONT_VEHICLE:
            i_d, d_min = idx["h"], params.d_min_front_m
            vF_end = float(w[min(Np, w.size - 1)])
            family = front_family or FrontSetFamily(safety, params.set_grid_m_s, params.set_facets)
            pset = family.select(vF_end)
            terminal = "front"
        else:
            i_d, d_min = idx["d_tl"], params.d_min_stopbar_m
            pset = polyhedral_stopbar_set(safety, params.set_facets)
            terminal = "stopbar"
        for k in range(1, N + 1):
            gd, cdist = cond.state_row(k, i_d)
            gk, ck = cond.state_row(k, idx["v"])
            # d_min + t_h v <= d*
            rows.affine_ge(gd - params.time_headway_s * gk, cdist - params.time_headway_s * ck,
                           d_min, "headway")
        _terminal_rows(rows, cond, Np, i_d, idx["v"], pset)

    problem = _assemble(P, q, rows, params, const)
    return MpcQp(problem, cond, LEADER, rows.tags, obstacle, terminal,
                 Np if terminal else None, w)


def follower_preview(tick: int, params: MpcParams, safety: SafetyParams, is_first: bool,
                     leader_forecast: Optional[VelocityForecast],
                     front_forecast: Optional[VelocityForecast],
                     front_velocity_measured_m_s: float, dt: float):
    """Disturbance preview ``(v_leader, v_front)`` for steps ``0..N_p``.

    Forecasts are trusted through step ``F``; afterwards the front vehicle is
    assumed to brake at ``a_max_brake`` and the leader velocity is held.
    Returns ``(w, F_used)`` where ``F_used`` is 0 when no front forecast exists.
    """
    Np = params.horizon_steps
    N = Np + 1
    F = params.trust_horizon if front_forecast is not None else 0
    a, variant = safety.a_max_brake_m_s2, params.forecast_decrement
    vF = np.empty(N)
    if F == 0:
        v0 = max(0.0, front_velocity_measured_m_s - params.front_speed_margin_m_s)
        vF[:] = worst_case_front_forecast(v0, a, dt, Np, variant)
    else:
        for k in range(min(F, Np) + 1):
            vF[k] = max(0.0, front_forecast.at(tick + k))
        if F < Np:
            vF[F:] = worst_case_front_forecast(vF[F], a, dt, Np - F, variant)
    if is_first:
        vL = vF.copy()
    else:
        vL = np.empty(N)
        src = leader_forecast
        last = front_velocity_measured_m_s if src is None else src.at(tick)
        for k in range(N):
            if src is not None and k <= F:
                last = src.at(tick + k)
            vL[k] = last
    return np.column_stack([vL, vF]), F


def build_follower_qp(state: VehicleState, vehicle_index: int, preview: np.ndarray, F: int,
                      model: LinearModel, params: MpcParams,
                      safety: Optional[SafetyParams] = None,
                      front_family: Optional[FrontSetFamily] = None) -> MpcQp:
    """Follower QP tracking ``s_i -> d_des * i`` with a headway floor and terminal set.

    ``preview`` is the ``(N_p + 1, 2)`` disturbance sequence from
    :func:`follower_preview`; the terminal set is imposed at step ``max(F, 1)``.
    """
    safety = _safety_for(params, safety or SafetyParams())
    Np = params.horizon_steps
    N = Np + 1
    n = 2 * N
    idx = FOLLOWER_IDX
    cond = Condensed(model, state.to_vector(), preview, N)
    s_des = params.d_des_m * vehicle_index
    gs, cs = cond.series(idx["s"])
    P = 2.0 * gs.T @ gs + _input_cost(params, N)
    q = 2.0 * gs.T @ (cs - s_des)
    const = float((state.dist_to_leader_m - s_des) ** 2 + np.sum((cs - s_des) ** 2))

    rows = _Rows(n)
    _velocity_bounds(rows, cond, idx["v"], params)
    _input_bounds(rows, params, N)
    for k in range(1, N + 1):
        g, c = cond.state_row(k, idx["h"])
        rows.affine_ge(g, c, params.d_min_front_m, "headway")
    jT = max(F, 1)
    family = front_family or follower_front_family(params, safety)
    pset = family.select(float(preview[min(jT, Np), 1]))
    _terminal_rows(rows, cond, jT, idx["h"], idx["v"], pset)
    problem = _assemble(P, q, rows, params, const)
    return MpcQp(problem, cond, FOLLOWER, rows.tags, PriorityObstacle.FRONT_VEHICLE, "front",
                 jT, preview)


def follower_front_family(params: MpcParams, safety: SafetyParams) -> FrontSetFamily:
    """Front sets for platoon members: the predecessor brakes no harder than the ego car."""
    s = _safety_for(params, safety)
    sym = replace(s, a_max_brake_m_s2=s.a_min_brake_m_s2)
    return FrontSetFamily(sym, params.set_grid_m_s, params.set_facets)


def _assemble(P, q, rows: _Rows, params: MpcParams, const: float) -> qpmod.QpProblem:
    P = 0.5 * (P + P.T)
    G = np.array(rows.G) if rows.G else np.zeros((0, P.shape[0]))
    h = np.array(rows.h)
    return qpmod.QpProblem(P, q, G=G, h=h, soft=np.ones(len(rows.h), bool),
                           soft_weight=params.soft_weight, constant=const, validate=False)


@dataclass
class LeaderMeasurement:
    state: VehicleState                       # headway / stop-bar distance from sensors
    front_velocity_m_s: Optional[float] = None
    spat: object = None                       # SpatMessage or None
    d_rear_m: float = 0.0                     # leader front bumper to rear vehicle's rear bumper


@dataclass
class FollowerMeasurement:
    state: VehicleState                       # h from radar, s from estimation
    front_velocity_m_s: float = 0.0
    leader_forecast: Optional[VelocityForecast] = None
    front_forecast: Optional[VelocityForecast] = None


@dataclass
class StepInfo:
    status: str = ""
    iterations: int = 0
    kkt_residual: float = 0.0
    max_slack: float = 0.0
    obstacle: str = PriorityObstacle.NONE.value
    terminal: Optional[str] = None
    decision: Optional[str] = None
    fallback: bool = False
    trust_used: int = 0
    staleness: Optional[int] = None


class _ControllerBase:
    role = LEADER

    def __init__(self, vehicle_id: int, vehicle: VehicleParams, params: MpcParams,
                 safety: SafetyParams):
        self.vehicle_id = vehicle_id
        self.vehicle = vehicle
        self.params = params
        self.safety = _safety_for(params, safety)
        self.prev_solution: Optional[qpmod.QpSolution] = None
        self.prev_plan: Optional[np.ndarray] = None    # U (QP units), shape (N*2,)
        self.prev_velocities: Optional[np.ndarray] = None
        self.last_qp: Optional[MpcQp] = None

    def reset(self) -> None:
        self.prev_solution = None
        self.prev_plan = None
        self.prev_velocities = None

    def _model(self, v):
        return discrete_model(self.vehicle, v, self.role, self.params.v_max_m_s,
                              at_rest=v < STANDSTILL_M_S)

    def _solve(self, mqp: MpcQp, tick: int, info: StepInfo):
        warm = self.prev_solution if self.params.warm_start else None
        sol = qpmod.solve(mqp.problem, self.params.solver_tol, self.params.solver_max_iter,
                          warm_start=warm if _compatible(warm, mqp.problem) else None)
        info.status, info.iterations, info.kkt_residual = sol.status, sol.iterations, sol.kkt_residual
        info.max_slack = float(sol.slack.max()) if sol.slack.size else 0.0
        self.last_qp = mqp
        if sol.status != qpmod.OPTIMAL and self.prev_plan is not None:
            info.fallback = True
            log.info("vehicle %d tick %d: solver %s, applying shifted previous plan",
                     self.vehicle_id, tick, sol.status)
            U = np.concatenate([self.prev_plan[2:], self.prev_plan[-2:]])
            vel = np.concatenate([self.prev_velocities[1:], self.prev_velocities[-1:]])
            self.prev_plan, self.prev_velocities = U, vel
            self.prev_solution = None
            return U, vel
        U = sol.x
        vel = mqp.velocities(U)
        self.prev_solution = _shift_solution(sol)
        self.prev_plan, self.prev_velocities = U.copy(), vel.copy()
        return U, vel

    def _outputs(self, U, vel, tick):
        u = ControlInput(float(U[0]) * KNM, float(U[1]) * KNM).clipped(
            self.params.T_max_a_Nm, self.params.T_max_b_Nm)
        vel = np.clip(vel, self.params.v_min_m_s, self.params.v_max_m_s)
        return u, VelocityForecast(self.vehicle_id, tick, vel)


def _compatible(sol, problem) -> bool:
    return sol is not None and sol.x.size == problem.n and sol.z.size == problem.G.shape[0]


def _shift_solution(sol: qpmod.QpSolution) -> qpmod.QpSolution:
    # shift inputs one step; duals are reused as-is (row layout is stable)
    x = np.concatenate([sol.x[2:], sol.x[-2:]])
    return qpmod.QpSolution(x, sol.y, sol.z, sol.slack, sol.objective, sol.status,
                            sol.iterations, sol.kkt_residual, sol.s, sol.z_slack)


class LeaderController(_ControllerBase):
    """Velocity tracking with priority-obstacle safety constraints."""

    role = LEADER

    def __init__(self, vehicle_id: int = 0, vehicle: VehicleParams = VehicleParams(),
                 params: MpcParams = MpcParams(), safety: SafetyParams = SafetyParams(),
                 v_des_profile: Optional[Callable[[int], float]] = None):
        super().__init__(vehicle_id, vehicle, params, safety)
        self.v_des_profile = v_des_profile
        self.front_family = FrontSetFamily(self.safety, params.set_grid_m_s, params.set_facets)
        self._proceed_light: Optional[int] = None

    def reset(self) -> None:
        super().reset()
        self._proceed_light = None

    def v_des_sequence(self, tick: int) -> np.ndarray:
        N = self.params.horizon_steps + 2
        if self.v_des_profile is None:
            return np.full(N, self.params.v_des_m_s)
        return np.array([self.v_des_profile(tick + k) for k in range(N)])

    def light_decision(self, meas: LeaderMeasurement) -> Optional[LightDecision]:
        spat = meas.spat
        if spat is None:
            self._proceed_light = None
            return None
        phase = getattr(spat.phase, "value", spat.phase)
        if phase == "green" and self._proceed_light == spat.light_id:
            return LightDecision.PROCEED
        dec = should_stop_at_light(meas.state.velocity_m_s, meas.d_rear_m,
                                   meas.state.dist_to_stopbar_m, spat.phase,
                                   spat.time_remaining_s, self.safety)
        # once cleared to go on green, keep going until the phase changes
        self._proceed_light = spat.light_id if (dec == LightDecision.PROCEED) else None
        return dec

    def step(self, meas: LeaderMeasurement, tick: int):
        info = StepInfo()
        dec = self.light_decision(meas)
        info.decision = dec.value if dec is not None else None
        stop = dec == LightDecision.STOP
        state = meas.state
        front = None
        if meas.front_velocity_m_s is not None:
            v0 = max(0.0, meas.front_velocity_m_s - self.params.front_speed_margin_m_s)
            front = worst_case_front_forecast(v0, self.safety.a_max_brake_m_s2,
                                              self.vehicle.sample_time_s,
                                              self.params.horizon_steps + 1,
                                              self.params.forecast_decrement)
        mqp = build_leader_qp(state, front, stop, self._model(state.velocity_m_s), self.params,
                              self.safety, self.v_des_sequence(tick), self.front_family)
        info.obstacle, info.terminal = mqp.obstacle.value, mqp.terminal
        U, vel = self._solve(mqp, tick, info)
        u, fc = self._outputs(U, vel, tick)
        return u, fc, info


class FollowerController(_ControllerBase):
    """Gap tracking to the leader using forecast previews."""

    role = FOLLOWER

    def __init__(self, vehicle_id: int, vehicle: VehicleParams = VehicleParams(),
                 params: MpcParams = MpcParams(), safety: SafetyParams = SafetyParams()):
        if vehicle_id < 1:
            raise ValueError("followers have index >= 1")
        super().__init__(vehicle_id, vehicle, params, safety)
        self.front_family = follower_front_family(params, self.safety)

    def step(self, meas: FollowerMeasurement, tick: int):
        info = StepInfo()
        state = meas.state
        if meas.front_forecast is None:
            log.debug("vehicle %d tick %d: no front forecast, worst-case preview",
                      self.vehicle_id, tick)
        else:
            info.staleness = meas.front_forecast.staleness(tick)
        preview, F = follower_preview(tick, self.params, self.safety, self.vehicle_id == 1,
                                      meas.leader_forecast, meas.front_forecast,
                                      meas.front_velocity_m_s, self.vehicle.sample_time_s)
        info.trust_used = F
        mqp = build_follower_qp(state, self.vehicle_id, preview, F,
                                self._model(state.velocity_m_s), self.params, self.safety,
                                self.front_family)
        info.obstacle, info.terminal = mqp.obstacle.value, mqp.terminal
        U, vel = self._solve(mqp, tick, info)
        u, fc = self._outputs(U, vel, tick)
        return u, fc, info
