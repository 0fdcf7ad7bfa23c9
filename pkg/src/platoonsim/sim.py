"""Deterministic fixed-step closed-loop simulation of a platoon on a signalized corridor."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import yaml

from . import estimation as est
from .coordination import (ActivationRound, AckCriteria, FsmEvent, FsmState, PlatoonPlan,
                           SensorView, UnsafeCondition, VehicleFsm, VehicleView,
                           unsafe_condition_check)
from .dynamics import ControlInput, VehicleParams, VehicleState, cruise_torque, plant_step
from .mpc import (FollowerController, FollowerMeasurement, LeaderController, LeaderMeasurement,
                  MpcParams, VelocityForecast)
from .protocol import (Bus, BusConfig, Mailbox, MessageKind, PlatoonTopology, V2VMessage,
                       V2VPayload, light_phase, spat_from_light)
from .safety import SafetyParams

log = logging.getLogger(__name__)

FAR_M = 1.0e4   # stand-in distance when nothing constrains the vehicle


@dataclass
class TrafficLight:
    light_id: int
    position_m: float
    comm_range_m: float = 300.0
    cycle_offset_s: float = 0.0
    red_s: float = 30.0
    yellow_s: float = 5.0
    green_s: float = 25.0
    cycle_length_s: Optional[float] = None
    intersection_length_m: float = 20.0
    # scripted c_r prediction errors: [start_s, end_s, delta_s]
    perturbations: List[List[float]] = field(default_factory=list)

    def __post_init__(self):
        total = self.red_s + self.yellow_s + self.green_s
        if self.cycle_length_s is None:
            self.cycle_length_s = total
        if abs(self.cycle_length_s - total) > 1e-9:
            raise ValueError("red + yellow + green must equal the cycle length")
        if min(self.red_s, self.yellow_s, self.green_s) < 0 or total <= 0:
            raise ValueError("phase durations must be nonnegative with a positive cycle")

    def phase_at(self, t_s: float):
        return light_phase(self.red_s, self.yellow_s, self.green_s, self.cycle_offset_s, t_s)

    def prediction_error(self, t_s: float) -> float:
        return sum(d for a, b, d in self.perturbations if a <= t_s < b)


@dataclass
class PublicVehicle:
    """Scripted vehicle; velocity is piecewise linear in time."""

    times_s: List[float]
    velocities_m_s: List[float]
    initial_position_m: float
    length_m: float = 4.5

    def __post_init__(self):
        if len(self.times_s) != len(self.velocities_m_s) or not self.times_s:
            raise ValueError("times and velocities must be nonempty and equally long")
        if any(v < 0 for v in self.velocities_m_s):
            raise ValueError("scripted velocities must be nonnegative")
        if any(b < a for a, b in zip(self.times_s, self.times_s[1:])):
            raise ValueError("script times must be nondecreasing")

    def velocity_at(self, t_s: float) -> float:
        return float(np.interp(t_s, self.times_s, self.velocities_m_s))


def radar_measure(ego_position_m: float, target_position_m: Optional[float],
                  target_length_m: float = 4.5, max_range_m: float = 150.0,
                  noise_std_m: float = 0.0, rng: Optional[np.random.Generator] = None
                  ) -> Optional[float]:
    """Bumper-to-bumper gap to the target (positions are front bumpers), None if absent."""
    if target_position_m is None:
        return None
    gap = target_position_m - target_length_m - ego_position_m
    if gap > max_range_m:
        return None
    if noise_std_m > 0:
        if rng is None:
            raise ValueError("noisy radar needs an rng")
        gap += float(rng.normal(0.0, noise_std_m))
    return gap


def nearest_upcoming_light(network: Sequence[TrafficLight], ego_position_m: float
                           ) -> Optional[TrafficLight]:
    """First light whose stop bar is at or ahead of ``ego_position_m``."""
    for light in network:
        if light.position_m >= ego_position_m:
            return light
    return None


@dataclass
class Scenario:
    name: str = "custom"
    n_vehicles: int = 3
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    mpc: MpcParams = field(default_factory=MpcParams)
    safety: SafetyParams = field(default_factory=SafetyParams)
    follower_T_max_a_Nm: Optional[float] = None
    lights: List[TrafficLight] = field(default_factory=list)
    public_vehicles: List[PublicVehicle] = field(default_factory=list)
    duration_s: float = 60.0
    seed: int = 0
    vehicle_length_m: float = 4.5
    initial_position_m: float = 0.0
    initial_gaps_m: Optional[List[float]] = None
    initial_velocity_m_s: float = 0.0
    initial_velocities_m_s: Optional[List[float]] = None
    # leader reference profile [[t_s, v], ...], held between breakpoints
    v_des_profile: Optional[List[List[float]]] = None
    estimation: str = "radar_chain"        # radar_chain | gps | ideal
    gps_noise_std_m: float = 3.0
    gps_process_std: float = 0.1
    radar_noise_std_m: float = 0.0
    radar_max_range_m: float = 150.0
    radar_out_of_range_m: float = 100.0
    latency_steps: int = 0
    forecast_delivery: str = "previous"    # previous | current
    message_timeout_steps: int = 5
    proposal_timeout_steps: int = 20
    cancel_wait_ticks: int = 20
    start_active: bool = True
    activation_time_s: float = 0.0
    manual_speed_m_s: Optional[float] = None
    pedal_taps: List[List[float]] = field(default_factory=list)        # [t_s, vehicle]
    link_dropouts: List[List[float]] = field(default_factory=list)     # [start_s, end_s, sender]
    stop_when_rear_past_m: Optional[float] = None
    record_messages: bool = False

    def __post_init__(self):
        if self.n_vehicles < 1:
            raise ValueError("platoon needs at least one vehicle")
        if not self.duration_s > 0:
            raise ValueError("duration must be positive")
        if self.estimation not in ("radar_chain", "gps", "ideal"):
            raise ValueError(f"unknown estimation method {self.estimation!r}")
        if self.forecast_delivery not in ("previous", "current"):
            raise ValueError("forecast_delivery must be 'previous' or 'current'")
        if self.initial_gaps_m is not None and len(self.initial_gaps_m) != self.n_vehicles - 1:
            raise ValueError("need one initial gap per follower")
        self.lights = sorted(self.lights, key=lambda l: l.position_m)

    @property
    def dt(self) -> float:
        return self.vehicle.sample_time_s

    @property
    def n_ticks(self) -> int:
        return int(round(self.duration_s / self.dt))

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        d = dict(d)
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            val = d.pop(f.name)
            if f.name == "vehicle":
                val = VehicleParams(**val)
            elif f.name == "mpc":
                val = MpcParams(**val)
            elif f.name == "safety":
                val = SafetyParams(**val)
            elif f.name == "lights":
                val = [TrafficLight(**l) for l in val]
            elif f.name == "public_vehicles":
                val = [PublicVehicle(**p) for p in val]
            kw[f.name] = val
        if d:
            raise ValueError(f"unknown scenario keys: {sorted(d)}")
        return cls(**kw)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def apply_overrides(config: dict, overrides: Sequence[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; values are parsed as YAML scalars."""
    config = json.loads(json.dumps(config))
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        node = config
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return config


def load_scenario(path=None, overrides: Sequence[str] = ()) -> Scenario:
    """Scenario from a YAML file; ``builtin: <name>`` starts from a named scenario."""
    base: dict = {}
    if path is not None:
        doc = yaml.safe_load(Path(path).read_text()) or {}
        name = doc.pop("builtin", None)
        base = BUILTIN[name]().to_dict() if name else {}
        base = _merge(base, doc)
    return Scenario.from_dict(apply_overrides(base, overrides))


def _merge(a: dict, b: dict) -> dict:
    out = dict(a)
    for k, v in b.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


# --------------------------------------------------------------------------- trace

@dataclass
class RunTrace:
    columns: List[str]
    rows: List[list]
    fsm_log: List[dict]
    summary: dict
    messages: List[dict] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        j = self.columns.index(name)
        return np.array([np.nan if r[j] in ("", None) else float(r[j]) for r in self.rows])

    def text_column(self, name: str) -> List[str]:
        j = self.columns.index(name)
        return [str(r[j]) for r in self.rows]

    @property
    def dt(self) -> float:
        return float(self.summary.get("dt_s", 0.1))

    @property
    def n_vehicles(self) -> int:
        if "n_vehicles" in self.summary:
            return int(self.summary["n_vehicles"])
        return sum(1 for c in self.columns if c[:1] == "p" and c[1:].isdigit())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_fmt(v) for v in r])
        return buf.getvalue()

    def write(self, outdir) -> Path:
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "trace.csv").write_text(self.to_csv())
        (out / "summary.json").write_text(json.dumps(self.summary, indent=1, sort_keys=True))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tick", "vehicle", "from_state", "to_state", "event"])
        for r in self.fsm_log:
            w.writerow([r["tick"], r["vehicle"], r["from_state"], r["to_state"], r["event"]])
        (out / "fsm_log.csv").write_text(buf.getvalue())
        if self.messages:
            with open(out / "messages.ndjson", "w") as fh:
                for m in self.messages:
                    fh.write(json.dumps(m, sort_keys=True) + "\n")
        return out

    @classmethod
    def read(cls, outdir) -> "RunTrace":
        out = Path(outdir)
        path = out / "trace.csv" if out.is_dir() else out
        with open(path) as fh:
            rd = csv.reader(fh)
            columns = next(rd)
            rows = [list(r) for r in rd]
        summary_path = path.parent / "summary.json"
        summary = json.loads(summary_path.read_text()) if summary_path.exists() else {}
        fsm_path = path.parent / "fsm_log.csv"
        fsm_log = []
        if fsm_path.exists():
            with open(fsm_path) as fh:
                fsm_log = [dict(r, tick=int(r["tick"]), vehicle=int(r["vehicle"]))
                           for r in csv.DictReader(fh)]
        return cls(columns, rows, fsm_log, summary)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isnan(v):
            return ""
        return f"{v:.6f}"
    return str(v)


class InvariantBreach(RuntimeError):
    def __init__(self, tick: int, reason: str):
        super().__init__(f"tick {tick}: {reason}")
        self.tick = tick
        self.reason = reason


# --------------------------------------------------------------------------- engine

class _Agent:
    def __init__(self, idx: int, p: float, v: float, T_a: float):
        self.idx = idx
        self.p, self.v, self.T_a = p, v, T_a
        self.u = ControlInput()
        self.controller = None
        self.fsm: Optional[VehicleFsm] = None
        self.mailbox = Mailbox()
        self.s_filter: Optional[est.LeaderDistanceEstimate] = None
        self.info = None
        self.radar: Optional[float] = None
        self.front_v: Optional[float] = None
        self.s_hat: Optional[float] = None
        self.manual_speed = v


class ManualDriver:
    """Speed-holding driver with a simple gap rule, used while no plan is active."""

    def __init__(self, vehicle: VehicleParams, d_min_m: float = 6.0, t_h_s: float = 1.6,
                 k_v: float = 0.5, k_h: float = 0.3, k_dv: float = 0.8, a_limit: float = 3.0):
        self.vehicle = vehicle
        self.d_min, self.t_h = d_min_m, t_h_s
        self.k_v, self.k_h, self.k_dv, self.a_limit = k_v, k_h, k_dv, a_limit

    def control(self, v: float, target: float, gap: Optional[float], front_v: Optional[float],
                T_max_a: float, T_max_b: float) -> ControlInput:
        a = self.k_v * (target - v)
        if gap is not None and front_v is not None:
            a = min(a, self.k_h * (gap - self.d_min - self.t_h * v) + self.k_dv * (front_v - v))
        a = max(-self.a_limit, min(self.a_limit, a))
        if target <= 0 and v < 0.05:
            return ControlInput(0.0, T_max_b)
        p = self.vehicle
        torque = p.wheel_radius_m * (p.mass_kg * a + p.friction_const_N
                                     + p.friction_quad_N_per_m2s2 * v * v)
        if torque >= 0:
            return ControlInput(min(torque, T_max_a), 0.0)
        return ControlInput(0.0, min(-torque, T_max_b))


class Engine:
    def __init__(self, scenario: Scenario):
        self.sc = sc = scenario
        self.rng = np.random.default_rng(sc.seed)
        n = sc.n_vehicles
        self.dt = sc.dt
        L = sc.vehicle_length_m
        gaps = sc.initial_gaps_m if sc.initial_gaps_m is not None else [sc.mpc.d_des_m] * (n - 1)
        vels = (sc.initial_velocities_m_s if sc.initial_velocities_m_s is not None
                else [sc.initial_velocity_m_s] * n)
        self.agents: List[_Agent] = []
        p = sc.initial_position_m
        for i in range(n):
            if i > 0:
                p = p - L - gaps[i - 1]
            T0 = cruise_torque(sc.vehicle, vels[i]) if vels[i] > 0 else 0.0
            a = _Agent(i, p, float(vels[i]), T0)
            a.manual_speed = sc.manual_speed_m_s if sc.manual_speed_m_s is not None else vels[i]
            self.agents.append(a)
        fparams = sc.mpc
        if sc.follower_T_max_a_Nm is not None:
            fparams = replace(sc.mpc, T_max_a_Nm=sc.follower_T_max_a_Nm)
        self.fparams = fparams
        self.agents[0].controller = LeaderController(0, sc.vehicle, sc.mpc, sc.safety,
                                                     self._v_des_profile())
        for a in self.agents[1:]:
            a.controller = FollowerController(a.idx, sc.vehicle, fparams, sc.safety)
        init_state = FsmState.PLAN_ACTIVE if sc.start_active else FsmState.READY
        for a in self.agents:
            a.fsm = VehicleFsm(a.idx, sc.cancel_wait_ticks, init_state)
        self.plan = PlatoonPlan(1, tuple(range(n)), sc.mpc.d_des_m, sc.mpc.v_des_m_s)
        self.bus = Bus(PlatoonTopology(n), BusConfig(sc.latency_steps, drop=self._drop),
                       record=sc.record_messages)
        self.round: Optional[ActivationRound] = None
        self.driver = ManualDriver(sc.vehicle, sc.mpc.d_min_front_m, sc.mpc.time_headway_s)
        self.pub_pos = [pv.initial_position_m for pv in sc.public_vehicles]
        self.taps = {int(round(t / self.dt)): int(v) for t, v in sc.pedal_taps}
        self.columns = self._columns()
        self.rows: List[list] = []
        self.breach: Optional[InvariantBreach] = None
        self.stats = {"solver_fallbacks": 0, "solver_non_optimal": 0, "max_kkt_residual": 0.0,
                      "max_iterations": 0}

    # ----------------------------------------------------------------- helpers
    def _v_des_profile(self):
        prof = self.sc.v_des_profile
        if not prof:
            return None
        ts = [float(t) for t, _ in prof]
        vs = [float(v) for _, v in prof]
        dt = self.dt

        def f(tick):
            t = tick * dt + 1e-9
            k = int(np.searchsorted(ts, t, side="right")) - 1
            return vs[max(k, 0)]
        return f

    def _drop(self, sender, receiver, msg, tick):
        t = tick * self.dt
        for a, b, s in self.sc.link_dropouts:
            if int(s) == sender and a <= t < b and msg.kind == MessageKind.FORECAST:
                return True
        return False

    def _columns(self):
        cols = ["tick", "t", "plan_status", "light_id", "phase", "c_r", "d_tl", "decision",
                "obstacle", "pub_gap"]
        for i in range(self.sc.n_vehicles):
            cols += [f"p{i}", f"h{i}", f"s{i}", f"v{i}", f"Ta{i}", f"Taref{i}", f"Tb{i}",
                     f"fsm{i}", f"iters{i}"]
        return cols

    def _front_public(self, p_ego):
        best = None
        for pv, pos in zip(self.sc.public_vehicles, self.pub_pos):
            if pos > p_ego and (best is None or pos < best[1]):
                best = (pv, pos)
        return best

    # ----------------------------------------------------------------- main loop
    def run(self) -> RunTrace:
        sc = self.sc
        try:
            for k in range(sc.n_ticks + 1):
                # the row logged for tick k holds the state before integration
                done = (sc.stop_when_rear_past_m is not None
                        and self.agents[-1].p >= sc.stop_when_rear_past_m)
                self._tick(k)
                if done:
                    break
        except InvariantBreach as exc:
            self.breach = exc
            log.error("invariant breach: %s", exc)
        return self._trace()

    def _tick(self, k: int):
        sc, dt, L = self.sc, self.dt, self.sc.vehicle_length_m
        t = k * dt
        leader = self.agents[0]
        # sensing
        front_pub = self._front_public(leader.p)
        if front_pub is not None:
            pv, pos = front_pub
            leader.radar = radar_measure(leader.p, pos, pv.length_m, sc.radar_max_range_m,
                                         sc.radar_noise_std_m, self.rng)
            leader.front_v = pv.velocity_at(t) if leader.radar is not None else None
        else:
            leader.radar, leader.front_v = None, None
        for a in self.agents[1:]:
            f = self.agents[a.idx - 1]
            a.radar = radar_measure(a.p, f.p, L, sc.radar_max_range_m, sc.radar_noise_std_m,
                                    self.rng)
            a.front_v = f.v if a.radar is not None else None
        gps = [a.p + (float(self.rng.normal(0.0, sc.gps_noise_std_m))
                      if sc.gps_noise_std_m > 0 else 0.0) for a in self.agents]
        # sensor broadcast
        n = sc.n_vehicles
        for a in self.agents:
            pl = V2VPayload(gps_position_m=gps[a.idx], velocity_m_s=a.v,
                            plan_status=int(a.fsm.active), fsm_state=a.fsm.state.value)
            self.bus.post(V2VMessage(a.idx, MessageKind.STATUS, k, pl), k)
            if a.idx == n - 1 and n > 1:
                self.bus.post(V2VMessage(a.idx, MessageKind.GPS, k,
                                         V2VPayload(gps_position_m=gps[a.idx])), k)
            if a.idx >= 1:
                self.bus.post(V2VMessage(a.idx, MessageKind.RADAR, k,
                                         V2VPayload(radar_headway_m=a.radar)), k)
        inbox = self.bus.deliver(k)
        for a in self.agents:
            a.mailbox.accept(inbox.get(a.idx, []), k)
        self._coordination(k, inbox)
        # controllers, leader first
        light = nearest_upcoming_light(sc.lights, leader.p)
        spat = spat_from_light(light, leader.p, k, dt) if light is not None else None
        for a in self.agents:
            if sc.forecast_delivery == "current" and a.idx > 0:
                extra = self.bus.deliver(k)
                for b in self.agents:
                    b.mailbox.accept(extra.get(b.idx, []), k)
            self._estimate(a, k)
            if a.fsm.active:
                self._control(a, k, spat, gps)
            else:
                a.info = None
                a.u = self._manual(a)
        self._log(k, t, light, spat)
        # plant
        for a in self.agents:
            st = plant_step(sc.vehicle, VehicleState(a.p, 0.0, 0.0, a.v, a.T_a), a.u, [a.v], dt)
            a.p, a.v, a.T_a = st.position_m, st.velocity_m_s, st.accel_torque_Nm
        for j, pv in enumerate(sc.public_vehicles):
            self.pub_pos[j] += 0.5 * (pv.velocity_at(t) + pv.velocity_at(t + dt)) * dt
        self._check(k + 1)

    def _coordination(self, k, inbox):
        sc = self.sc
        for a in self.agents:
            a.fsm.tick(k)
        act_tick = int(round(sc.activation_time_s / self.dt))
        if not sc.start_active and self.round is None and k == act_tick:
            if all(a.fsm.state == FsmState.READY for a in self.agents):
                self.round = ActivationRound([a.fsm for a in self.agents], self.plan,
                                             AckCriteria(), sc.proposal_timeout_steps,
                                             sc.latency_steps)
                self.round.start(k, self.bus.post)
                # the proposal counts as sent before this tick's delivery
                extra = self.bus.deliver(k)
                for a in self.agents:
                    a.mailbox.accept(extra.get(a.idx, []), k)
                for i, msgs in extra.items():
                    inbox.setdefault(i, []).extend(msgs)
        if self.round is not None:
            was_active = [a.fsm.active for a in self.agents]
            sensors = {a.idx: SensorView(a.radar, a.v, a.front_v if a.front_v is not None else a.v)
                       for a in self.agents[1:]}
            self.round.process(k, inbox, self.bus.post, sensors)
            for a, was in zip(self.agents, was_active):
                if a.fsm.active and not was:
                    a.controller.reset()
                    a.mailbox.reset_clock(k)
        order = tuple(sorted(range(sc.n_vehicles), key=lambda i: -self.agents[i].p))
        for a in self.agents:
            if not a.fsm.active:
                continue
            cancel_heard = any(m.kind == MessageKind.STATUS
                               and m.payload.fsm_state == FsmState.PLAN_CANCEL.value
                               for m in inbox.get(a.idx, []))
            ages = {}
            if a.idx == 0:
                if sc.n_vehicles > 1:
                    ages["rear_gps"] = a.mailbox.age(sc.n_vehicles - 1, MessageKind.GPS, k)
            else:
                ages["leader_forecast"] = a.mailbox.age(0, MessageKind.FORECAST, k)
                ages["front_forecast"] = a.mailbox.age(a.idx - 1, MessageKind.FORECAST, k)
            view = VehicleView(self.plan.ordered_vehicle_ids, order, ages,
                               sc.message_timeout_steps, self.taps.get(k) == a.idx,
                               a.idx == 0, a.radar, sc.radar_out_of_range_m, a.v,
                               sc.mpc.v_min_m_s, sc.mpc.v_max_m_s)
            cond = unsafe_condition_check(view)
            if cond is not None:
                log.info("tick %d vehicle %d: unsafe condition %s", k, a.idx, cond.name)
                ev = FsmEvent.TIMEOUT if cond == UnsafeCondition.MESSAGE_TIMEOUT \
                    else FsmEvent.UNSAFE_CONDITION
                a.fsm.handle(ev, k)
            elif cancel_heard:
                a.fsm.handle(FsmEvent.UNSAFE_CONDITION, k)
            if a.fsm.state == FsmState.PLAN_CANCEL:
                self.bus.post(V2VMessage(a.idx, MessageKind.STATUS, k,
                                         V2VPayload(velocity_m_s=a.v,
                                                    fsm_state=FsmState.PLAN_CANCEL.value)), k)

    def _estimate(self, a: _Agent, k: int):
        if a.idx == 0:
            return
        sc, L = self.sc, self.sc.vehicle_length_m
        if sc.estimation == "ideal":
            a.s_hat = self.agents[0].p - a.p - a.idx * L
            return
        if sc.estimation == "radar_chain":
            hs = []
            for j in range(1, a.idx):
                m = a.mailbox.get(j, MessageKind.RADAR)
                hj = m.payload.radar_headway_m if m is not None else None
                hs.append(hj if hj is not None else sc.mpc.d_des_m)
            hs.append(a.radar if a.radar is not None else sc.mpc.d_des_m)
            a.s_hat = est.estimate_s_radar_chain(hs, sc.radar_noise_std_m).s_hat_m
            return
        # gps: leader fix from its status broadcast, extrapolated over its age
        m = a.mailbox.get(0, MessageKind.STATUS)
        if m is None or m.payload.gps_position_m is None:
            a.s_hat = sc.mpc.d_des_m * a.idx
            return
        age = k - m.timestamp_step
        vL = m.payload.velocity_m_s or 0.0
        d_hat = m.payload.gps_position_m + vL * age * self.dt - (a.p + self._gps_self_error(a))
        meas = est.estimate_s_gps(d_hat, a.idx, L, sc.gps_noise_std_m)
        if a.s_filter is None:
            a.s_filter = meas
        else:
            a.s_filter = est.fuse_s_estimate(a.s_filter, vL, a.v, meas, self.dt,
                                             sc.gps_process_std)
        a.s_hat = a.s_filter.s_hat_m

    def _gps_self_error(self, a):
        if self.sc.gps_noise_std_m <= 0:
            return 0.0
        return float(self.rng.normal(0.0, self.sc.gps_noise_std_m))

    def _control(self, a: _Agent, k: int, spat, gps):
        sc, L = self.sc, self.sc.vehicle_length_m
        if a.idx == 0:
            light = nearest_upcoming_light(sc.lights, a.p)
            d_tl = light.position_m - a.p if light is not None else FAR_M
            h = a.radar if a.radar is not None else FAR_M
            state = VehicleState(a.p, h, d_tl, a.v, a.T_a)
            n = sc.n_vehicles
            if n > 1:
                m = a.mailbox.get(n - 1, MessageKind.GPS)
                rear = m.payload.gps_position_m if m is not None else \
                    a.p - (n - 1) * (L + sc.mpc.d_des_m)
                d_rear = a.p - rear + L
            else:
                d_rear = L
            meas = LeaderMeasurement(state, a.front_v, spat, d_rear)
            u, fc, info = a.controller.step(meas, k)
        else:
            h = a.radar if a.radar is not None else FAR_M
            state = VehicleState(a.p, h, FAR_M, a.v, a.T_a, dist_to_leader_m=a.s_hat)
            lf = self._forecast(a, 0)
            ff = self._forecast(a, a.idx - 1)
            meas = FollowerMeasurement(state, a.front_v if a.front_v is not None else 0.0, lf, ff)
            u, fc, info = a.controller.step(meas, k)
        a.u, a.info = u, info
        st = self.stats
        st["max_iterations"] = max(st["max_iterations"], info.iterations)
        if info.status == "Optimal":
            st["max_kkt_residual"] = max(st["max_kkt_residual"], info.kkt_residual)
        else:
            st["solver_non_optimal"] += 1
        st["solver_fallbacks"] += int(info.fallback)
        self.bus.post(V2VMessage(a.idx, MessageKind.FORECAST, k,
                                 V2VPayload(velocity_forecast=fc.to_list(), velocity_m_s=a.v,
                                            plan_status=1,
                                            fsm_state=a.fsm.state.value)), k)

    def _forecast(self, a: _Agent, sender: int) -> Optional[VelocityForecast]:
        m = a.mailbox.get(sender, MessageKind.FORECAST)
        if m is None or m.payload.velocity_forecast is None:
            return None
        if a.mailbox.received_at.get((sender, MessageKind.FORECAST), -1) < a.mailbox.start_tick:
            return None
        return VelocityForecast(sender, m.timestamp_step, m.payload.velocity_forecast)

    def _manual(self, a: _Agent) -> ControlInput:
        sc = self.sc
        Tmax_a = self.fparams.T_max_a_Nm if a.idx else sc.mpc.T_max_a_Nm
        return self.driver.control(a.v, a.manual_speed, a.radar, a.front_v, Tmax_a, sc.mpc.T_max_b_Nm)

    def _log(self, k, t, light, spat):
        sc, L = self.sc, self.sc.vehicle_length_m
        leader = self.agents[0]
        plan_status = int(all(a.fsm.active for a in self.agents))
        row = [k, round(t, 6), plan_status,
               light.light_id if light is not None else "",
               spat.phase.value if spat is not None else "",
               spat.time_remaining_s if spat is not None else None,
               (light.position_m - leader.p) if light is not None else None,
               (leader.info.decision or "") if leader.info is not None else "",
               leader.info.obstacle if leader.info is not None else "",
               None]
        fp = self._front_public(leader.p)
        if fp is not None:
            row[-1] = fp[1] - fp[0].length_m - leader.p
        for a in self.agents:
            if a.idx == 0:
                h, s = row[-1], None
            else:
                h = self.agents[a.idx - 1].p - L - a.p
                s = leader.p - a.p - a.idx * L
            row += [a.p, h, s, a.v, a.T_a, a.u.accel_torque_ref_Nm, a.u.brake_torque_Nm,
                    a.fsm.state.value, a.info.iterations if a.info is not None else 0]
        self.rows.append(row)

    def _check(self, k):
        L = self.sc.vehicle_length_m
        for a in self.agents:
            if not (np.isfinite(a.p) and np.isfinite(a.v)) or a.v < 0:
                raise InvariantBreach(k, f"vehicle {a.idx} has invalid state")
            if a.idx > 0 and self.agents[a.idx - 1].p - L - a.p < 0:
                raise InvariantBreach(k, f"collision between vehicles {a.idx - 1} and {a.idx}")
        fp = self._front_public(self.agents[0].p - 1e-9)
        if fp is not None and fp[1] - fp[0].length_m - self.agents[0].p < 0:
            raise InvariantBreach(k, "leader collided with a public vehicle")

    def _trace(self) -> RunTrace:
        sc = self.sc
        fsm_log = sorted((asdict(r) for a in self.agents for r in a.fsm.log),
                         key=lambda r: (r["tick"], r["vehicle"]))
        trace = RunTrace(self.columns, self.rows, fsm_log, {},
                         self.bus.trace if sc.record_messages else [])
        summary = {"scenario": sc.name, "seed": sc.seed, "n_vehicles": sc.n_vehicles,
                   "dt_s": self.dt, "ticks": len(self.rows),
                   "trust_horizon": sc.mpc.trust_horizon,
                   "breach": None if self.breach is None else
                   {"tick": self.breach.tick, "reason": self.breach.reason}}
        summary.update(self.stats)
        summary.update(summarize(trace, sc))
        trace.summary = summary
        return trace


def summarize(trace: RunTrace, sc: Scenario) -> dict:
    from .analysis import crossings_per_light, stopped_stopbar_distances
    out: dict = {}
    pub_gap = trace.column("pub_gap")
    out["min_leader_headway_m"] = _nanmin(pub_gap)
    stopped = stopped_stopbar_distances(trace)
    out["min_stopped_dist_to_stopbar_m"] = _nanmin(stopped) if stopped.size else None
    if sc.n_vehicles > 1:
        hmin = min(_nanmin(trace.column(f"h{i}")) for i in range(1, sc.n_vehicles))
        out["min_follower_headway_m"] = hmin
        t = trace.column("t")
        active = trace.column("plan_status") > 0.5
        if active.any():
            t_act = t[np.argmax(active)]
            mask = active & (t >= t_act + 3.0)
            errs = [np.abs(trace.column(f"s{i}")[mask] - sc.mpc.d_des_m * i)
                    for i in range(1, sc.n_vehicles)]
            out["max_tracking_error_after_3s_m"] = (float(max(e.max() for e in errs))
                                                     if mask.any() else None)
        out["crossings"] = crossings_per_light(trace, sc.lights)
    return out


def _nanmin(a):
    a = np.asarray(a, float)
    a = a[np.isfinite(a)]
    return float(a.min()) if a.size else None


def run(scenario: Scenario) -> RunTrace:
    return Engine(scenario).run()


# --------------------------------------------------------------------------- scenarios

CORRIDOR_LIGHTS_M = [180.0, 430.0, 730.0, 1030.0, 1330.0, 1630.0, 1980.0, 2330.0]


def throughput_scenario(trust_horizon: int = 20, n_vehicles: int = 3,
                        intersection_length_m: float = 20.0, **kw) -> Scenario:
    """Standing start at a stop bar at 0 m that turns green at t = 0."""
    mpc = MpcParams(trust_horizon=trust_horizon)
    light = TrafficLight(0, 0.0, 300.0, cycle_offset_s=-30.0, red_s=30.0, yellow_s=5.0,
                         green_s=60.0, intersection_length_m=intersection_length_m)
    d_min = mpc.d_min_stopbar_m
    args = dict(name=f"throughput_F{trust_horizon}", n_vehicles=n_vehicles, mpc=mpc,
                lights=[light], duration_s=30.0, initial_position_m=-d_min,
                initial_gaps_m=[mpc.d_des_m] * (n_vehicles - 1),
                stop_when_rear_past_m=intersection_length_m + 1.0)
    args.update(kw)
    return Scenario(**args)


def stop_and_go_scenario(**kw) -> Scenario:
    """Corridor with red-light stops and a slow public vehicle that halts ahead."""
    lights = [
        TrafficLight(0, 180.0, 300.0, cycle_offset_s=5.0, red_s=25.0, yellow_s=4.0, green_s=31.0),
        TrafficLight(1, 430.0, 300.0, cycle_offset_s=40.0, red_s=25.0, yellow_s=4.0, green_s=31.0),
    ]
    for j, pos in enumerate(CORRIDOR_LIGHTS_M[2:], start=2):
        lights.append(TrafficLight(j, pos, 300.0, cycle_offset_s=0.0, red_s=5.0, yellow_s=4.0,
                                   green_s=200.0, cycle_length_s=209.0))
    public = PublicVehicle([0.0, 70.0, 80.0, 100.0, 104.0, 200.0],
                           [2.0, 2.0, 2.0, 0.0, 0.0, 0.0], initial_position_m=760.0)
    args = dict(name="stop_and_go", n_vehicles=3, lights=lights, public_vehicles=[public],
                duration_s=130.0)
    args.update(kw)
    return Scenario(**args)


def tracking_scenario(trust_horizon: int = 15, **kw) -> Scenario:
    """Step-profile leader reference from rest, platoon already formed."""
    mpc = MpcParams(trust_horizon=trust_horizon)
    args = dict(name="tracking", n_vehicles=3, mpc=mpc, duration_s=60.0,
                v_des_profile=[[0.0, 0.0], [2.0, 4.0], [15.0, 8.0], [30.0, 12.0], [45.0, 6.0]],
                follower_T_max_a_Nm=2000.0)
    args.update(kw)
    return Scenario(**args)


def formation_scenario(**kw) -> Scenario:
    """Vehicles driving manually at unequal gaps; the plan starts at t = 1 s."""
    mpc = MpcParams(v_des_m_s=8.0)
    args = dict(name="formation", n_vehicles=3, mpc=mpc, duration_s=15.0,
                initial_velocity_m_s=4.0, initial_gaps_m=[14.0, 9.0], start_active=False,
                activation_time_s=1.0)
    args.update(kw)
    return Scenario(**args)


BUILTIN = {
    "throughput": throughput_scenario,
    "stop_and_go": stop_and_go_scenario,
    "tracking": tracking_scenario,
    "formation": formation_scenario,
}
