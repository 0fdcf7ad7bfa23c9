"""Intersection throughput from crossing times, and trust-horizon sweeps."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence, Union

import numpy as np


@dataclass(frozen=True)
class ThroughputConfig:
    vehicle_length_m: float = 4.5
    intersection_length_m: float = 20.0
    d_min_m: float = 5.0
    d_des_m: float = 6.0

    def __post_init__(self):
        if min(self.vehicle_length_m, self.intersection_length_m, self.d_min_m, self.d_des_m) <= 0:
            raise ValueError("throughput geometry must be positive")

    def initial_positions(self, n_vehicles: int) -> List[float]:
        """Front-bumper positions for a standing start with the stop bar at 0."""
        step = self.vehicle_length_m + self.d_des_m
        return [-self.d_min_m - step * i for i in range(n_vehicles)]


@dataclass(frozen=True)
class ThroughputResult:
    t_L_s: float
    t_rear_s: float
    vph: float
    trust_horizon: Optional[int] = None


def first_crossing(t, p, threshold: float) -> Optional[float]:
    """First time ``p`` reaches ``threshold``, linearly interpolated between samples."""
    t = np.asarray(t, float)
    p = np.asarray(p, float)
    hit = np.flatnonzero(p >= threshold)
    if hit.size == 0:
        return None
    j = hit[0]
    if j == 0:
        return float(t[0])
    p0, p1 = p[j - 1], p[j]
    frac = (threshold - p0) / (p1 - p0) if p1 != p0 else 1.0
    return float(t[j - 1] + frac * (t[j] - t[j - 1]))


def crossing_times(trace, intersection_length_m: float = 20.0, stopbar_position_m: float = 0.0):
    """``(t_L, t_rear)``: first instants the leader and rear vehicle pass the far side."""
    n = trace.n_vehicles
    if n < 2:
        raise ValueError("crossing times need a platoon with at least two vehicles")
    t = trace.column("t")
    target = stopbar_position_m + intersection_length_m
    t_L = first_crossing(t, trace.column("p0"), target)
    t_r = first_crossing(t, trace.column(f"p{n - 1}"), target)
    if t_L is None or t_r is None:
        who = "leader" if t_L is None else f"vehicle {n - 1}"
        raise ValueError(f"{who} never reaches {target} m in trace "
                         f"({trace.summary.get('scenario', '?')}, {len(t)} ticks)")
    return t_L, t_r


def throughput_vph(t_L_s: float, t_rear_s: float, n_vehicles: int) -> float:
    if n_vehicles < 2:
        raise ValueError("throughput needs at least two vehicles")
    if not t_rear_s > t_L_s:
        raise ValueError("rear crossing must come after the leader crossing")
    return 3600.0 * (n_vehicles - 1) / (t_rear_s - t_L_s)


def crossings_per_light(trace, lights) -> List[dict]:
    """Leader/rear crossing of each light's far side and the implied vph."""
    n = trace.n_vehicles
    t = trace.column("t")
    pL, pR = trace.column("p0"), trace.column(f"p{n - 1}")
    out = []
    for light in lights:
        target = light.position_m + light.intersection_length_m
        t_L = first_crossing(t, pL, target)
        t_R = first_crossing(t, pR, target)
        rec = {"light_id": light.light_id, "t_L_s": t_L, "t_rear_s": t_R, "vph": None}
        if t_L is not None and t_R is not None and t_R > t_L:
            rec["vph"] = throughput_vph(t_L, t_R, n)
        out.append(rec)
    return out


def trust_sweep(scenario, F_values: Sequence[int], run_fn: Optional[Callable] = None,
                jobs: int = 1) -> List[ThroughputResult]:
    """One run per trust horizon on the standing-start scenario, otherwise identical.

    With ``jobs > 1`` the runs go to a process pool; results keep the order of
    ``F_values``.
    """
    from .sim import run as sim_run
    run_fn = run_fn or sim_run
    light = scenario.lights[0] if scenario.lights else None
    ell = light.intersection_length_m if light is not None else 20.0
    bar = light.position_m if light is not None else 0.0
    cases = [replace(scenario, mpc=replace(scenario.mpc, trust_horizon=int(F)),
                     name=f"{scenario.name}_F{int(F)}") for F in F_values]
    if jobs > 1 and len(cases) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            traces = list(pool.map(run_fn, cases))
    else:
        traces = [run_fn(sc) for sc in cases]
    results = []
    for sc, trace in zip(cases, traces):
        t_L, t_R = crossing_times(trace, ell, bar)
        results.append(ThroughputResult(t_L, t_R, throughput_vph(t_L, t_R, sc.n_vehicles),
                                        sc.mpc.trust_horizon))
    return results


def sweep_table(results: Sequence[ThroughputResult]) -> str:
    """Plain-text comparison against the first (baseline) entry."""
    if not results:
        return ""
    base = results[0].vph
    lines = ["F    t_L[s]   t_rear[s]  vph      ratio"]
    for r in results:
        lines.append(f"{r.trust_horizon!s:<4} {r.t_L_s:7.3f}  {r.t_rear_s:8.3f}  "
                     f"{r.vph:7.1f}  {r.vph / base:5.2f}")
    return "\n".join(lines)


@dataclass(frozen=True)
class InvariantLimits:
    d_min_front_m: float = 6.0
    d_min_stopbar_m: float = 5.0
    v_max_m_s: float = 20.0
    tolerance_m: float = 0.1


def stopped_stopbar_distances(trace, v_stop: float = 0.05, near_m: float = 50.0) -> np.ndarray:
    """Leader distance to the stop bar on ticks where it stands still at a red or yellow."""
    v0 = trace.column("v0")
    dtl = trace.column("d_tl")
    phase = trace.text_column("phase")
    keep = [i for i in range(len(v0)) if v0[i] < v_stop and phase[i] in ("red", "yellow")
            and np.isfinite(dtl[i]) and dtl[i] < near_m]
    return dtl[keep]


def validate_trace(trace, limits: InvariantLimits = InvariantLimits()) -> List[str]:
    """Invariant suite over a recorded trace; returns human-readable violations."""
    bad: List[str] = []
    n = trace.n_vehicles
    ticks = trace.column("tick")
    tol = limits.tolerance_m
    breach = trace.summary.get("breach") if trace.summary else None
    if breach:
        bad.append(f"simulation breach at tick {breach['tick']}: {breach['reason']}")
    for i in range(n):
        v = trace.column(f"v{i}")
        p = trace.column(f"p{i}")
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(p))):
            bad.append(f"vehicle {i}: non-finite state")
            continue
        j = int(np.argmin(v))
        if v[j] < -1e-9:
            bad.append(f"vehicle {i}: negative speed {v[j]:.3f} at tick {int(ticks[j])}")
        j = int(np.argmax(v))
        if v[j] > limits.v_max_m_s + tol:
            bad.append(f"vehicle {i}: speed {v[j]:.3f} above limit at tick {int(ticks[j])}")
    for i in range(1, n):
        h = trace.column(f"h{i}")
        j = int(np.nanargmin(h))
        if h[j] < 0:
            bad.append(f"vehicle {i}: collision at tick {int(ticks[j])}")
        active = np.array([s == "PlanActive" for s in trace.text_column(f"fsm{i}")])
        if active.any():
            ha = np.where(active, h, np.inf)
            j = int(np.argmin(ha))
            if ha[j] < limits.d_min_front_m - tol:
                bad.append(f"vehicle {i}: headway {ha[j]:.3f} m at tick {int(ticks[j])}")
    gap = trace.column("pub_gap")
    if np.any(np.isfinite(gap)):
        j = int(np.nanargmin(gap))
        if gap[j] < limits.d_min_front_m - tol:
            bad.append(f"leader: headway to public vehicle {gap[j]:.3f} m at tick {int(ticks[j])}")
    d = stopped_stopbar_distances(trace)
    if d.size and d.min() < limits.d_min_stopbar_m - tol:
        bad.append(f"leader: stopped {d.min():.3f} m from the stop bar")
    return bad
