"""Terminal safety sets, priority obstacle selection and stop-bar decisions.

All sets live in the (distance, velocity) plane.  ``front`` sets guard a
vehicle ahead, ``stopbar`` sets guard an intersection that requires a stop.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .protocol import Phase

FAMILY_FORMAT = "platoonsim-front-set-family"
FAMILY_VERSION = 1


@dataclass(frozen=True)
class SafetyParams:
    a_min_brake_m_s2: float = 3.2
    a_max_brake_m_s2: float = 5.0912
    d_min_front_m: float = 6.0
    d_min_stopbar_m: float = 5.0
    intersection_length_m: float = 20.0
    t_min_s: float = 6.0
    v_low_m_s: float = 1.0
    v_max_m_s: float = 20.0

    def __post_init__(self):
        if not 0 < self.a_min_brake_m_s2 <= self.a_max_brake_m_s2:
            raise ValueError("need 0 < a_min_brake <= a_max_brake")
        if self.d_min_front_m <= 0 or self.d_min_stopbar_m <= 0:
            raise ValueError("minimum distances must be positive")

    @property
    def d_min_common_m(self) -> float:
        return min(self.d_min_front_m, self.d_min_stopbar_m)


class PriorityObstacle(enum.Enum):
    FRONT_VEHICLE = "front_vehicle"
    INTERSECTION = "intersection"
    NONE = "none"


class LightDecision(enum.Enum):
    PROCEED = "proceed"
    STOP = "stop"
    MUST_RUN = "must_run"


def front_boundary(v0_m_s, vF0_m_s, params: SafetyParams, d_min: Optional[float] = None):
    """Smallest admissible headway for ego speed ``v0`` behind a vehicle at ``vF0``."""
    d_min = params.d_min_front_m if d_min is None else d_min
    braking = (np.square(v0_m_s) / (2 * params.a_min_brake_m_s2)
               - np.square(vF0_m_s) / (2 * params.a_max_brake_m_s2) + d_min)
    return np.maximum(d_min, braking)


def stopbar_boundary(v0_m_s, params: SafetyParams, d_min: Optional[float] = None):
    d_min = params.d_min_stopbar_m if d_min is None else d_min
    return np.square(v0_m_s) / (2 * params.a_min_brake_m_s2) + d_min


def in_front_set(h0_m, v0_m_s, vF0_m_s, params: SafetyParams, d_min: Optional[float] = None):
    if np.any(np.asarray(v0_m_s) < 0) or np.any(np.asarray(vF0_m_s) < 0):
        raise ValueError("velocities must be nonnegative")
    return h0_m >= front_boundary(v0_m_s, vF0_m_s, params, d_min)


def in_stopbar_set(dTL0_m, v0_m_s, params: SafetyParams, d_min: Optional[float] = None):
    if np.any(np.asarray(v0_m_s) < 0):
        raise ValueError("velocity must be nonnegative")
    return dTL0_m >= stopbar_boundary(v0_m_s, params, d_min)


def front_stops_before_bar(h0_m, vF0_m_s, dTL0_m, params: SafetyParams):
    """True when the front vehicle, braking hardest, halts before the stop bar."""
    return h0_m + np.square(vF0_m_s) / (2 * params.a_max_brake_m_s2) <= dTL0_m


def priority_obstacle(h0_m, vF0_m_s, dTL0_m, intersection_requires_stop: bool,
                      front_present: bool, params: SafetyParams) -> PriorityObstacle:
    if front_present and intersection_requires_stop:
        if front_stops_before_bar(h0_m, vF0_m_s, dTL0_m, params):
            return PriorityObstacle.FRONT_VEHICLE
        return PriorityObstacle.INTERSECTION
    if front_present:
        return PriorityObstacle.FRONT_VEHICLE
    if intersection_requires_stop:
        return PriorityObstacle.INTERSECTION
    return PriorityObstacle.NONE


def check_priority_implication(h0, v0, vF0, dTL0, params: SafetyParams):
    """Evaluate the priority-obstacle containment claim on given samples.

    With a common minimum distance: if the front vehicle cannot stop before the
    bar, stop-bar membership must imply front membership; otherwise front
    membership must imply stop-bar membership.  Vectorized; returns a bool
    array (or a bool for scalars) that is True where the implication holds.
    """
    d_min = params.d_min_common_m
    h0, v0, vF0, dTL0 = (np.asarray(a, float) for a in (h0, v0, vF0, dTL0))
    in_f = in_front_set(h0, v0, vF0, params, d_min)
    in_tl = in_stopbar_set(dTL0, v0, params, d_min)
    cond = front_stops_before_bar(h0, vF0, dTL0, params)
    ok = np.where(cond, ~in_f | in_tl, ~in_tl | in_f)
    return bool(ok) if ok.ndim == 0 else ok


@dataclass
class PolyhedralSet:
    """Conjunction of half-planes ``normals @ (distance, velocity) <= offsets``."""

    normals: np.ndarray
    offsets: np.ndarray

    def __post_init__(self):
        self.normals = np.atleast_2d(np.asarray(self.normals, float))
        self.offsets = np.asarray(self.offsets, float).ravel()
        if self.normals.shape != (self.offsets.size, 2):
            raise ValueError("normals must be (k, 2) matching offsets (k,)")

    def contains(self, distance, velocity, tol: float = 0.0):
        pts = np.stack(np.broadcast_arrays(np.asarray(distance, float),
                                           np.asarray(velocity, float)), axis=-1)
        ok = np.all(pts @ self.normals.T <= self.offsets + tol, axis=-1)
        return bool(ok) if ok.ndim == 0 else ok

    def boundary_distance(self, velocity: float) -> float:
        """Smallest distance in the set at ``velocity`` (inf if none)."""
        lo = -math.inf
        for (a_d, a_v), b in zip(self.normals, self.offsets):
            rhs = b - a_v * velocity
            if a_d < 0:
                lo = max(lo, rhs / a_d)
            elif a_d == 0 and rhs < 0:
                return math.inf
        return lo

    def to_dict(self) -> dict:
        return {"normals": self.normals.tolist(), "offsets": self.offsets.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "PolyhedralSet":
        return cls(np.array(d["normals"], float), np.array(d["offsets"], float))


def _chord_set(offset_m: float, params: SafetyParams, floor_m: float, n_facets: int) -> PolyhedralSet:
    # boundary g(v) = max(floor, v^2 / (2 a_min) + offset) is convex, so chords
    # between points on the curve lie inside the exact set.
    if n_facets < 2:
        raise ValueError("n_facets must be >= 2")
    a = params.a_min_brake_m_s2
    v_max = params.v_max_m_s
    rows = [(-1.0, 0.0)]
    rhs = [-floor_m]
    v_star = math.sqrt(max(0.0, 2 * a * (floor_m - offset_m)))
    if v_star < v_max:
        grid = np.linspace(v_star, v_max, n_facets + 1)
        f = grid ** 2 / (2 * a) + offset_m
        for j in range(n_facets):
            slope = (f[j + 1] - f[j]) / (grid[j + 1] - grid[j])
            # h >= f_j + slope (v - v_j)
            rows.append((-1.0, slope))
            rhs.append(slope * grid[j] - f[j])
    rows += [(0.0, -1.0), (0.0, 1.0)]
    rhs += [0.0, v_max]
    return PolyhedralSet(np.array(rows), np.array(rhs))


def polyhedral_front_set(vF0_m_s: float, params: SafetyParams, n_facets: int = 16,
                         d_min: Optional[float] = None) -> PolyhedralSet:
    """Inner polyhedral approximation of the front-vehicle terminal set."""
    d_min = params.d_min_front_m if d_min is None else d_min
    offset = d_min - vF0_m_s ** 2 / (2 * params.a_max_brake_m_s2)
    return _chord_set(offset, params, d_min, n_facets)


def polyhedral_stopbar_set(params: SafetyParams, n_facets: int = 16,
                           d_min: Optional[float] = None) -> PolyhedralSet:
    d_min = params.d_min_stopbar_m if d_min is None else d_min
    return _chord_set(d_min, params, d_min, n_facets)


class FrontSetFamily:
    """Precomputed front sets on a front-velocity grid.

    Lookup rounds the queried velocity down to the grid, which can only
    shrink the set (conservative).
    """

    def __init__(self, params: SafetyParams, spacing_m_s: float = 0.5, n_facets: int = 16,
                 d_min: Optional[float] = None, sets: Optional[Iterable[PolyhedralSet]] = None):
        self.params = params
        self.spacing = float(spacing_m_s)
        self.n_facets = int(n_facets)
        self.d_min = params.d_min_front_m if d_min is None else float(d_min)
        n = int(round(params.v_max_m_s / self.spacing)) + 1
        self.grid = self.spacing * np.arange(n)
        if sets is None:
            sets = [polyhedral_front_set(v, params, self.n_facets, self.d_min) for v in self.grid]
        self.sets = list(sets)
        if len(self.sets) != len(self.grid):
            raise ValueError("set count does not match velocity grid")

    def grid_velocity(self, vF0_m_s: float) -> float:
        k = int(math.floor(max(vF0_m_s, 0.0) / self.spacing + 1e-9))
        return float(self.grid[min(k, len(self.grid) - 1)])

    def select(self, vF0_m_s: float) -> PolyhedralSet:
        k = int(math.floor(max(vF0_m_s, 0.0) / self.spacing + 1e-9))
        return self.sets[min(k, len(self.sets) - 1)]

    def to_dict(self) -> dict:
        return {
            "format": FAMILY_FORMAT,
            "version": FAMILY_VERSION,
            "params": asdict(self.params),
            "spacing_m_s": self.spacing,
            "n_facets": self.n_facets,
            "d_min_m": self.d_min,
            "sets": [s.to_dict() for s in self.sets],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def from_dict(cls, d: dict) -> "FrontSetFamily":
        if d.get("format") != FAMILY_FORMAT:
            raise ValueError("not a front-set family file")
        if d.get("version") != FAMILY_VERSION:
            raise ValueError(f"unsupported family version {d.get('version')}")
        return cls(SafetyParams(**d["params"]), d["spacing_m_s"], d["n_facets"], d["d_min_m"],
                   [PolyhedralSet.from_dict(s) for s in d["sets"]])

    @classmethod
    def load(cls, path) -> "FrontSetFamily":
        return cls.from_dict(json.loads(Path(path).read_text()))


def should_stop_at_light(v_L: float, d_rear_m: float, dTL_m: float, phase: Phase,
                         c_r_s: float, params: SafetyParams) -> LightDecision:
    """Leader's go/stop decision for the nearest upcoming light."""
    if c_r_s < 0:
        raise ValueError("time remaining must be nonnegative")
    phase = Phase(phase)
    if phase == Phase.RED:
        return LightDecision.STOP
    if phase == Phase.GREEN:
        if v_L <= params.v_low_m_s:
            go = c_r_s >= params.t_min_s
        else:
            go = c_r_s * v_L >= d_rear_m + dTL_m + params.intersection_length_m
        if go:
            return LightDecision.PROCEED
    # stop indicated on green, or yellow: stop only if it can be done safely
    if v_L ** 2 / (2 * params.a_min_brake_m_s2) <= dTL_m - params.d_min_stopbar_m:
        return LightDecision.STOP
    return LightDecision.MUST_RUN
