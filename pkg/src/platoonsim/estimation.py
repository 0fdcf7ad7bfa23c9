"""Distance-to-leader estimation for followers.

Two measurement routes: GPS arc-length difference to the leader minus the
vehicle lengths in between, or the sum of radar headways shared along the
chain.  A scalar Kalman filter fuses either route with the relative-velocity
prediction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

log = logging.getLogger(__name__)

GPS = "gps"
RADAR_CHAIN = "radar_chain"


@dataclass(frozen=True)
class GpsFix:
    position_m: float
    noise_std_m: float = 3.0

    def __post_init__(self):
        if self.noise_std_m < 0:
            raise ValueError("noise_std_m must be nonnegative")


@dataclass(frozen=True)
class LeaderDistanceEstimate:
    s_hat_m: float
    variance_m2: float
    method: str
    clamped: bool = False

    def __post_init__(self):
        if self.variance_m2 < 0:
            raise ValueError("variance must be nonnegative")


def estimate_s_gps(d_center_to_center_m: float, vehicle_index_i: int, vehicle_length_m: float,
                   gps_std_m: float = 0.0) -> LeaderDistanceEstimate:
    """Gap to the leader from a GPS distance between reference points.

    ``gps_std_m`` is the per-fix noise; the difference of two fixes has twice
    that variance.
    """
    if vehicle_index_i < 1:
        raise ValueError("follower index must be >= 1")
    if vehicle_length_m <= 0:
        raise ValueError("vehicle length must be positive")
    s = d_center_to_center_m - vehicle_index_i * vehicle_length_m
    clamped = s < 0
    if clamped:
        log.debug("GPS gap estimate %.3f m clamped to 0", s)
        s = 0.0
    return LeaderDistanceEstimate(s, 2.0 * gps_std_m ** 2, GPS, clamped)


def estimate_s_radar_chain(headway_measurements_m: Sequence[float],
                           radar_std_m: float = 0.0) -> LeaderDistanceEstimate:
    """Gap to the leader as the sum of radar headways of every vehicle in between."""
    h = list(headway_measurements_m)
    if not h:
        raise ValueError("need at least one headway measurement")
    s = float(sum(h))
    clamped = s < 0
    return LeaderDistanceEstimate(max(s, 0.0), len(h) * radar_std_m ** 2, RADAR_CHAIN, clamped)


def fuse_s_estimate(prev: LeaderDistanceEstimate, leader_velocity_m_s: float,
                    ego_velocity_m_s: float, measurement: LeaderDistanceEstimate, dt_s: float,
                    process_std: float = 0.1) -> LeaderDistanceEstimate:
    """One predict/update cycle of the scalar gap filter.

    Prediction integrates ``s' = v_leader - v_ego``; process noise is
    ``process_std`` in m per sqrt(s).
    """
    if not dt_s > 0:
        raise ValueError("dt_s must be positive")
    s_pred = prev.s_hat_m + (leader_velocity_m_s - ego_velocity_m_s) * dt_s
    p_pred = prev.variance_m2 + process_std ** 2 * dt_s
    r = measurement.variance_m2
    if p_pred + r == 0.0:
        return LeaderDistanceEstimate(measurement.s_hat_m, 0.0, measurement.method)
    k = p_pred / (p_pred + r)
    s = s_pred + k * (measurement.s_hat_m - s_pred)
    p = (1.0 - k) * p_pred
    return LeaderDistanceEstimate(max(s, 0.0), p, measurement.method, s < 0)


def predict_s_estimate(prev: LeaderDistanceEstimate, leader_velocity_m_s: float,
                       ego_velocity_m_s: float, dt_s: float,
                       process_std: float = 0.1) -> LeaderDistanceEstimate:
    """Prediction only, for ticks without a fresh measurement."""
    if not dt_s > 0:
        raise ValueError("dt_s must be positive")
    s = prev.s_hat_m + (leader_velocity_m_s - ego_velocity_m_s) * dt_s
    return LeaderDistanceEstimate(max(s, 0.0), prev.variance_m2 + process_std ** 2 * dt_s,
                                  prev.method, s < 0)
