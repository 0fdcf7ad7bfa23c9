import numpy as np
import pytest
from hypothesis import given, strategies as st

from platoonsim.estimation import (GpsFix, LeaderDistanceEstimate, estimate_s_gps,
                                   estimate_s_radar_chain, fuse_s_estimate, predict_s_estimate)

from oracles import scalar_kalman


def test_gps_estimate():
    e = estimate_s_gps(21.0, 1, 4.5)
    assert e.s_hat_m == pytest.approx(16.5)
    assert e.method == "gps" and not e.clamped
    assert estimate_s_gps(21.0, 2, 4.5, gps_std_m=3.0).variance_m2 == pytest.approx(18.0)


def test_gps_estimate_clamps_and_validates():
    e = estimate_s_gps(3.0, 1, 4.5)
    assert e.s_hat_m == 0.0 and e.clamped
    with pytest.raises(ValueError):
        estimate_s_gps(20.0, 0, 4.5)
    with pytest.raises(ValueError):
        estimate_s_gps(20.0, 1, 0.0)
    with pytest.raises(ValueError):
        GpsFix(0.0, -1.0)


def test_radar_chain():
    assert estimate_s_radar_chain([6.0]).s_hat_m == 6.0
    assert estimate_s_radar_chain([6.0, 6.1]).s_hat_m == pytest.approx(12.1)
    assert estimate_s_radar_chain([6.0, 6.1], radar_std_m=0.5).variance_m2 == pytest.approx(0.5)
    with pytest.raises(ValueError):
        estimate_s_radar_chain([])


@given(st.lists(st.floats(0.0, 100.0), min_size=1, max_size=6))
def test_radar_chain_equals_geometry(headways):
    # bumper-to-bumper gaps between consecutive vehicles add up to s_i
    L = 4.5
    pos = [0.0]
    for h in headways:
        pos.append(pos[-1] - L - h)
    i = len(headways)
    s_true = pos[0] - pos[i] - i * L
    assert estimate_s_radar_chain(headways).s_hat_m == pytest.approx(s_true, abs=1e-9)


def test_filter_matches_textbook_recursion():
    rng = np.random.default_rng(3)
    sigma, dt, q = 3.0, 0.1, 0.1
    s_true = 12.0
    meas = s_true + rng.normal(0.0, sigma * np.sqrt(2), 40)
    est = estimate_s_gps(meas[0] + 9.0, 2, 4.5, sigma)
    ref = scalar_kalman(est.s_hat_m, est.variance_m2, meas[1:], 2 * sigma ** 2, q ** 2 * dt)
    for z, (x_ref, p_ref) in zip(meas[1:], ref):
        est = fuse_s_estimate(est, 10.0, 10.0, estimate_s_gps(z + 9.0, 2, 4.5, sigma), dt, q)
        assert est.s_hat_m == pytest.approx(x_ref, abs=1e-9)
        assert est.variance_m2 == pytest.approx(p_ref, rel=1e-12)


def test_posterior_std_falls_below_one_metre():
    rng = np.random.default_rng(0)
    est = estimate_s_gps(12.0 + 4.5 + rng.normal(0, 3), 1, 4.5, 3.0)
    stds = []
    for _ in range(20):
        z = estimate_s_gps(12.0 + 4.5 + rng.normal(0, 3), 1, 4.5, 3.0)
        est = fuse_s_estimate(est, 0.0, 0.0, z, 0.1)
        stds.append(np.sqrt(est.variance_m2))
    assert stds[-1] < 1.0
    assert all(a >= b for a, b in zip(stds, stds[1:]))


def test_prediction_integrates_closing_speed():
    est = LeaderDistanceEstimate(20.0, 0.5, "gps")
    for k in range(1, 6):
        est = predict_s_estimate(est, 9.0, 10.0, 0.1)
        assert est.s_hat_m == pytest.approx(20.0 - 0.1 * k)
    assert est.variance_m2 > 0.5
    with pytest.raises(ValueError):
        predict_s_estimate(est, 9.0, 10.0, 0.0)


def test_noise_free_measurement_is_taken_verbatim():
    prev = LeaderDistanceEstimate(10.0, 0.0, "radar_chain")
    out = fuse_s_estimate(prev, 10.0, 10.0, estimate_s_radar_chain([6.0, 6.0]), 0.1, 0.0)
    assert out.s_hat_m == 12.0 and out.variance_m2 == 0.0
