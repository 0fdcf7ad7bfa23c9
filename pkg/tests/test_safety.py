import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from platoonsim.protocol import Phase
from platoonsim.safety import (FrontSetFamily, LightDecision, PolyhedralSet, PriorityObstacle,
                               SafetyParams, check_priority_implication, front_boundary, in_front_set,
                               in_stopbar_set, polyhedral_front_set, polyhedral_stopbar_set,
                               priority_obstacle, should_stop_at_light, stopbar_boundary)

S = SafetyParams()

# reference samples of the stop-bar boundary for d_min = 5 m (distance, velocity)
STOPBAR_REFERENCE_POINTS = [
    (5.01600000002145, 0.320000000218155), (6.60000000007494, 3.2000000000725),
    (11.4000000000015, 6.40000000001336), (19.3999999995795, 9.59999999985357),
    (30.6000000010463, 12.8000000002618), (45.0000000016735, 16.0000000003356),
    (62.6000000028944, 19.2000000004849),
]


def test_default_braking_limits():
    assert S.a_min_brake_m_s2 == 3.2
    assert S.a_max_brake_m_s2 == 5.0912
    assert S.d_min_common_m == 5.0
    with pytest.raises(ValueError):
        SafetyParams(a_min_brake_m_s2=6.0)


def test_front_boundary_closed_form():
    b = front_boundary(20.0, 14.0, S)
    assert b == pytest.approx(400 / 6.4 - 196 / 10.1824 + 6, abs=1e-12)
    assert b == pytest.approx(49.251, abs=1e-3)
    assert in_front_set(50.0, 20.0, 14.0, S)
    assert not in_front_set(49.0, 20.0, 14.0, S)
    # a fast front vehicle never lowers the floor below d_min
    assert front_boundary(0.0, 20.0, S) == 6.0
    with pytest.raises(ValueError):
        in_front_set(10.0, -1.0, 0.0, S)


def test_stopbar_anchor_points():
    assert stopbar_boundary(16.0, S) == pytest.approx(45.0, abs=1e-6)
    assert stopbar_boundary(6.4, S) == pytest.approx(11.4, abs=1e-6)
    assert stopbar_boundary(0.0, S) == 5.0
    for d, v in STOPBAR_REFERENCE_POINTS:
        assert abs(stopbar_boundary(v, S) - d) < 1e-6
    assert in_stopbar_set(45.0, 16.0, S) and not in_stopbar_set(44.9, 16.0, S)


def test_priority_obstacle_examples():
    assert priority_obstacle(30, 10, 50, True, True, S) == PriorityObstacle.FRONT_VEHICLE
    assert priority_obstacle(45, 10, 50, True, True, S) == PriorityObstacle.INTERSECTION
    assert priority_obstacle(45, 10, 50, False, True, S) == PriorityObstacle.FRONT_VEHICLE
    assert priority_obstacle(45, 10, 50, True, False, S) == PriorityObstacle.INTERSECTION
    assert priority_obstacle(45, 10, 50, False, False, S) == PriorityObstacle.NONE


def test_priority_implication_random_samples():
    rng = np.random.default_rng(11)
    n = 20000
    ok = check_priority_implication(rng.uniform(6, 150, n), rng.uniform(0, 20, n),
                            rng.uniform(0, 20, n), rng.uniform(5, 150, n), S)
    assert ok.all()


@settings(max_examples=300)
@given(st.floats(6, 150), st.floats(0, 20), st.floats(0, 20), st.floats(5, 150))
def test_priority_implication_property(h, v, vF, dtl):
    assert check_priority_implication(h, v, vF, dtl, S)


def test_polyhedral_front_set_is_inner():
    rng = np.random.default_rng(5)
    h = rng.uniform(0, 150, 40000)
    v = rng.uniform(0, 20, 40000)
    for vF in (0.0, 7.3, 14.0, 20.0):
        poly = polyhedral_front_set(vF, S)
        inside = poly.contains(h, v)
        assert inside.sum() > 1000
        assert in_front_set(h[inside], v[inside], vF, S).all()


def test_polyhedral_stopbar_set_is_inner():
    rng = np.random.default_rng(6)
    d = rng.uniform(0, 150, 40000)
    v = rng.uniform(0, 20, 40000)
    inside = polyhedral_stopbar_set(S).contains(d, v)
    assert in_stopbar_set(d[inside], v[inside], S).all()


def test_polyhedral_boundary_converges_from_above():
    exact = front_boundary(20.0, 14.0, S)
    prev = np.inf
    for k in (2, 8, 32, 128, 512):
        b = polyhedral_front_set(14.0, S, n_facets=k).boundary_distance(20.0)
        assert exact - 1e-9 <= b <= prev + 1e-12
        prev = b
    assert prev - exact < 1e-3
    # chords touch the curve at the breakpoints, v = v_max among them
    assert polyhedral_front_set(14.0, S).boundary_distance(20.0) == pytest.approx(exact)


def test_polyhedral_set_validation_and_roundtrip():
    with pytest.raises(ValueError):
        PolyhedralSet(np.zeros((3, 2)), np.zeros(2))
    with pytest.raises(ValueError):
        polyhedral_front_set(5.0, S, n_facets=1)
    p = polyhedral_stopbar_set(S)
    q = PolyhedralSet.from_dict(json.loads(json.dumps(p.to_dict())))
    np.testing.assert_array_equal(p.normals, q.normals)
    np.testing.assert_array_equal(p.offsets, q.offsets)


def test_front_set_family_lookup_is_conservative(tmp_path):
    fam = FrontSetFamily(S, spacing_m_s=0.5)
    assert fam.grid_velocity(7.49) == 7.0
    assert fam.grid_velocity(7.5) == 7.5
    assert fam.grid_velocity(50.0) == 20.0
    v = np.linspace(0, 20, 41)
    for vF in (3.3, 12.74):
        lo = fam.select(vF)
        exact = polyhedral_front_set(vF, S)
        assert all(lo.boundary_distance(x) >= exact.boundary_distance(x) - 1e-9 for x in v)
    path = tmp_path / "family.json"
    fam.save(path)
    back = FrontSetFamily.load(path)
    np.testing.assert_array_equal(back.select(9.0).offsets, fam.select(9.0).offsets)
    with pytest.raises(ValueError):
        FrontSetFamily.from_dict({"format": "other"})


def test_light_decisions():
    # exactly enough green time for the whole platoon: 15 * 10 = 30 + 100 + 20
    assert should_stop_at_light(15, 30, 100, Phase.GREEN, 10.0, S) == LightDecision.PROCEED
    assert should_stop_at_light(15, 30, 100, Phase.GREEN, 9.9, S) == LightDecision.STOP
    assert should_stop_at_light(15, 30, 35, Phase.GREEN, 1.0, S) == LightDecision.MUST_RUN
    assert should_stop_at_light(0, 30, 5, Phase.GREEN, 6.0, S) == LightDecision.PROCEED
    assert should_stop_at_light(0, 30, 5, Phase.GREEN, 5.9, S) == LightDecision.STOP
    assert should_stop_at_light(15, 30, 100, Phase.YELLOW, 3.0, S) == LightDecision.STOP
    assert should_stop_at_light(15, 30, 20, Phase.YELLOW, 3.0, S) == LightDecision.MUST_RUN
    assert should_stop_at_light(15, 30, 20, Phase.RED, 3.0, S) == LightDecision.STOP
    with pytest.raises(ValueError):
        should_stop_at_light(15, 30, 20, Phase.RED, -1.0, S)
