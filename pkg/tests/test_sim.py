import numpy as np
import pytest

from platoonsim.mpc import MpcParams
from platoonsim.sim import (BUILTIN, PublicVehicle, RunTrace, Scenario, TrafficLight,
                            apply_overrides, load_scenario, nearest_upcoming_light,
                            radar_measure, run, stop_and_go_scenario)


def test_radar_geometry():
    # front bumpers at 0 and 20.5 with a 4.5 m car ahead
    assert radar_measure(0.0, 20.5) == pytest.approx(16.0)
    assert radar_measure(0.0, None) is None
    assert radar_measure(0.0, 200.0) is None
    with pytest.raises(ValueError):
        radar_measure(0.0, 20.5, noise_std_m=1.0)
    rng = np.random.default_rng(0)
    samples = [radar_measure(0.0, 20.5, noise_std_m=0.5, rng=rng) for _ in range(4000)]
    assert np.mean(samples) == pytest.approx(16.0, abs=0.05)


def test_nearest_upcoming_light():
    lights = [TrafficLight(0, 180.0), TrafficLight(1, 430.0)]
    assert nearest_upcoming_light(lights, 200.0).light_id == 1
    assert nearest_upcoming_light(lights, 180.0).light_id == 0
    assert nearest_upcoming_light(lights, 500.0) is None


def test_light_and_public_vehicle_validation():
    with pytest.raises(ValueError):
        TrafficLight(0, 10.0, red_s=30, yellow_s=5, green_s=25, cycle_length_s=70)
    with pytest.raises(ValueError):
        PublicVehicle([0.0, 1.0], [2.0], 50.0)
    with pytest.raises(ValueError):
        PublicVehicle([0.0, 1.0], [2.0, -1.0], 50.0)
    pv = PublicVehicle([0.0, 10.0], [2.0, 0.0], 50.0)
    assert pv.velocity_at(5.0) == pytest.approx(1.0)
    assert pv.velocity_at(30.0) == 0.0


def test_scenario_validation():
    with pytest.raises(ValueError):
        Scenario(n_vehicles=0)
    with pytest.raises(ValueError):
        Scenario(estimation="lidar")
    with pytest.raises(ValueError):
        Scenario(n_vehicles=3, initial_gaps_m=[6.0])
    sc = Scenario(lights=[TrafficLight(1, 400.0), TrafficLight(0, 100.0)])
    assert [l.light_id for l in sc.lights] == [0, 1]


@pytest.mark.parametrize("name", sorted(BUILTIN))
def test_scenario_dict_roundtrip(name):
    sc = BUILTIN[name]()
    assert Scenario.from_dict(sc.to_dict()) == sc
    with pytest.raises(ValueError):
        Scenario.from_dict(dict(sc.to_dict(), bogus=1))


def test_overrides_and_yaml(tmp_path):
    cfg = apply_overrides({"mpc": {"trust_horizon": 20}}, ["mpc.trust_horizon=0", "seed=4"])
    assert cfg == {"mpc": {"trust_horizon": 0}, "seed": 4}
    with pytest.raises(ValueError):
        apply_overrides({}, ["seed"])
    path = tmp_path / "s.yaml"
    path.write_text("builtin: stop_and_go\nduration_s: 20\nmpc:\n  d_des_m: 7.0\n")
    sc = load_scenario(path, ["seed=9"])
    assert sc.name == "stop_and_go" and sc.duration_s == 20 and sc.seed == 9
    assert sc.mpc.d_des_m == 7.0
    assert sc.mpc.trust_horizon == MpcParams().trust_horizon
    assert len(sc.lights) == len(stop_and_go_scenario().lights)


def test_leader_holds_speed_on_empty_road():
    tr = run(Scenario(n_vehicles=1, mpc=MpcParams(v_des_m_s=15.0), duration_s=25.0))
    assert tr.summary["breach"] is None
    v = tr.column("v0")
    np.testing.assert_allclose(v[-50:], 15.0, rtol=0.02)
    assert np.all(np.diff(tr.column("p0")) >= 0)


def test_collision_is_reported_as_breach():
    tr = run(Scenario(n_vehicles=2, initial_gaps_m=[-1.0], duration_s=2.0))
    assert tr.summary["breach"]["reason"].startswith("collision")


def test_trace_roundtrip(tmp_path):
    tr = run(Scenario(n_vehicles=2, initial_velocity_m_s=8.0, duration_s=2.0,
                      record_messages=True))
    out = tr.write(tmp_path / "run")
    assert {p.name for p in out.iterdir()} == {"trace.csv", "summary.json", "fsm_log.csv",
                                              "messages.ndjson"}
    back = RunTrace.read(out)
    assert back.columns == tr.columns
    assert back.to_csv() == tr.to_csv()
    assert back.summary == tr.summary
    np.testing.assert_allclose(back.column("v1"), tr.column("v1"), atol=1e-6)


def test_gps_estimation_keeps_the_gap():
    tr = run(Scenario(n_vehicles=3, duration_s=3.0, initial_velocity_m_s=10.0,
                      estimation="gps", seed=5))
    assert tr.summary["breach"] is None
    assert tr.summary["min_follower_headway_m"] >= 5.9


@pytest.mark.slow
def test_stop_and_go_corridor():
    tr = run(stop_and_go_scenario())
    s = tr.summary
    assert s["breach"] is None and s["solver_non_optimal"] == 0
    assert s["min_leader_headway_m"] >= 5.9
    assert s["min_stopped_dist_to_stopbar_m"] >= 4.9
    # the platoon stops at both timed lights and closes up behind the halted car
    assert min(tr.column("v0")[300:400]) < 0.05
    gap = tr.column("pub_gap")
    assert gap[-1] == pytest.approx(6.0, abs=0.2)
    assert tr.column("v0")[-1] < 0.05
