import numpy as np
import pytest

from platoonsim.analysis import (InvariantLimits, ThroughputConfig, crossing_times,
                                 first_crossing, stopped_stopbar_distances, sweep_table,
                                 throughput_vph, trust_sweep, validate_trace)
from platoonsim.sim import RunTrace, run, throughput_scenario


def synthetic_trace(n=3, v=10.0, rear_offset=21.0, dt=0.1, ticks=80, **extra):
    """Constant-speed platoon with the leader at 0 and the rear ``rear_offset`` behind."""
    t = np.arange(ticks) * dt
    cols = {"tick": np.arange(ticks), "t": t}
    for i in range(n):
        back = rear_offset * i / max(n - 1, 1)
        cols[f"p{i}"] = v * t - back
        cols[f"v{i}"] = np.full(ticks, v)
        gap = rear_offset / max(n - 1, 1) - 4.5 if i else np.nan
        cols[f"h{i}"] = np.full(ticks, gap)
        cols[f"fsm{i}"] = ["PlanActive"] * ticks
    cols.update({"pub_gap": np.full(ticks, np.nan), "d_tl": np.full(ticks, np.nan),
                 "phase": [""] * ticks})
    cols.update(extra)
    names = list(cols)
    rows = []
    for k in range(ticks):
        row = []
        for c in names:
            x = cols[c][k]
            row.append("" if isinstance(x, float) and np.isnan(x) else x)
        rows.append(row)
    return RunTrace(names, rows, [], {"n_vehicles": n, "dt_s": dt})


def test_synthetic_crossing_times():
    t_L, t_r = crossing_times(synthetic_trace(), 20.0)
    assert t_L == pytest.approx(2.0, abs=1e-9)
    assert t_r == pytest.approx(4.1, abs=1e-9)


def test_crossing_interpolates_between_ticks():
    t = np.arange(0, 3, 0.1)
    p = 7.3 * t
    tc = first_crossing(t, p, 20.0)
    assert abs(tc - 20.0 / 7.3) < 0.1
    assert tc == pytest.approx(20.0 / 7.3, abs=1e-9)    # exact for linear motion
    assert first_crossing(t, p, 1e3) is None
    assert first_crossing(t, p, -1.0) == 0.0


def test_crossing_errors():
    with pytest.raises(ValueError):
        crossing_times(synthetic_trace(n=1))
    with pytest.raises(ValueError, match="never reaches"):
        crossing_times(synthetic_trace(ticks=5))


def test_throughput_formula():
    assert throughput_vph(0.0, 3600.0, 2) == pytest.approx(1.0)
    # reference vph values are rounded to 0.1, so a 4-digit gap reproduces them to 0.5 vph
    assert throughput_vph(10.0, 11.6605, 3) == pytest.approx(4336.4, abs=0.5)
    assert throughput_vph(10.0, 14.2093, 3) == pytest.approx(1710.5, abs=0.05)
    with pytest.raises(ValueError):
        throughput_vph(0.0, 1.0, 1)
    with pytest.raises(ValueError):
        throughput_vph(2.0, 2.0, 3)


def test_throughput_config_positions():
    cfg = ThroughputConfig()
    assert cfg.initial_positions(3) == [-5.0, -15.5, -26.0]
    with pytest.raises(ValueError):
        ThroughputConfig(intersection_length_m=0.0)


def test_scenario_start_matches_standing_start_geometry():
    sc = throughput_scenario(0)
    cfg = ThroughputConfig(d_min_m=sc.mpc.d_min_stopbar_m, d_des_m=sc.mpc.d_des_m)
    tr = run(throughput_scenario(0, duration_s=0.1))
    start = [tr.column(f"p{i}")[0] for i in range(3)]
    np.testing.assert_allclose(start, cfg.initial_positions(3))


def test_validate_clean_trace():
    assert validate_trace(synthetic_trace(rear_offset=2 * 10.5)) == []


def test_validate_reports_each_violation():
    tr = synthetic_trace(rear_offset=2 * 9.0)      # 4.5 m gaps
    bad = validate_trace(tr)
    assert any("vehicle 1: headway 4.500" in b for b in bad)
    assert any("vehicle 2: headway" in b for b in bad)
    assert validate_trace(tr, InvariantLimits(d_min_front_m=4.5)) == []
    fast = synthetic_trace(v=21.0, rear_offset=21.0)
    assert any("above limit" in b for b in validate_trace(fast))
    crash = synthetic_trace(rear_offset=2.0)
    assert any("collision" in b for b in validate_trace(crash))
    tr.summary["breach"] = {"tick": 3, "reason": "boom"}
    assert "simulation breach at tick 3: boom" in validate_trace(tr)


def test_stopped_distance_check():
    ticks = 30
    tr = synthetic_trace(v=0.0, rear_offset=21.0, ticks=ticks,
                         d_tl=np.full(ticks, 4.7), phase=["red"] * ticks)
    np.testing.assert_allclose(stopped_stopbar_distances(tr), 4.7)
    assert any("stop bar" in b for b in validate_trace(tr))
    assert validate_trace(tr, InvariantLimits(tolerance_m=0.35)) == []


def test_single_entry_sweep_equals_plain_run():
    sc = throughput_scenario(20)
    (res,) = trust_sweep(sc, [20])
    t_L, t_r = crossing_times(run(sc))
    assert (res.t_L_s, res.t_rear_s) == (t_L, t_r)
    assert "1.00" in sweep_table([res])
    assert sweep_table([]) == ""


@pytest.mark.slow
def test_sweep_is_nondecreasing_in_trust_horizon():
    res = trust_sweep(throughput_scenario(), [0, 10, 15, 20])
    vph = [r.vph for r in res]
    assert [r.trust_horizon for r in res] == [0, 10, 15, 20]
    # F=15 and F=20 saturate; they differ only at the solver tolerance
    assert all(b >= a - 0.1 for a, b in zip(vph, vph[1:]))
    assert vph[-1] > vph[0]
