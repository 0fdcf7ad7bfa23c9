import logging

import pytest
from hypothesis import given, strategies as st

from platoonsim.protocol import (Bus, BusConfig, Mailbox, MessageKind, Phase, PlatoonTopology,
                                 V2VMessage, V2VPayload, light_phase, load_ndjson, route,
                                 spat_from_light)
from platoonsim.sim import TrafficLight


def expected_edges(n, kind):
    """Hand-written message flow graph: set of (sender, receiver)."""
    if kind == "forecast":
        return ({(0, j) for j in range(1, n)}
                | {(i, i + 1) for i in range(1, n - 1)})
    if kind == "gps":
        return {(n - 1, 0)}
    if kind == "radar":
        return {(i, j) for i in range(1, n) for j in range(i + 1, n)}
    raise AssertionError(kind)


@pytest.mark.parametrize("n", [2, 3, 4, 5])
@pytest.mark.parametrize("kind", ["forecast", "gps", "radar"])
def test_flow_graph(n, kind):
    topo = PlatoonTopology(n)
    edges = {(s, r) for s in range(n) for r in topo.recipients(s, MessageKind(kind))}
    assert edges == expected_edges(n, kind)


def test_four_vehicle_examples():
    topo = PlatoonTopology(4)
    assert topo.recipients(0, MessageKind.FORECAST) == [1, 2, 3]
    assert topo.recipients(3, MessageKind.GPS) == [0]
    assert topo.recipients(1, MessageKind.GPS) == []
    assert topo.recipients(2, MessageKind.STATUS) == [0, 1, 3]
    assert topo.recipients(0, MessageKind.PLAN) == [1, 2, 3]
    assert topo.recipients(2, MessageKind.ACK) == [0]


def test_unknown_sender_dropped(caplog):
    with caplog.at_level(logging.WARNING):
        assert route(V2VMessage(7, MessageKind.FORECAST, 0), PlatoonTopology(3)) == []
    assert "unknown sender" in caplog.text


def test_sender_roles():
    assert V2VMessage(0, MessageKind.STATUS, 0, platoon_size=3).sender_role == "leader"
    assert V2VMessage(2, MessageKind.STATUS, 0, platoon_size=3).sender_role == "rear"
    assert V2VMessage(1, MessageKind.STATUS, 0, platoon_size=3).sender_role == "follower1"


def test_latency_and_staleness():
    bus = Bus(PlatoonTopology(3), BusConfig(latency_steps=3))
    box = Mailbox()
    for k in range(10):
        bus.post(V2VMessage(0, MessageKind.FORECAST, k, V2VPayload(velocity_forecast=[k])), k)
        box.accept(bus.deliver(k).get(1, []), k)
        if k < 3:
            assert box.get(0, MessageKind.FORECAST) is None
        else:
            assert box.staleness(0, MessageKind.FORECAST, k) == 3
            assert box.get(0, MessageKind.FORECAST).payload.velocity_forecast == [k - 3]


def test_per_link_latency_and_drop():
    cfg = BusConfig(latency_steps=0, link_latency={(0, 2): 2},
                    drop=lambda s, r, m, t: r == 1 and t == 0)
    bus = Bus(PlatoonTopology(3), cfg)
    bus.post(V2VMessage(0, MessageKind.FORECAST, 0), 0)
    assert bus.deliver(0) == {}
    assert bus.pending() == 1
    assert list(bus.deliver(2)) == [2]
    with pytest.raises(ValueError):
        bus.deliver(1)
    with pytest.raises(ValueError):
        BusConfig(latency_steps=-1)


def test_delivery_order_is_deterministic():
    bus = Bus(PlatoonTopology(3))
    bus.post(V2VMessage(2, MessageKind.STATUS, 0), 0)
    bus.post(V2VMessage(0, MessageKind.STATUS, 0), 0)
    bus.post(V2VMessage(0, MessageKind.FORECAST, 0), 0)
    got = [(m.sender_id, m.kind) for m in bus.deliver(0)[1]]
    assert got == [(0, MessageKind.FORECAST), (0, MessageKind.STATUS), (2, MessageKind.STATUS)]


def test_message_timeout_age():
    box = Mailbox(start_tick=0)
    box.accept([V2VMessage(0, MessageKind.FORECAST, 2)], 2)
    assert box.age(0, MessageKind.FORECAST, 8) == 6
    assert box.age(1, MessageKind.FORECAST, 8) == 8
    box.reset_clock(7)
    assert box.age(1, MessageKind.FORECAST, 8) == 1


def test_trace_export(tmp_path):
    bus = Bus(PlatoonTopology(2), record=True)
    bus.post(V2VMessage(0, MessageKind.FORECAST, 0, V2VPayload(velocity_forecast=[1.0, 2.0])), 0)
    bus.deliver(0)
    bus.export_ndjson(tmp_path / "m.ndjson")
    recs = load_ndjson(tmp_path / "m.ndjson")
    assert len(recs) == 1 and recs[0]["receiver"] == 1
    msg = V2VMessage.from_record(recs[0], 2)
    assert msg.payload.velocity_forecast == [1.0, 2.0]
    assert msg.kind == MessageKind.FORECAST


def test_light_phase_cycle():
    assert light_phase(30, 5, 25, 0, 40.0) == (Phase.GREEN, 15.0)
    assert light_phase(30, 5, 25, 0, 0.0) == (Phase.RED, 30.0)
    assert light_phase(30, 5, 25, 0, 30.0) == (Phase.GREEN, 25.0)
    assert light_phase(30, 5, 25, 0, 57.0) == (Phase.YELLOW, 3.0)
    assert light_phase(30, 5, 25, 10, 70.0) == (Phase.RED, 30.0)


@given(st.floats(0, 1000), st.floats(-100, 100))
def test_light_phase_remaining_bounded(t, offset):
    phase, rem = light_phase(30, 5, 25, offset, t)
    limit = {Phase.RED: 30, Phase.GREEN: 25, Phase.YELLOW: 5}[phase]
    assert 0 < rem <= limit + 1e-9


def test_spat_range():
    light = TrafficLight(0, 430.0, comm_range_m=300.0, red_s=30, yellow_s=5, green_s=25)
    assert spat_from_light(light, 100.0, 0) is None
    msg = spat_from_light(light, 200.0, 400)
    assert msg.phase == Phase.GREEN and msg.time_remaining_s == pytest.approx(15.0)
    assert msg.stopbar_position_m == 430.0
