from collections import Counter
from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from irissim.engine import (DriftSpec, FailureEvent, LossSpec, Scenario, ScenarioError, Simulation,
                            StopKind, StopSpec, Traffic, inject_failure, out_of_band_signal,
                            route_chain, run, substream)
from irissim.metrics import recovery_time
from irissim.protocol import NONE, ProtocolConfig, Route, RouteEnd, TimingConfig
from irissim.topology import Topology, TopologySpec

SMALL = TopologySpec(kind="linear", n_nodes=40, spacing_km=0.5, range_km=3.0)


def small(seed=0, **kw):
    kw.setdefault("max_frames", 800)
    return Scenario(topology=SMALL, seed=seed, **kw)


def three_node(seed, frameout=1000):
    return Scenario(topology=TopologySpec(kind="linear", n_nodes=3, spacing_km=15.0),
                    proto=ProtocolConfig(frameout=frameout), seed=seed, max_frames=600)


def _in_window(slot, start, frame):
    return (slot - ((start - 1 + 4 * frame) % 400 + 1)) % 400 < 4


@pytest.mark.parametrize("seed", range(6))
def test_three_node_hand_trace(seed):
    """Relay hears the origin when its scan reaches slot 1, joins the next
    frame and pings at slot 3; the end base decodes that ping the first frame
    its own scan covers slot 3."""
    w_relay = substream(seed, 1, "init").randint(1, 400)
    w_end = substream(seed, 2, "init").randint(1, 400)
    f_join = next(f for f in range(100) if _in_window(1, w_relay, f))
    f_form = next(f for f in range(f_join + 1, f_join + 101) if _in_window(3, w_end, f))
    tr = run(three_node(seed))
    s = tr.summary
    assert s["formed"] and s["formed_frame"] == f_form
    assert s["formation_slot"] == 3 and s["hops"] == 2
    assert tr.of("FORM")[0][5]["relays"] == [1]


def test_vacuous_network_never_forms():
    topo = Topology({0: 0.0, 1: 30.0, 2: 60.0}, 20.0)
    sc = Scenario(max_frames=50)
    # the middle node is dead from the start, leaving only the two base stations
    sc = replace(sc, failures=(FailureEvent(1, 0.0),))
    tr = run(sc, topo)
    assert not tr.summary["formed"] and tr.summary["frames"] == 50


def test_base_stations_must_be_distinct():
    with pytest.raises(ScenarioError):
        run(Scenario(), Topology({0: 0.0}, 20.0))


def test_direct_link_forms_with_one_hop():
    tr = run(Scenario(topology=TopologySpec(kind="linear", n_nodes=3, spacing_km=1.0), max_frames=300))
    assert tr.summary["formed"]
    assert tr.summary["hops"] >= 1


def test_determinism_bit_exact():
    a = run(small(3, trace_level="full")).to_lines()
    b = run(small(3, trace_level="full")).to_lines()
    assert a == b
    c = run(small(4, trace_level="full")).to_lines()
    assert a != c


def test_substreams_are_keyed():
    a = substream(1, 5, "proto").random()
    assert a == substream(1, 5, "proto").random()
    assert a != substream(1, 6, "proto").random()
    assert a != substream(1, 5, "loss").random()
    assert a != substream(2, 5, "proto").random()


@given(st.integers(0, 10_000))
@settings(max_examples=8)
def test_single_ping_per_node_per_frame(seed):
    tr = run(small(seed, trace_level="full", stop=StopSpec(StopKind.MAX_FRAMES), max_frames=400))
    pings = Counter((r[0], r[3]) for r in tr.records if r[4] == "TX" and r[5]["kind"] == "PING")
    assert pings and max(pings.values()) == 1


@given(st.integers(0, 10_000))
@settings(max_examples=8)
def test_route_is_a_simple_path(seed):
    tr = run(small(seed, stop=StopSpec(StopKind.MAX_FRAMES), max_frames=400))
    s = tr.summary
    chain = s["final_route"]
    assert len(set(chain)) == len(chain) and tr.origin not in chain
    if s["formed"]:
        relays = tr.of("FORM")[0][5]["relays"]
        assert len(set(relays)) == len(relays) and s["hops"] == len(relays) + 1


def test_route_chain_detects_loop():
    t = TimingConfig()
    from irissim.protocol import OriginBase
    states = [OriginBase(next_hop=1), Route(rx_slot=1, prev_hop=0, next_hop=2),
              Route(rx_slot=3, prev_hop=1, next_hop=1)]
    assert route_chain(states, 0, t) == [1, 2]
    states[2] = RouteEnd(rx_slot=5, prev_hop=1)
    assert route_chain(states, 0, t) == [1]


def test_energy_audit_and_duty_cycle():
    tr = run(small(1, stop=StopSpec(StopKind.MAX_FRAMES), max_frames=300))
    guard = 0.05 / 200.0
    for row in tr.energy_rows:
        assert row["min_stored_mC"] >= 0
        if row["node_id"] not in (tr.origin, tr.end):
            assert row["duty_cycle"] <= 0.01 + guard + 1e-12
            assert row["tx_duty_cycle"] <= 0.0035


def test_gating_keeps_low_charge_nodes_asleep():
    from irissim.energy import EnergyConfig
    sc = small(2, energy=EnergyConfig(initial_charge=0.0), max_frames=100,
               stop=StopSpec(StopKind.MAX_FRAMES))
    tr = run(sc)
    assert tr.summary["gated_node_frames"] > 0
    assert tr.summary["min_stored_mC"] >= 0


def test_link_id_set_from_frame_after_formation():
    tr = run(small(0, trace_level="full", stop=StopSpec(StopKind.MAX_FRAMES), max_frames=400))
    f_form = tr.summary["formed_frame"]
    origin_pings = [r for r in tr.records if r[4] == "TX" and r[3] == tr.origin
                    and r[5]["kind"] == "PING"]
    assert all(r[5]["link"] == 0 for r in origin_pings if r[0] <= f_form)
    assert all(r[5]["link"] == 1 for r in origin_pings if r[0] > f_form)


def test_out_of_band_signal_idempotent():
    sim = Simulation(small(0))
    assert not out_of_band_signal(sim)
    sim.run()
    sim.f = sim.formed_frame + 1
    assert out_of_band_signal(sim) and out_of_band_signal(sim)


def test_nonroute_failure_keeps_stream():
    sc = small(5, failures=(FailureEvent("random_nonroute", 2000.0, True),),
               stop=StopSpec(StopKind.RECOVERED), max_frames=1200)
    tr = run(sc)
    (fail,) = tr.summary["failures"]
    assert not fail["on_route"]
    assert recovery_time(tr) == 0.0


def test_route_failure_repairs_route():
    sc = small(5, failures=(FailureEvent("random_route", 2000.0, True),),
               stop=StopSpec(StopKind.RECOVERED), max_frames=2000, trace_level="full")
    tr = run(sc)
    (fail,) = tr.summary["failures"]
    assert fail["on_route"]
    rec = recovery_time(tr)
    assert rec is not None and rec > 0
    dead = fail["frame"]
    later = [r for r in tr.records if r[0] >= dead and r[4] == "ST"]
    # some upstream relay loses its next hop and becomes the route end
    assert any(r[5]["to"] == "route_end" and r[5]["from"] == "route" for r in later)
    assert fail["node"] not in tr.summary["final_route"]


def test_inject_failure_on_running_simulation():
    sim = Simulation(small(5, stop=StopSpec(StopKind.MAX_FRAMES), max_frames=600))
    inject_failure(sim, FailureEvent(10, 0.0))
    tr = sim.run()
    assert tr.summary["failures"][0]["node"] == 10


def test_drift_20ppm_never_blocks_route_links():
    tr = run(small(0, drift=DriftSpec(20.0), stop=StopSpec(StopKind.MAX_FRAMES), max_frames=600))
    assert tr.summary["formed"]
    assert tr.summary["route_drift_blocked"] == 0


def test_saturated_route_throughput():
    tr = run(small(0, traffic=Traffic.SATURATE, stop=StopSpec(StopKind.MAX_FRAMES), max_frames=500))
    f0 = tr.summary["formed_frame"]
    delivered = [r for r in tr.of("DELIV") if r[0] > f0 and r[5]["dest"] in (NONE, tr.end)]
    assert delivered and all(r[5]["bytes"] == 22 for r in delivered)


@pytest.mark.parametrize("kw, key", [
    (dict(max_frames=0), "max_frames"),
    (dict(seed=-1), "seed"),
    (dict(loss=LossSpec("bernoulli", -0.1)), "loss.rate"),
    (dict(loss=LossSpec("none", 0.1)), "loss.rate"),
    (dict(drift=DriftSpec(-1.0)), "drift.ppm"),
    (dict(stop=StopSpec(StopKind.RECOVERED)), "stop.kind"),
    (dict(failures=(FailureEvent("somebody"),)), "failures[0].node"),
    (dict(failures=(FailureEvent(3, 1e9),)), "failures[0].at_s"),
    (dict(trace_level="verbose"), "trace_level"),
])
def test_scenario_validation(kw, key):
    with pytest.raises(ScenarioError) as exc:
        run(Scenario(**kw))
    assert any(e.startswith(key) for e in exc.value.errors)
