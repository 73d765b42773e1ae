import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from irissim.channel import (Channel, ChannelError, DriftModel, LossModel, LossProcess, ReceiverLoss,
                             accrue_drift, advance_loss, draw_gap, in_range, resolve_slot)
from irissim.protocol import NONE, Kind, Packet
from irissim.topology import Topology, TopologySpec, generate


def line(*pos, r=20.0):
    return Topology({i: p for i, p in enumerate(pos)}, r)


def test_in_range_disc():
    t = line(0.0, 19.9, 40.0)
    assert in_range(0, 1, t)
    assert not in_range(1, 2, t) or abs(40.0 - 19.9) <= 20
    assert not in_range(0, 2, line(0.0, 0.0, 20.1))
    assert in_range(0, 1, line(0.0, 20.0, 50.0))


def test_hypothetical_neighbour_counts():
    topo = generate(TopologySpec(kind="linear", n_nodes=300, spacing_km=0.5))
    nbrs = topo.neighbours()
    assert len(nbrs[150]) == 80
    assert len(nbrs[0]) == 40 and len(nbrs[299]) == 40
    assert len(nbrs[10]) == 50


def test_single_transmission_decoded():
    out = resolve_slot([(0, Packet(Kind.PING, 0), 0)], line(0, 1, 2), listeners=[1, 2])
    assert set(out) == {1, 2}


def test_two_acks_collide_at_route_end():
    topo = line(0, 1, 2)
    acks = [(1, Packet(Kind.ACK, 1, 0), 1), (2, Packet(Kind.ACK, 2, 0), 1)]
    assert resolve_slot(acks, topo, listeners=[0]) == {}
    chan = Channel(topo)
    out = chan.resolve([(1, Packet(Kind.ACK, 1, 0)), (2, Packet(Kind.ACK, 2, 0))], {0})
    assert out.collisions == [(0, (1, 2))]


def test_out_of_range_sender_does_not_collide():
    topo = line(0.0, 15.0, 30.0, 45.0)
    chan = Channel(topo)
    out = chan.resolve([(0, Packet(Kind.PING, 0)), (3, Packet(Kind.PING, 3))], {1, 2})
    assert set(out.decoded) == {1, 2} and not out.collisions


def test_unicast_delivered_only_to_destination():
    out = resolve_slot([(0, Packet(Kind.ACK, 0, 2), 1)], line(0, 1, 2), listeners=[1, 2])
    assert set(out) == {2}


def test_drift_beyond_guard_blocks_reception():
    drift = DriftModel.build(2, 0.0, 200_000.0, 50.0)
    drift.offset[:] = [0.0, 60.0]
    chan = Channel(line(0, 1), drift=drift)
    out = chan.resolve([(0, Packet(Kind.PING, 0))], {1}, 0, {1})
    assert out.drift_blocked == [(1, 0)] and not out.decoded
    drift.offset[:] = [0.0, 40.0]
    out = chan.resolve([(0, Packet(Kind.PING, 0))], {1}, 0, {1})
    assert 1 in out.decoded and drift.offset[1] == 0.0  # resynchronised


@pytest.mark.parametrize("ppm, ms", [(20, 4.0), (200, 40.0), (0, 0.0)])
def test_drift_per_frame(ppm, ms):
    d = DriftModel.build(3, ppm, 200_000.0, 50.0, signs=[1, -1, 1])
    d2 = accrue_drift(d, 1, 1)
    assert d2.offset[1] == pytest.approx(-ms)
    assert d.offset[1] == 0.0
    d.accrue_all(3)
    assert d.offset[0] == pytest.approx(3 * ms)


def test_rate_zero_never_loses():
    loss = ReceiverLoss(LossModel.UNIFORM_GAP, 0.0, random.Random(1))
    assert not any(loss.lost() for _ in range(1000))
    assert advance_loss(LossProcess(), random.Random(0), 5) == LossProcess()


def test_loss_process_validates_rate():
    with pytest.raises(ChannelError):
        LossProcess(LossModel.BERNOULLI, 1.0)


@pytest.mark.parametrize("model", [LossModel.BERNOULLI, LossModel.UNIFORM_GAP,
                                   LossModel.EXPONENTIAL_GAP])
@pytest.mark.parametrize("rate", [0.01, 0.1])
def test_loss_rate_converges(model, rate):
    loss = ReceiverLoss(model, rate, random.Random(42))
    n = 100_000
    frac = sum(loss.lost() for _ in range(n)) / n
    assert frac == pytest.approx(rate, abs=0.05 * rate if rate >= 0.1 else 0.002)


@given(st.floats(0.005, 0.6), st.integers(0, 2**32))
@settings(max_examples=30)
def test_gap_means(rate, seed):
    rng = random.Random(seed)
    for model in (LossModel.UNIFORM_GAP, LossModel.EXPONENTIAL_GAP):
        gaps = [draw_gap(model, rate, rng) for _ in range(4000)]
        assert min(gaps) >= 1
        assert np.mean(gaps) == pytest.approx(1 / rate, rel=0.12)


def test_uniform_gap_is_bounded():
    rng = random.Random(3)
    gaps = [draw_gap(LossModel.UNIFORM_GAP, 0.1, rng) for _ in range(5000)]
    assert max(gaps) <= 20 and min(gaps) == 1


def test_advance_loss_schedules_next_loss():
    lp = advance_loss(LossProcess(LossModel.EXPONENTIAL_GAP, 0.1), random.Random(0), 10)
    assert lp.next_loss > 10
