import math

import pytest
from hypothesis import given, strategies as st

from irissim.engine import FailureEvent, RunTrace, Scenario, StopKind, StopSpec, Traffic, run
from irissim.metrics import (FIELDS, MetricsError, boxplot_stats, cdf, formation_time, percentile,
                             recovery_time, slot_time, spearman, summarize, throughput)
from irissim.protocol import TimingConfig
from irissim.topology import TopologySpec

T = TimingConfig()


def fake_trace(records, frames=100):
    return RunTrace(Scenario(), records, {"frames": frames}, [], {}, 0, 299)


def deliv(f, s, nbytes, synth=False):
    return (f, s, 1, 299, "DELIV", {"sender": 1, "dest": -1, "synth": synth, "bytes": nbytes,
                                    "entries": 1, "link": 1})


def form(f, s, hops=3):
    return (f, s, 1, 299, "FORM", {"hops": hops, "relays": []})


def test_slot_time_arithmetic():
    assert slot_time(0, 1, T) == 0.0
    assert slot_time(3, 25, T) == (3 * 400 + 24) * 0.5


def test_formation_time_from_trace():
    assert formation_time(fake_trace([form(10, 25)])) == (10 * 400 + 24) * 0.5
    assert formation_time(fake_trace([])) is None


@pytest.mark.parametrize("nbytes, expected", [(22, 396.0), (11, 198.0), (0, 0.0)])
def test_throughput(nbytes, expected):
    recs = [form(0, 25)] + [deliv(f, 25, nbytes) for f in range(1, 100)]
    assert throughput(fake_trace(recs)) == pytest.approx(expected)


def test_throughput_window_must_follow_formation():
    tr = fake_trace([form(5, 25), deliv(5, 25, 22)])
    with pytest.raises(MetricsError):
        throughput(tr, (0.0, 2000.0))
    with pytest.raises(MetricsError):
        throughput(fake_trace([]))


def fail(f, on_route=True):
    return (f, 0, 0, 7, "FAIL", {"frame": f, "time_s": f * 200.0, "role": "route",
                                 "dist_to_end_km": 10.0, "on_route": on_route})


def test_recovery_zero_when_stream_unbroken():
    tr = fake_trace([form(1, 25), deliv(9, 25, 0), fail(10), deliv(10, 25, 0)])
    assert recovery_time(tr) == 0.0


def test_recovery_skips_synthesized_pings():
    tr = fake_trace([form(1, 25), fail(10), deliv(10, 25, 0, synth=True), deliv(12, 25, 0)])
    assert recovery_time(tr) == slot_time(12, 25, T) - 10 * 200.0


def test_recovery_none_and_missing_failure():
    assert recovery_time(fake_trace([form(1, 25), fail(10)])) is None
    with pytest.raises(MetricsError):
        recovery_time(fake_trace([form(1, 25)]))


def test_cdf_and_percentile_examples():
    assert percentile([1, 2, 3, 4], 90) == 4
    assert cdf([5.0] * 50) == [(5.0, 1.0)]
    steps = cdf([1, 2, None])
    assert steps[-1] == (math.inf, 1.0) and steps[0] == (1.0, pytest.approx(1 / 3))
    assert percentile([1, 2, None], 50) == 2
    with pytest.raises(MetricsError):
        percentile([], 90)
    with pytest.raises(MetricsError):
        percentile([1], 0)


@given(st.lists(st.floats(0, 1e6), min_size=1, max_size=60), st.floats(1, 100))
def test_percentile_is_nearest_rank(xs, q):
    p = percentile(xs, q)
    assert p in xs
    below = sum(x <= p for x in xs) / len(xs)
    assert below >= q / 100 - 1e-9
    assert sum(x < p for x in xs) / len(xs) < q / 100 + 1e-9


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=60))
def test_cdf_is_monotone_and_complete(xs):
    steps = cdf(xs)
    vals = [v for v, _ in steps]
    fr = [p for _, p in steps]
    assert vals == sorted(set(vals)) and fr == sorted(fr) and fr[-1] == 1.0


def test_boxplot_examples():
    b = boxplot_stats(range(1, 101))
    assert (b.q1, b.median, b.q3) == (25.75, 50.5, 75.25)
    assert (b.whisker_lo, b.whisker_hi, b.outliers) == (1, 100, ())
    flat = boxplot_stats([7] * 10)
    assert flat.q1 == flat.q3 == 7 and flat.outliers == ()
    out = boxplot_stats([10, 11, 11, 12, 12, 12, 13, 30])
    assert out.outliers == (30.0,) and out.whisker_hi == 13
    with pytest.raises(MetricsError):
        boxplot_stats([1, 2, 3])


def test_spearman():
    assert spearman([1, 2, 3, 4], [10, 20, 30, 45]) == pytest.approx(1.0)
    assert spearman([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)
    with pytest.raises(MetricsError):
        spearman([1, 2], [1, 2])


def test_summarize_real_run():
    sc = Scenario(topology=TopologySpec(kind="linear", n_nodes=40, spacing_km=0.5, range_km=3.0),
                  traffic=Traffic.SATURATE, stop=StopSpec(StopKind.MAX_FRAMES), max_frames=500,
                  failures=(FailureEvent("random_nonroute", 1000.0, True),))
    row = summarize(run(sc)).row()
    assert tuple(row) == FIELDS
    assert row["formed"] and row["hops"] >= 7
    assert row["throughput_bytes_per_hour"] == pytest.approx(396.0)
    assert row["recovery_time_s"] == 0.0 and row["failed_on_route"] is False
