"""Figures of merit computed from run traces.

All times are seconds measured from the first origin ping (frame 0, slot 1).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import stats

from .engine import RunTrace
from .protocol import TimingConfig


class MetricsError(ValueError):
    pass


def slot_time(frame: int, slot: int, timing: TimingConfig) -> float:
    """Start of ``slot`` in ``frame`` relative to the first origin ping."""
    return (frame * timing.slots_per_frame + slot - 1) * timing.slot_s


def frame_time(frame: int, timing: TimingConfig) -> float:
    return frame * timing.frame_s


# ---------------------------------------------------------------------------
# per-run metrics


def formation_time(trace: RunTrace) -> Optional[float]:
    """First end-base ping decode, or None when no route formed."""
    form = trace.of("FORM")
    if not form:
        return None
    f, s = form[0][0], form[0][1]
    return slot_time(f, s, trace.scenario.timing)


def hops(trace: RunTrace) -> Optional[int]:
    """Links of the formed route; None if not formed or not traceable to the origin."""
    form = trace.of("FORM")
    return form[0][5]["hops"] if form else None


def failure_records(trace: RunTrace) -> list[dict]:
    """Failures that actually hit a node, in firing order."""
    out = []
    for f, s, _, node, _, fields in trace.of("FAIL"):
        if "skipped" in fields:
            continue
        out.append(dict(fields, node=node, frame=f))
    return out


def recovery_time(trace: RunTrace, failure: Optional[dict] = None) -> Optional[float]:
    """Time from a failure to the next intact (non-synthesized) end-base decode.

    ``failure`` defaults to the last failure of the run.  The failure fires at
    the start of its frame; if that frame's ping still arrives intact the
    stream never broke and the recovery time is 0.  Returns None when the run
    ended without recovering.
    """
    if failure is None:
        fails = failure_records(trace)
        if not fails:
            raise MetricsError("trace contains no failure")
        failure = fails[-1]
    timing = trace.scenario.timing
    f0 = failure["frame"]
    for f, s, _, _, _, fields in trace.of("DELIV"):
        if f < f0 or fields["synth"]:
            continue
        if f == f0:
            return 0.0
        return slot_time(f, s, timing) - frame_time(f0, timing)
    return None


def throughput(trace: RunTrace, window: Optional[tuple[float, float]] = None) -> float:
    """Payload bytes decoded at the end base per hour over ``window`` (seconds).

    The default window runs from the first full frame after formation to the
    end of the run.  A window that starts before the route formed is rejected.
    """
    timing = trace.scenario.timing
    t_form = formation_time(trace)
    if t_form is None:
        raise MetricsError("no route formed; throughput is undefined")
    if window is None:
        first = trace.of("FORM")[0][0] + 1
        window = (frame_time(first, timing), frame_time(trace.summary["frames"], timing))
    start, end = window
    if start < t_form:
        raise MetricsError(f"window starts at {start} s, before the route formed ({t_form} s)")
    if end <= start:
        raise MetricsError("window must have positive length")
    total = sum(fields["bytes"] for f, s, _, _, _, fields in trace.of("DELIV")
                if start <= slot_time(f, s, timing) < end)
    return total * 3600.0 / (end - start)


# ---------------------------------------------------------------------------
# distributions


def _clean(samples: Iterable[float]) -> np.ndarray:
    arr = np.asarray([math.inf if x is None else float(x) for x in samples], dtype=float)
    if arr.size == 0:
        raise MetricsError("need at least one sample")
    return arr


def cdf(samples: Iterable[Optional[float]]) -> list[tuple[float, float]]:
    """Empirical CDF steps ``(value, fraction <= value)``.

    Missing samples (None, e.g. a route that never formed) count as +inf: they
    hold probability mass the finite steps never reach.
    """
    arr = np.sort(_clean(samples))
    n = arr.size
    steps = []
    for i, v in enumerate(arr):
        if i + 1 < n and arr[i + 1] == v:
            continue
        steps.append((float(v), (i + 1) / n))
    return steps


def percentile(samples: Iterable[Optional[float]], q: float = 90.0) -> float:
    """Nearest-rank percentile: the smallest sample with CDF >= q/100."""
    if not 0 < q <= 100:
        raise MetricsError("q must lie in (0, 100]")
    arr = np.sort(_clean(samples))
    rank = max(1, math.ceil(q / 100.0 * arr.size - 1e-12))
    return float(arr[rank - 1])


@dataclass(frozen=True)
class BoxStats:
    q1: float
    median: float
    q3: float
    whisker_lo: float
    whisker_hi: float
    outliers: tuple = ()


def boxplot_stats(samples: Iterable[float]) -> BoxStats:
    """Quartiles by linear interpolation, whiskers at 1.5 IQR."""
    arr = np.sort(np.asarray(list(samples), dtype=float))
    if arr.size < 4:
        raise MetricsError("boxplot needs at least 4 samples")
    q1, med, q3 = np.percentile(arr, [25, 50, 75])
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = arr[(arr >= lo_fence) & (arr <= hi_fence)]
    outliers = tuple(float(x) for x in arr[(arr < lo_fence) | (arr > hi_fence)])
    return BoxStats(float(q1), float(med), float(q3), float(inside.min()), float(inside.max()),
                    outliers)


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    if len(x) != len(y) or len(x) < 3:
        raise MetricsError("spearman needs two equally long samples of size >= 3")
    return float(stats.spearmanr(x, y).statistic)


# ---------------------------------------------------------------------------
# run summary


@dataclass
class RunSummary:
    seed: int
    topology_id: str
    formed: bool
    formation_time_s: Optional[float]
    hops: Optional[int]
    formed_intact: Optional[bool] = None
    recovery_time_s: Optional[float] = None
    failed_node: Optional[int] = None
    failed_dist_to_end_km: Optional[float] = None
    failed_on_route: Optional[bool] = None
    max_duty_cycle: float = 0.0
    tx_duty_cycle: float = 0.0
    throughput_bytes_per_hour: Optional[float] = None
    payload_entries_delivered: int = 0
    payload_entries_dropped: int = 0
    frames: int = 0
    min_stored_mC: float = 0.0
    collisions: int = 0
    lost: int = 0
    drift_blocked: int = 0
    route_drift_blocked: int = 0
    diagnostics: int = 0

    def row(self) -> dict:
        return asdict(self)


FIELDS = tuple(RunSummary.__dataclass_fields__)


def topology_id(trace: RunTrace) -> str:
    spec = trace.scenario.topology
    kind = getattr(spec.kind, "value", spec.kind)
    if kind == "file":
        return f"file:{spec.path}"
    if kind == "linear":
        return f"linear-{spec.n_nodes}x{spec.spacing_km:g}km-r{spec.range_km:g}"
    return f"random-{spec.n_nodes}-s{spec.seed}-r{spec.range_km:g}"


def summarize(trace: RunTrace) -> RunSummary:
    s = trace.summary
    bases = {trace.origin, trace.end}
    rows = [r for r in trace.energy_rows if r["node_id"] not in bases]
    fails = failure_records(trace)
    rec = fail = None
    if fails:
        fail = fails[-1]
        rec = recovery_time(trace, fail)
    tput = None
    if s["formed"] and s["frames"] > trace.of("FORM")[0][0] + 1:
        tput = throughput(trace)
    return RunSummary(
        seed=s["seed"], topology_id=topology_id(trace), formed=s["formed"],
        formation_time_s=formation_time(trace), hops=hops(trace),
        formed_intact=trace.of("FORM")[0][5]["intact"] if s["formed"] else None,
        recovery_time_s=rec,
        failed_node=fail["node"] if fail else None,
        failed_dist_to_end_km=fail["dist_to_end_km"] if fail else None,
        failed_on_route=fail["on_route"] if fail else None,
        max_duty_cycle=max((r["duty_cycle"] for r in rows), default=0.0),
        tx_duty_cycle=max((r["tx_duty_cycle"] for r in rows), default=0.0),
        throughput_bytes_per_hour=tput,
        payload_entries_delivered=s["delivered_entries"],
        payload_entries_dropped=s["payload_dropped"],
        frames=s["frames"], min_stored_mC=s["min_stored_mC"],
        collisions=s["collisions"], lost=s["lost"], drift_blocked=s["drift_blocked"],
        route_drift_blocked=s["route_drift_blocked"], diagnostics=s["diagnostics"],
    )
