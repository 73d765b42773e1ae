"""Monte Carlo campaigns: scenario grid x seeds, run in parallel, written as CSV."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from multiprocessing import get_context
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .config import ConfigError, load, scenario_to_dict, sweep_grid, sweep_key_errors, with_overrides
from .engine import Scenario, run
from .metrics import FIELDS, boxplot_stats, cdf, percentile, summarize

log = logging.getLogger(__name__)

WORKER_ENV = "IRISSIM_MAX_WORKERS"


@dataclass
class CampaignSpec:
    scenario: str
    runs: Optional[int] = None           # None: take the scenario file's campaign.runs
    base_seed: Optional[int] = None
    parallel: int = 1
    out: Optional[str] = None
    sweep: dict = field(default_factory=dict)   # key path -> values; replaces the file's sweep


@dataclass
class CellResult:
    cell: int
    overrides: dict
    scenario: Scenario
    rows: list


def worker_count(requested: int) -> int:
    n = max(1, requested)
    cap = os.environ.get(WORKER_ENV)
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ConfigError([f"{WORKER_ENV}: expected an integer, got {cap!r}"]) from None
    return n


def _run_one(job: tuple) -> dict:
    cell, seed, scenario = job
    trace = run(replace(scenario, seed=seed))
    row = summarize(trace).row()
    row["cell"] = cell
    return row


def plan(spec: CampaignSpec) -> tuple[list[tuple[int, dict, Scenario]], int, int]:
    """Resolve the grid; raises ConfigError before anything runs."""
    loaded = load(spec.scenario)
    runs = spec.runs if spec.runs is not None else loaded.campaign.runs
    base = spec.base_seed if spec.base_seed is not None else loaded.campaign.base_seed
    errors = []
    if runs < 1:
        errors.append("runs: must be >= 1")
    if base < 0:
        errors.append("seed: must be >= 0")
    sweep = spec.sweep or loaded.campaign.sweep
    for key in sweep:
        errors.extend(e.replace("campaign.sweep.", "sweep ") for e in sweep_key_errors(key))
    if errors:
        raise ConfigError(errors)
    cells = []
    raw = {k: v for k, v in loaded.raw.items() if k != "campaign"}
    for i, overrides in enumerate(sweep_grid(sweep)):
        try:
            sc = with_overrides(raw, overrides)
        except ConfigError as exc:
            label = ", ".join(f"{k}={v}" for k, v in overrides.items())
            raise ConfigError([f"sweep cell {label}: {e}" for e in exc.errors]) from None
        cells.append((i, overrides, sc))
    return cells, runs, base


def _check_out(out: Path) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError([f"out: cannot write to {out} ({exc.strerror})"]) from None


def execute(spec: CampaignSpec) -> list[CellResult]:
    cells, runs, base = plan(spec)
    if spec.out:
        _check_out(Path(spec.out))
    jobs = [(i, base + k, sc) for i, _, sc in cells for k in range(runs)]
    workers = min(worker_count(spec.parallel), len(jobs))
    log.info("campaign: %d cells x %d runs on %d workers", len(cells), runs, workers)
    if workers == 1:
        rows = [_run_one(j) for j in jobs]
    else:
        with get_context("fork").Pool(workers) as pool:
            rows = pool.map(_run_one, jobs, chunksize=1)
    results = []
    for i, overrides, sc in cells:
        mine = sorted((r for r in rows if r["cell"] == i), key=lambda r: r["seed"])
        results.append(CellResult(i, overrides, sc, mine))
    if spec.out:
        write_outputs(Path(spec.out), results, runs, base)
    return results


# ---------------------------------------------------------------------------
# outputs

RUN_COLUMNS = ("cell",) + FIELDS
SCHEMA = {
    "runs.csv": {
        "cell": "grid cell index (see cells.csv)",
        "seed": "master seed of the run (base_seed + run index)",
        "topology_id": "deployment identifier",
        "formed": "1 if the end base decoded a ping before the horizon",
        "formation_time_s": "first origin ping to first end-base ping decode, seconds (empty if not formed)",
        "hops": "links on the route when it formed (empty if not formed or not traceable to the origin)",
        "formed_intact": "1 if the formation ping was a real (not synthesized) ping along a traceable route",
        "recovery_time_s": "failure instant to next intact end-base decode, seconds (empty if none)",
        "failed_node": "node killed by the last failure event",
        "failed_dist_to_end_km": "distance of the failed node to the end base",
        "failed_on_route": "1 if the failed node was a relay on the route",
        "max_duty_cycle": "largest active duty cycle of any non-base node (fraction)",
        "tx_duty_cycle": "largest transmit duty cycle of any non-base node (fraction)",
        "throughput_bytes_per_hour": "payload bytes decoded at the end base per hour after formation",
        "payload_entries_delivered": "payload entries decoded at the end base",
        "payload_entries_dropped": "entries discarded by full relay queues",
        "frames": "frames simulated",
        "min_stored_mC": "lowest stored charge seen on any node",
        "collisions": "listener-level collisions",
        "lost": "receptions removed by the loss process",
        "drift_blocked": "receptions refused because of clock offset",
        "route_drift_blocked": "drift-blocked receptions on an established route link",
        "diagnostics": "unexpected packets ignored by the protocol",
    },
    "cells.csv": {"cell": "grid cell index", "<key path>": "override applied in this cell"},
    "cdf.csv": {"cell": "grid cell index", "formation_time_s": "step value (inf: not formed)",
                "formation_time_h": "step value in hours", "fraction": "empirical CDF at the step"},
    "box.csv": {"cell": "grid cell index", "n": "runs with a known hop count", "q1": "25th percentile of hops",
                "median": "median hops", "q3": "75th percentile of hops",
                "whisker_lo": "lowest hop count within 1.5 IQR", "whisker_hi": "highest within 1.5 IQR",
                "outliers": "space separated hop counts beyond the whiskers"},
    "summary.csv": {"cell": "grid cell index", "runs": "runs in the cell", "formed": "formed runs",
                    "p90_formation_h": "nearest-rank 90th percentile of formation time, hours",
                    "max_formation_h": "slowest formation, hours",
                    "mean_hops": "mean hops of formed routes", "median_hops": "median hops"},
}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(round(v, 6)) if math.isfinite(v) else "inf"
    return str(v)


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def cell_stats(rows: list[dict]) -> dict:
    times = [r["formation_time_s"] for r in rows]
    hops = [r["hops"] for r in rows if r["hops"] is not None]
    return {
        "runs": len(rows), "formed": sum(1 for r in rows if r["formed"]),
        "p90_formation_h": percentile(times, 90) / 3600.0,
        "max_formation_h": percentile(times, 100) / 3600.0,
        "mean_hops": float(np.mean(hops)) if hops else None,
        "median_hops": float(np.median(hops)) if hops else None,
    }


def write_outputs(out: Path, results: list[CellResult], runs: int, base: int) -> None:
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "runs.csv", RUN_COLUMNS,
               [[r[c] for c in RUN_COLUMNS] for res in results for r in res.rows])
    keys = list(results[0].overrides) if results else []
    _write_csv(out / "cells.csv", ["cell"] + keys,
               [[res.cell] + [res.overrides[k] for k in keys] for res in results])
    cdf_rows, box_rows, sum_rows = [], [], []
    for res in results:
        for value, frac in cdf([r["formation_time_s"] for r in res.rows]):
            cdf_rows.append([res.cell, value, value / 3600.0, frac])
        hops = [r["hops"] for r in res.rows if r["hops"] is not None]
        if len(hops) >= 4:
            b = boxplot_stats(hops)
            box_rows.append([res.cell, len(hops), b.q1, b.median, b.q3, b.whisker_lo, b.whisker_hi,
                             " ".join(_fmt(x) for x in b.outliers)])
        st = cell_stats(res.rows)
        sum_rows.append([res.cell] + [st[k] for k in SCHEMA["summary.csv"] if k != "cell"])
    _write_csv(out / "cdf.csv", list(SCHEMA["cdf.csv"]), cdf_rows)
    _write_csv(out / "box.csv", list(SCHEMA["box.csv"]), box_rows)
    _write_csv(out / "summary.csv", list(SCHEMA["summary.csv"]), sum_rows)
    manifest = {
        "version": __version__, "runs": runs, "base_seed": base,
        "cells": [{"cell": r.cell, "overrides": r.overrides, "scenario": scenario_to_dict(r.scenario)}
                  for r in results],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (out / "schema.json").write_text(json.dumps(SCHEMA, indent=2) + "\n")


def read_runs(path) -> list[dict]:
    """Parse a runs.csv back into typed rows."""
    out = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            row = {}
            for k, v in rec.items():
                if v == "":
                    row[k] = None
                elif k in ("topology_id",):
                    row[k] = v
                elif k in ("formed", "failed_on_route", "formed_intact"):
                    row[k] = v == "1"
                elif v == "inf":
                    row[k] = math.inf
                else:
                    num = float(v)
                    row[k] = int(num) if num.is_integer() and "." not in v else num
            out.append(row)
    return out
