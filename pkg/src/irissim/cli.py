"""Command-line front end.

Exit codes: 0 success, 1 invalid configuration or input, 2 runtime
invariant violation inside the simulator.
"""
from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional

import yaml

from . import config as cfg
from .campaign import CampaignSpec, cell_stats, execute, read_runs
from .engine import ScenarioError, SimulationError
from .metrics import MetricsError, boxplot_stats, cdf, percentile
from .protocol import ProtocolError
from .topology import (TopologyError, TopologyKind, TopologySpec, generate, load as load_topology,
                       save as save_topology)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _parse_sweep(items: list[str]) -> dict:
    sweep = {}
    for item in items or []:
        key, sep, values = item.partition("=")
        if not sep or not key or not values:
            raise cfg.ConfigError([f"--sweep {item!r}: expected key=v1,v2,..."])
        sweep[key] = [yaml.safe_load(v) for v in values.split(",")]
    return sweep


def cmd_validate(args) -> int:
    try:
        loaded = cfg.load(args.scenario)
    except cfg.ConfigError as exc:
        for e in exc.errors:
            print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    sc = loaded.scenario
    resolved = cfg.scenario_to_dict(sc)
    resolved["campaign"] = {"runs": loaded.campaign.runs, "base_seed": loaded.campaign.base_seed,
                            "sweep": loaded.campaign.sweep}
    print(yaml.safe_dump(resolved, sort_keys=False).rstrip())
    t = sc.timing
    print(f"# ok: {t.slots_per_frame} slots of {t.slot_ms:g} ms, stl {t.stl}, "
          f"conlimit {sc.proto.conlimit}, frameout {sc.proto.frameout}")
    return EXIT_OK


def cmd_run(args) -> int:
    spec = CampaignSpec(args.scenario, runs=args.runs, base_seed=args.seed, parallel=args.parallel,
                        out=args.out, sweep=_parse_sweep(args.sweep))
    results = execute(spec)
    for res in results:
        st = cell_stats(res.rows)
        label = ", ".join(f"{k}={v}" for k, v in res.overrides.items()) or "base"
        hops = "-" if st["mean_hops"] is None else f"{st['mean_hops']:.1f}"
        print(f"cell {res.cell} [{label}]: {st['formed']}/{st['runs']} formed, "
              f"p90 {st['p90_formation_h']:.2f} h, max {st['max_formation_h']:.2f} h, "
              f"mean hops {hops}")
    if args.out:
        print(f"wrote {args.out}/runs.csv and companions")
    return EXIT_OK


def cmd_topo_gen(args) -> int:
    spec = TopologySpec(kind=TopologyKind(args.kind), n_nodes=args.n, spacing_km=args.spacing,
                        range_km=args.range, seed=args.seed)
    topo = generate(spec)
    save_topology(topo, args.output)
    print(f"{args.output}: {topo.n} nodes, {topo.length_km:.3f} km, range {topo.range_km:g} km")
    return EXIT_OK


def cmd_topo_show(args) -> int:
    topo = load_topology(args.path)
    pos = sorted(topo.positions.values())
    gaps = [b - a for a, b in zip(pos, pos[1:])]
    nbrs = topo.neighbours()
    print(f"nodes {topo.n}\nlength_km {topo.length_km:.3f}\nrange_km {topo.range_km:g}")
    print(f"max_gap_km {max(gaps):.3f}\nmean_neighbours {sum(map(len, nbrs.values())) / topo.n:.1f}")
    print(f"connected {'yes' if max(gaps) <= topo.range_km else 'no'}")
    return EXIT_OK


def _cells(rows: list[dict], only: Optional[int]) -> dict:
    out: dict[int, list] = {}
    for r in rows:
        if only is None or r["cell"] == only:
            out.setdefault(r["cell"], []).append(r)
    if not out:
        raise MetricsError("no rows selected")
    return out


def cmd_report(args) -> int:
    rows = read_runs(args.runs_csv)
    for cell, mine in sorted(_cells(rows, args.cell).items()):
        if args.what == "cdf":
            times = [r["formation_time_s"] for r in mine]
            print(f"# cell {cell}: p90 {percentile(times, 90) / 3600:.2f} h")
            for value, frac in cdf(times):
                print(f"{cell},{value / 3600:.4f},{frac:.4f}")
        else:
            b = boxplot_stats([r["hops"] for r in mine if r["hops"] is not None])
            print(f"cell {cell}: q1 {b.q1:g} median {b.median:g} q3 {b.q3:g} "
                  f"whiskers {b.whisker_lo:g}..{b.whisker_hi:g} outliers {list(b.outliers)}")
    return EXIT_OK


def cmd_presets(args) -> int:
    for name in cfg.preset_names():
        first = cfg.preset_path(name).read_text().splitlines()[0].lstrip("# ")
        print(f"{name:36s} {first}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="irissim", description="Low duty cycle pipeline WSN simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check a scenario file or preset and print it resolved")
    v.add_argument("scenario")
    v.set_defaults(func=cmd_validate)

    r = sub.add_parser("run", help="run a Monte Carlo campaign")
    r.add_argument("scenario", help="scenario file or preset name")
    r.add_argument("--runs", type=int, help="runs per grid cell (default: from the file)")
    r.add_argument("--seed", type=int, help="base seed; run i uses seed + i")
    r.add_argument("--out", help="output directory for CSV artifacts")
    r.add_argument("--parallel", type=int, default=1, help="worker processes")
    r.add_argument("--sweep", action="append", metavar="KEY=V1,V2",
                   help="grid over a key path, e.g. protocol.frameout=10,50 (repeatable)")
    r.set_defaults(func=cmd_run)

    t = sub.add_parser("topo", help="generate or inspect topology files")
    tsub = t.add_subparsers(dest="topo_command", required=True)
    g = tsub.add_parser("gen")
    g.add_argument("--kind", choices=["linear", "random_pipeline"], default="random_pipeline")
    g.add_argument("--n", type=int, default=300)
    g.add_argument("--spacing", type=float, default=0.5, help="linear spacing, km")
    g.add_argument("--range", type=float, default=20.0, help="radio range, km")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("-o", "--output", required=True)
    g.set_defaults(func=cmd_topo_gen)
    s = tsub.add_parser("show")
    s.add_argument("path")
    s.set_defaults(func=cmd_topo_show)

    rep = sub.add_parser("report", help="summarise a runs.csv")
    rep.add_argument("what", choices=["cdf", "box"])
    rep.add_argument("runs_csv")
    rep.add_argument("--cell", type=int)
    rep.set_defaults(func=cmd_report)

    pr = sub.add_parser("presets", help="list bundled presets")
    pr.set_defaults(func=cmd_presets)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except cfg.ConfigError as exc:
        for e in exc.errors:
            print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ScenarioError, ProtocolError, TopologyError, MetricsError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationError as exc:
        print(f"runtime invariant violated: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
