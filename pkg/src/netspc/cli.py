"""Scenario runner: ``netspc moments|run|report``.

Exit codes: 0 ok, 1 usage or config error, 2 moment estimation failure
(indefinite quadratic form), 3 solver failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import sim
from .config import ConfigError, GridConfig, config_hash, load_config
from .moments import IndefiniteL
from .ocp import SolverFailure

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_MOMENTS = 2
EXIT_SOLVER = 3


def _apply_overrides(grid: GridConfig, args) -> GridConfig:
    base = grid.base
    updates = {}
    if args.paths is not None:
        updates["paths"] = args.paths
    if args.steps is not None:
        updates["steps"] = args.steps
    if getattr(args, "mu", None) is not None:
        updates["mu"] = args.mu
    if getattr(args, "samples", None) is not None:
        updates["moment_samples"] = args.samples
    if args.seed is not None:
        updates["noise"] = replace(base.noise, seed=args.seed)
        updates["channel"] = replace(base.channel, seed=args.seed + 1_000_003)
    if updates:
        base = replace(base, **updates)
    protocols = grid.grid_protocol
    if getattr(args, "protocol", None) is not None:
        protocols = (args.protocol,)
    from .config import resolved_config
    resolved = resolved_config(grid.name, base, grid.grid_p, grid.grid_sigma,
                               protocols, grid.grid_mu)
    return GridConfig(name=grid.name, base=base, grid_p=grid.grid_p,
                      grid_sigma=grid.grid_sigma, grid_protocol=protocols,
                      grid_mu=grid.grid_mu, resolved=resolved)


def _write_json(path: str, obj) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")
    os.replace(tmp, path)


def cmd_moments(args) -> int:
    grid = _apply_overrides(load_config(args.config), args)
    cache_dir = args.cache_dir
    os.makedirs(cache_dir, exist_ok=True)
    rc = EXIT_OK
    from .moments import cache_key
    for label, scn in grid.points():
        key = cache_key(sim.moment_cache_payload(scn))
        try:
            ms = sim.get_moments(scn, cache_dir)
        except IndefiniteL as exc:
            print(f"{label}: MOMENT FAILURE: {exc}", file=sys.stderr)
            rc = EXIT_MOMENTS
            continue
        shortcut = " (deterministic channel shortcut)" if ms.deterministic else ""
        print(f"{label}: cache key {key} samples {ms.sample_count} "
              f"min-eig(calL) {ms.min_eig_raw:.3e}{shortcut}")
    return rc


def cmd_run(args) -> int:
    grid = _apply_overrides(load_config(args.config), args)
    out_dir = args.out
    cache_dir = args.cache_dir or os.path.join(out_dir, "moment_cache")
    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(cache_dir, exist_ok=True)
    from .moments import cache_key

    labels = []
    cache_keys = {}
    for label, scn in grid.points():
        labels.append(label)
        cache_keys[label] = cache_key(sim.moment_cache_payload(scn))
    manifest = {
        "config_path": os.path.abspath(args.config),
        "config_hash": config_hash(grid.resolved),
        "labels": labels,
        "cache_keys": cache_keys,
        "out_dir": os.path.abspath(out_dir),
        "seeds": {"noise": grid.base.noise.seed, "channel": grid.base.channel.seed},
    }
    _write_json(os.path.join(out_dir, "manifest.json"), manifest)
    _write_json(os.path.join(out_dir, "resolved_config.json"), grid.resolved)

    for label, scn in grid.points():
        point_dir = os.path.join(out_dir, label)
        os.makedirs(point_dir, exist_ok=True)
        try:
            batch = sim.run_closed_loop(scn, jobs=args.jobs, cache_dir=cache_dir)
        except IndefiniteL as exc:
            print(f"{label}: MOMENT FAILURE: {exc}", file=sys.stderr)
            return EXIT_MOMENTS
        except SolverFailure as exc:
            print(f"{label}: SOLVER FAILURE: {exc}", file=sys.stderr)
            return EXIT_SOLVER
        doc = {"grid": grid.grid_coords(label), "metrics": sim.metrics(batch),
               "baselines": {}, "comparison": {}}
        if args.trace:
            batch.to_csv(os.path.join(point_dir, "trace.csv"))
        if args.packet_trace:
            batch.to_packet_csv(os.path.join(point_dir, "packet_trace.csv"),
                                scn.N_r)
        for kind in args.baseline:
            try:
                bl = sim.run_baseline(scn, kind, jobs=args.jobs, cache_dir=cache_dir)
            except SolverFailure as exc:
                print(f"{label}/{kind}: SOLVER FAILURE: {exc}", file=sys.stderr)
                return EXIT_SOLVER
            bmet = sim.metrics(bl)
            doc["baselines"][kind] = bmet
            if bmet["avg_cost"]:
                doc["comparison"][f"cost_pct_diff_vs_{kind}"] = float(
                    100.0 * (bmet["avg_cost"] - doc["metrics"]["avg_cost"])
                    / bmet["avg_cost"])
            if args.trace:
                bl.to_csv(os.path.join(point_dir, f"trace_{kind}.csv"))
        _write_json(os.path.join(point_dir, "metrics.json"), doc)
        _write_json(os.path.join(point_dir, "resolved_config.json"),
                    {"label": label, "config_hash": manifest["config_hash"]})
        print(f"{label}: msb_avg {doc['metrics']['msb_time_avg']:.4g} "
              f"cost {doc['metrics']['avg_cost']:.4g} "
              f"sparsity {doc['metrics']['sparsity_pct']:.2f}%")
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import ReportError, collect_runs, render_figures, write_tables
    out_dir = args.out or os.path.join(args.run_dir, "report")
    try:
        rows = collect_runs(args.run_dir)
    except ReportError as exc:
        print(f"report error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    written = write_tables(rows, out_dir)
    written += render_figures(rows, out_dir)
    for path in written:
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="netspc",
                                 description="sparse stochastic predictive "
                                             "control scenario runner")
    sub = ap.add_subparsers(dest="command", required=True)

    p_m = sub.add_parser("moments", help="estimate and cache moment matrices")
    p_m.add_argument("config")
    p_m.add_argument("--cache-dir", default=".netspc_cache")
    p_m.add_argument("--samples", type=int, default=None)
    p_m.add_argument("--paths", type=int, default=None, help=argparse.SUPPRESS)
    p_m.add_argument("--steps", type=int, default=None, help=argparse.SUPPRESS)
    p_m.add_argument("--seed", type=int, default=None)
    p_m.set_defaults(func=cmd_moments)

    p_r = sub.add_parser("run", help="run the scenario grid")
    p_r.add_argument("config")
    p_r.add_argument("--out", required=True)
    p_r.add_argument("--cache-dir", default=None)
    p_r.add_argument("--paths", type=int, default=None)
    p_r.add_argument("--steps", type=int, default=None)
    p_r.add_argument("--protocol", choices=("tp1", "tp2"), default=None)
    p_r.add_argument("--mu", type=float, default=None)
    p_r.add_argument("--samples", type=int, default=None)
    p_r.add_argument("--seed", type=int, default=None)
    p_r.add_argument("--baseline", action="append", default=[],
                     choices=("ce_mpc", "packetized_mpc",
                              "spc_disturbance_only", "dropout_only"))
    p_r.add_argument("--jobs", type=int, default=1)
    p_r.add_argument("--trace", action=argparse.BooleanOptionalAction, default=True)
    p_r.add_argument("--packet-trace", action="store_true",
                     help="also write per-transmission packet logs")
    p_r.set_defaults(func=cmd_run)

    p_p = sub.add_parser("report", help="consolidate a run directory into "
                                        "tables and figures")
    p_p.add_argument("run_dir")
    p_p.add_argument("--out", default=None)
    p_p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
