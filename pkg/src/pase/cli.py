"""Command-line interface: ``pase <command> ...``.

Commands
--------
run         simulate one scenario, write results/diagnostics CSV and a scenario JSON
sweep       grid over PMU counts, time-steps and PMU accuracy (simulation or theory)
theory      a-priori analysis only, optionally the minimum PMU count for a target
place       greedy PMU placement
fit         fit per-bus load statistics from a household trace CSV
gen-traces  write synthetic household traces to CSV
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .harness import SimulationConfig, build_scenario, run, sweep, write_diagnostics_csv, write_results_csv
from .loadmodel import (
    DAY,
    ForecastSet,
    LoadEvolutionModel,
    ProfileParams,
    aggregate_profile,
    error_autocorrelation,
    fit_evolution_model,
    forecast_from_profile,
    house_count,
    read_traces_csv,
    save_fitted_model,
    synth_traces,
    write_traces_csv,
)
from .measurement import save_placement
from .network import dlf_matrix, load_network
from .theory import enkf_theory


def _floats(text):
    return [float(v) for v in text.split(",")] if text else None


def _ints(text):
    return [int(v) for v in text.split(",")] if text else None


def _config(args, **extra) -> SimulationConfig:
    overrides = {
        "network": args.network,
        "dt_s": getattr(args, "dt", None),
        "horizon_s": getattr(args, "horizon", None),
        "members": getattr(args, "members", None),
        "sigma_pmu": getattr(args, "sigma_pmu", None),
        "sigma0": getattr(args, "sigma0", None),
        "n_pmus": getattr(args, "n_pmus", None),
        "estimators": getattr(args, "estimators", None),
        "seed": getattr(args, "seed", None),
        **extra,
    }
    if getattr(args, "pmu_buses", None):
        overrides["pmu_buses"] = _ints(args.pmu_buses)
    if args.config:
        return SimulationConfig.from_json(args.config, **overrides)
    return SimulationConfig(**{k: v for k, v in overrides.items() if v is not None})


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with SimulationConfig fields; flags override it")
    p.add_argument("--network", help="feeder CSV (default: bundled 33-bus feeder)")


def cmd_run(args) -> int:
    cfg = _config(args)
    scn = build_scenario(cfg)
    res = run(cfg, scn)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_results_csv(out / "results.csv", [res.row()])
    write_diagnostics_csv(out / "diagnostics.csv", res.diagnostics)
    doc = {"config": cfg.to_dict(), "scenario": scn.to_dict()}
    (out / "scenario.json").write_text(json.dumps(doc, indent=2))
    for name, val in res.armsev.items():
        print(f"ARMSEV {name}: {val:.6f} p.u.")
    if len(res.armsev) == 2:
        print(f"gain: {res.gain:.4f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    seeds = [args.seed + r for r in range(args.realizations)]
    rows = sweep(cfg, n_pmus=_ints(args.n_pmus_list) or [cfg.n_pmus], dt_s=_floats(args.dt_list) or [cfg.dt_s],
                 sigma_pmu=_floats(args.sigma_pmu_list) or [cfg.sigma_pmu], seeds=seeds,
                 simulate=not args.theory_only, out=args.out)
    print(f"{len(rows)} rows written to {args.out}")
    return 0


def _seeded(cfg):
    # scenario statistics still depend on which houses feed each bus
    return cfg if cfg.seed is not None else cfg.replace(seed=0)


def cmd_theory(args) -> int:
    cfg = _seeded(_config(args))
    rows = []
    dts = _floats(args.dt_list) or [cfg.dt_s]
    sigmas = _floats(args.sigma_pmu_list) or [cfg.sigma_pmu]
    for dt in dts:
        scn = build_scenario(cfg.replace(dt_s=dt))
        M = dlf_matrix(scn.net)
        counts = _ints(args.n_pmus_list) or list(range(scn.net.n_load + 1))
        for sp in sigmas:
            for k in counts:
                th = enkf_theory(scn.theory_config(sp, scn.greedy_order[:k]), M)
                rows.append({"n_pmus": k, "dt_s": dt, "sigma_pmu": sp, "armsev_wls": th.armsev_wls,
                             "armsev_enkf": th.armsev_enkf, "gain": th.gain})
            if args.target is not None:
                def evaluate(k, which):
                    th = enkf_theory(scn.theory_config(sp, scn.greedy_order[:k]), M)
                    return th.armsev_wls if which == "wls" else th.armsev_enkf
                for which in ("wls", "enkf"):
                    k = harness.min_pmus_for_target(lambda k: evaluate(k, which), args.target, scn.net.n_load)
                    print(f"dt={dt:g} s sigma_pmu={sp:g}: {which} needs {k if k is not None else '>all'} PMUs")
    write_results_csv(args.out, rows, harness.THEORY_COLUMNS)
    print(f"{len(rows)} rows written to {args.out}")
    return 0


def cmd_place(args) -> int:
    cfg = _seeded(_config(args, n_pmus=args.k))
    scn = build_scenario(cfg)
    save_placement(args.out, scn.placement)
    print("greedy order:", " ".join(str(b) for b in scn.placement.buses))
    return 0


def cmd_fit(args) -> int:
    net = load_network(args.network)
    p_traces = read_traces_csv(args.traces)
    q_traces = read_traces_csv(args.q_traces) if args.q_traces else p_traces
    resolution = p_traces[0].resolution
    houses = house_count(net, args.n_ref, args.ref_bus)
    rng = np.random.default_rng(args.seed)
    n = net.n_load
    b = np.zeros((2, n))
    psi = np.zeros((2, n))
    mean = np.zeros((2, n))
    for side, (traces, loads) in enumerate(((p_traces, net.p_load[1:]), (q_traces, net.q_load[1:]))):
        for i in range(n):
            if loads[i] == 0:
                continue
            prof = aggregate_profile(traces, min(int(houses[i]), len(traces)), loads[i], rng)
            b[side, i] = fit_evolution_model(prof, args.dt, resolution).b
            psi[side, i] = error_autocorrelation(prof, args.dt, resolution) if np.ptp(prof) > 0 else 0.0
            mean[side, i] = forecast_from_profile(prof)
    model = LoadEvolutionModel(b[0], b[1])
    fc = ForecastSet(mean[0], mean[1], args.sigma0, psi[0], psi[1], DAY)
    save_fitted_model(args.out, model, fc)
    print(f"fitted model for {n} buses written to {args.out}")
    return 0


def cmd_gen_traces(args) -> int:
    params = ProfileParams(**json.loads(args.profile)) if args.profile else None
    traces = synth_traces(args.count, args.duration, args.resolution, params, args.seed)
    write_traces_csv(args.out, traces)
    print(f"{len(traces)} traces written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pase", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def sim_flags(p, seed_required):
        _common(p)
        p.add_argument("--seed", type=int, required=seed_required, help="master seed")
        p.add_argument("--dt", type=float, help="time-step in seconds")
        p.add_argument("--sigma-pmu", type=float, dest="sigma_pmu")
        p.add_argument("--sigma0", type=float)

    p = sub.add_parser("run", help="simulate one scenario")
    sim_flags(p, True)
    p.add_argument("--horizon", type=float, help="simulated time in seconds")
    p.add_argument("--members", type=int, help="ensemble size")
    p.add_argument("--n-pmus", type=int, dest="n_pmus", help="greedy prefix length")
    p.add_argument("--pmu-buses", dest="pmu_buses", help="explicit comma-separated PMU buses")
    p.add_argument("--estimators", choices=["wls", "pase", "both"])
    p.add_argument("--out-dir", default=".", help="directory for results.csv, diagnostics.csv, scenario.json")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="grid of runs or theory evaluations")
    sim_flags(p, True)
    p.add_argument("--horizon", type=float)
    p.add_argument("--members", type=int)
    p.add_argument("--estimators", choices=["wls", "pase", "both"])
    p.add_argument("--n-pmus-list", help="comma-separated PMU counts")
    p.add_argument("--dt-list", help="comma-separated time-steps (s)")
    p.add_argument("--sigma-pmu-list", help="comma-separated PMU accuracies")
    p.add_argument("--realizations", type=int, default=5, help="seeds seed .. seed+R-1 are averaged")
    p.add_argument("--theory-only", action="store_true")
    p.add_argument("--out", default="sweep.csv")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("theory", help="a-priori analysis")
    sim_flags(p, False)
    p.add_argument("--n-pmus-list", help="comma-separated PMU counts (default 0..all)")
    p.add_argument("--dt-list", help="comma-separated time-steps (s)")
    p.add_argument("--sigma-pmu-list", help="comma-separated PMU accuracies")
    p.add_argument("--target", type=float, help="print the minimum PMU count reaching this ARMSEV (p.u.)")
    p.add_argument("--out", default="theory.csv")
    p.set_defaults(func=cmd_theory)

    p = sub.add_parser("place", help="greedy PMU placement")
    sim_flags(p, False)
    p.add_argument("--k", type=int, required=True, help="number of PMUs")
    p.add_argument("--out", default="placement.json")
    p.set_defaults(func=cmd_place)

    p = sub.add_parser("fit", help="fit load statistics from household traces")
    p.add_argument("--traces", required=True, help="trace CSV (timestamp_s, one column per house)")
    p.add_argument("--q-traces", help="separate trace CSV for reactive power")
    p.add_argument("--network")
    p.add_argument("--dt", type=float, default=6.0)
    p.add_argument("--sigma0", type=float, default=0.30)
    p.add_argument("--n-ref", type=int, default=10, dest="n_ref")
    p.add_argument("--ref-bus", type=int, default=10, dest="ref_bus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="model.json")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("gen-traces", help="write synthetic household traces")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration", type=float, default=DAY)
    p.add_argument("--resolution", type=float, default=6.0)
    p.add_argument("--profile", help="JSON object overriding generator parameters")
    p.add_argument("--out", default="traces.csv")
    p.set_defaults(func=cmd_gen_traces)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
