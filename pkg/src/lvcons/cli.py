"""Command-line interface: ``lvcons <command> ...``.

Exit codes: 0 success, 1 invalid input, 2 failure while running.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional, Sequence

import numpy as np

from . import averaged as avg
from . import harness as hz
from .core import SimulationError, run, trace_to_csv
from .graph import SpectralError, WeightedDigraph, fiedler_bounds, read_edge_list, spectral_report
from .loadbalance import lb_trace_to_csv, metrics_to_csv, run_lb
from .scenario import ScenarioConfig, ScenarioError, load_scenario, parse_scenario, shipped_scenarios
from .topology import StochasticTopologySpec, build_a_max

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.replace(",", " ").split()]


def _seed(args, cfg: ScenarioConfig) -> int:
    return cfg.seed if args.seed is None else args.seed


def _seeds(args, cfg: ScenarioConfig) -> int:
    return cfg.seeds if args.seeds is None else args.seeds


def _load_graph(path: str) -> tuple[WeightedDigraph, Optional[ScenarioConfig]]:
    """An edge-list file, or a scenario (file or shipped name) whose averaged topology is used."""
    if os.path.exists(path):
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
        if "[topology]" in text:
            cfg = parse_scenario(text, os.path.basename(path))
        else:
            return read_edge_list(text), None
    else:
        cfg = load_scenario(path)
    topo = cfg.topology()
    if not isinstance(topo, StochasticTopologySpec):
        raise ScenarioError(["analyze needs an explicit link list, not a random ring"])
    return WeightedDigraph(build_a_max(topo).real_block()), cfg


def cmd_analyze(args) -> dict:
    g, cfg = _load_graph(args.graph)
    rep = spectral_report(g)
    lo, hi = fiedler_bounds(g)
    b = hz.Bundle(args.out_dir)
    b.add("eigenvalues.csv", hz.write_csv(["k", "re", "im"], ([k, z.real, z.imag] for k, z in enumerate(rep.eigenvalues))))
    lines = [
        f"nodes {g.n}",
        f"spanning tree {'yes' if rep.spanning_tree else 'no'}",
        f"balanced {'yes' if rep.balanced else 'no'}",
        f"d_max {rep.d_max:.10g}",
    ]
    if rep.lambda2 is not None:
        lines.append(f"lambda_2 {rep.lambda2.real:.10g}{rep.lambda2.imag:+.10g}i")
    lines.append(f"Re(lambda_2) upper bound {hi:.10g}")
    if lo is not None:
        lines.append(f"Re(lambda_2) lower bound {lo:.10g}")
    eps = _floats(args.eps) if args.eps else (list(cfg.eps) if cfg else [1.0, 0.1])
    x0 = np.array(_floats(args.x0)) if args.x0 else (cfg.x0() if cfg and not cfg.is_loadbalance else None)
    rows: list[list] = []
    if x0 is not None and rep.spanning_tree and rep.lambda2_re and rep.lambda2_re > 0:
        tm = avg.consensus_timing(g.weights, x0)
        lines.append(f"x* {tm.x_star:.10g}")
        rows += [["computed", tm.lambda2_re, tm.dist0_sq, e, tm.T(e)] for e in eps]
    if cfg is not None:
        rows += [r for r in hz.timing_table(cfg) if r[0] == "anchor"]
        crow = hz.constants_rows(cfg)
        b.add("constants.csv", hz.write_csv(["bound", "name", "value"], crow))
        b.add_config(cfg)
    b.add("timing.csv", hz.write_csv(["source", "lambda2_re", "dist0_sq", "eps", "T"], rows))
    for r in rows:
        lines.append(f"T({r[3]:g}) [{r[0]}] = {r[4]:.6f}")
    report = "\n".join(lines) + "\n"
    b.add("report.txt", report)
    b.write({"command": "analyze"})
    print(report, end="")
    return {}


def cmd_simulate(args) -> dict:
    cfg = load_scenario(args.config)
    seed = _seed(args, cfg)
    b = hz.Bundle(args.out_dir)
    b.add_config(cfg)
    if cfg.is_loadbalance:
        tr = run_lb(cfg.lb_scenario(), seed)
        b.add("trace.csv", lb_trace_to_csv(tr))
    else:
        b.add("trace.csv", trace_to_csv(run(cfg.consensus_scenario(), seed)))
    n = _seeds(args, cfg) if args.seeds is not None else 1
    if n > 1:
        rep = hz.replicate(cfg, n, seed, args.threads)
        b.add("replication.csv", rep.per_seed_csv())
        b.add("aggregate.csv", rep.aggregate_csv())
        b.add("mean_err.csv", rep.curve_csv())
        if rep.eps_checks:
            b.add("eps_checks.csv", rep.eps_csv())
        print(rep.summary())
        if rep.failures:
            b.write({"command": "simulate"})
            raise SimulationError(f"{len(rep.failures)} seed(s) failed")
    b.write({"command": "simulate"})
    return {}


def cmd_averaged(args) -> dict:
    cfg = load_scenario(args.config)
    sc = cfg.consensus_scenario()
    topo = build_a_max(sc.topology)
    zs = avg.run_averaged_discrete(avg.AveragedDiscreteModel(topo, sc.dynamics), sc.initial_state(), sc.schedule, sc.T)
    taus = sc.schedule.taus(sc.T)
    _, xs = avg.integrate_ode(avg.AveragedOdeModel(topo, sc.dynamics, sc.schedule.at(0)), sc.x0, float(taus[-1]), taus=taus)
    n = sc.topology.n
    b = hz.Bundle(args.out_dir)
    b.add_config(cfg)
    b.add("averaged.csv", hz.write_csv(
        ["t", "tau", "agent", "z_discrete", "x_ode"],
        ([t, taus[t], i + 1, zs[t, i], xs[t, i]] for t in range(sc.T + 1) for i in range(n)),
    ))
    b.write({"command": "averaged"})
    return {}


def cmd_deviation(args) -> dict:
    cfg = load_scenario(args.config)
    sc = cfg.consensus_scenario()
    base = _seed(args, cfg)
    n = max(_seeds(args, cfg), 2)
    est = avg.deviation_estimate(sc, range(base, base + n), mode=args.mode, threads=args.threads)
    consts = avg.deviation_bound_constants(sc.topology, sc.dynamics, sc.schedule, sc.initial_state().flat, max(sc.T, 1), cfg.get("metrics", "norm"))
    b = hz.Bundle(args.out_dir)
    b.add_config(cfg)
    b.add("deviation.csv", hz.write_csv(
        ["mode", "mean", "stderr", "n_seeds", "log_bound"], [[est.mode, est.mean, est.stderr, est.n_seeds, consts.log_bound]]))
    b.add("per_seed.csv", hz.write_csv(["seed", "max_sq_dev"], zip(range(base, base + n), est.per_seed)))
    b.write({"command": "deviation"})
    print(f"E max ||X - Z||^2 = {est.mean:.6g} +- {est.stderr:.3g}  (bound exp({consts.log_bound:.4g}))")
    return {}


def cmd_lb(args) -> dict:
    cfg = load_scenario(args.config)
    if not cfg.is_loadbalance:
        raise ScenarioError(["lb needs a scenario with a [loadbalance] section"])
    tr = run_lb(cfg.lb_scenario(), _seed(args, cfg))
    b = hz.Bundle(args.out_dir)
    b.add_config(cfg)
    b.add("lb_trace.csv", lb_trace_to_csv(tr))
    b.add("lb_metrics.csv", metrics_to_csv({"with": tr.metrics()}))
    b.write({"command": "lb"})
    return {}


def cmd_compare(args) -> dict:
    cfg = load_scenario(args.config)
    cs = hz.compare(cfg, _seed(args, cfg))
    b = hz.Bundle(args.out_dir)
    b.add_config(cfg)
    b.add("metrics.csv", cs.metrics_csv())
    s = {"steps": cs.steps, "frac_d_abs_below": cs.frac_d_abs_below, "frac_queue_leq": cs.frac_queue_leq}
    b.add("summary.json", json.dumps(s, indent=2, sort_keys=True) + "\n")
    b.write({"command": "compare"})
    print(json.dumps(s, sort_keys=True))
    return s


def cmd_sweep(args) -> dict:
    cfg = load_scenario(args.config)
    alphas = _floats(args.alphas)
    scheds = hz.sweep_schedules(alphas, args.one_over_t)
    if len(scheds) < 2:
        raise ScenarioError(["a sweep needs at least two schedules"])
    base = _seed(args, cfg)
    rep = hz.step_size_sweep(cfg, scheds, range(base, base + _seeds(args, cfg)), args.threads)
    b = hz.Bundle(args.out_dir)
    b.add_config(cfg)
    b.add("sweep_summary.csv", rep.summary_csv())
    b.add("sweep_curves.csv", rep.curves_csv())
    b.write({"command": "sweep"})
    print(rep.summary_csv(), end="")
    return {}


def cmd_reproduce(args) -> dict:
    s = hz.reproduce(args.name, args.out_dir, args.seeds, args.threads, args.full, args.seed)
    print(json.dumps(s, indent=2, sort_keys=True, default=float))
    return s


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="base seed (default: from the scenario)")
    common.add_argument("--seeds", type=int, default=None, help="number of seeds")
    common.add_argument("--out-dir", default="out", help="output directory (default: out)")
    common.add_argument("--threads", type=int, default=1, help="worker threads")

    p = argparse.ArgumentParser(prog="lvcons", description="Stochastic consensus and load-balancing experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    a = sub.add_parser("analyze", parents=[common], help="spectral report for a graph or scenario")
    a.add_argument("graph", help="edge-list file, scenario file or shipped scenario name")
    a.add_argument("--eps", help="eps values for the timing table, e.g. '1 0.1'")
    a.add_argument("--x0", help="initial state for the timing table")
    for name, fn_help in (
        ("simulate", "run a scenario (one trace; replication summary with --seeds)"),
        ("averaged", "averaged discrete and ODE trajectories"),
        ("deviation", "Monte-Carlo deviation from the averaged model"),
        ("lb", "load-balancing run"),
        ("compare", "with vs without redistribution"),
        ("sweep", "step-size sweep"),
    ):
        sp = sub.add_parser(name, parents=[common], help=fn_help)
        sp.add_argument("config", help=f"scenario file or one of: {', '.join(shipped_scenarios())}")
        if name == "deviation":
            sp.add_argument("--mode", choices=("discrete", "ode"), default="discrete")
        if name == "sweep":
            sp.add_argument("--alphas", default="0.05 0.1 0.2")
            sp.add_argument("--one-over-t", type=float, default=1.0, help="alpha/t arm numerator (0 disables)")
    r = sub.add_parser("reproduce", parents=[common], help="write the data behind an experiment family")
    r.add_argument("name", choices=hz.REPRODUCIBLE)
    r.add_argument("--full", action="store_true", help="full-size ring (long runtime)")
    return p


COMMANDS = {
    "analyze": cmd_analyze,
    "simulate": cmd_simulate,
    "averaged": cmd_averaged,
    "deviation": cmd_deviation,
    "lb": cmd_lb,
    "compare": cmd_compare,
    "sweep": cmd_sweep,
    "reproduce": cmd_reproduce,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    if args.seeds is not None and args.seeds < 1:
        print("error: --seeds must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        COMMANDS[args.command](args)
    except ScenarioError as exc:
        for e in exc.errors:
            print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (SimulationError, SpectralError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
