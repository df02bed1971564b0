"""Seeded replication, step-size sweeps, comparison runs and reproduction bundles.

Work fans out over a thread pool; results are always collected and reduced in
seed order, so aggregates do not depend on the number of threads or on which
run finishes first.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import averaged as avg
from .core import StepSizeSchedule, run, trace_to_csv
from .loadbalance import lb_trace_to_csv, metrics_to_csv, run_comparison, run_lb
from .scenario import ScenarioConfig, load_scenario
from .topology import StochasticTopologySpec, build_a_max

__all__ = [
    "SeedResult",
    "ReplicationReport",
    "replicate",
    "aggregate",
    "SweepRow",
    "SweepReport",
    "step_size_sweep",
    "first_hit",
    "ComparisonSummary",
    "compare",
    "timing_table",
    "constants_rows",
    "write_csv",
    "read_csv",
    "write_manifest",
    "reproduce",
    "REPRODUCIBLE",
]

REPRODUCIBLE = ("six-node", "six-node-delayed", "ring")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def read_csv(text: str) -> list[dict[str, str]]:
    return list(csv.DictReader(io.StringIO(text)))


def pmap(fn: Callable, items: Sequence, threads: int = 1) -> list:
    """``[fn(x) for x in items]``, optionally on a thread pool; order preserved."""
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def first_hit(curve: np.ndarray, threshold: float, start: int = 0) -> Optional[int]:
    """First index ``t >= start`` with ``curve[t] <= threshold`` (None when never)."""
    idx = np.nonzero(np.asarray(curve)[start:] <= threshold)[0]
    return int(start + idx[0]) if idx.size else None


def _mean_se(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return math.nan, math.nan
    if not np.all(np.isfinite(v)):
        # censored runs (inf) make the mean infinite and the spread undefined
        return (math.inf if np.any(v == math.inf) else math.nan), math.nan
    mean = math.fsum(v) / v.size
    se = math.sqrt(math.fsum((v - mean) ** 2) / (v.size - 1) / v.size) if v.size > 1 else math.nan
    return mean, se


# -- replication ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SeedResult:
    seed: int
    metrics: dict[str, float] = field(default_factory=dict)
    error: Optional[str] = None
    curve: Optional[np.ndarray] = field(default=None, repr=False)
    agent_sq_dev: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return self.error is None


def _consensus_seed(cfg: ScenarioConfig, seed: int) -> SeedResult:
    tr = run(cfg.consensus_scenario(), seed)
    x_star = tr.x_star if tr.x_star is not None else float(tr.states[-1].mean())
    sq = (tr.states[-1] - x_star) ** 2
    err = tr.err()
    m = {
        "final_err": float(err[-1]),
        "max_agent_sq_dev": float(sq.max()),
        "final_mean": float(tr.states[-1].mean()),
        "x_star": float(x_star),
    }
    return SeedResult(seed, m, None, err, sq)


def _lb_seed(cfg: ScenarioConfig, seed: int) -> SeedResult:
    tr = run_lb(cfg.lb_scenario(), seed)
    mt = tr.metrics()
    warm = int(cfg.get("metrics", "warmup"))
    hit = first_hit(mt.err, float(cfg.get("metrics", "err_threshold")))
    m = {
        "final_err": float(mt.err[-1]),
        "mean_d_abs": float(np.mean(mt.d_abs[warm:])),
        "final_total_queue": float(mt.total_queue[-1]),
        "time_to_threshold": float(hit) if hit is not None else math.inf,
    }
    return SeedResult(seed, m, None, mt.err, None)


def _one_seed(cfg: ScenarioConfig, seed: int) -> SeedResult:
    try:
        return _lb_seed(cfg, seed) if cfg.is_loadbalance else _consensus_seed(cfg, seed)
    except Exception as exc:  # reported per seed, siblings continue
        return SeedResult(seed, {}, f"{type(exc).__name__}: {exc}")


def aggregate(rows: Sequence[SeedResult]) -> dict[str, tuple[float, float]]:
    """Mean and standard error per metric over successful seeds, reduced in seed order."""
    ok = sorted((r for r in rows if r.ok), key=lambda r: r.seed)
    keys = list(ok[0].metrics) if ok else []
    return {k: _mean_se([r.metrics[k] for r in ok]) for k in keys}


@dataclass(frozen=True, eq=False)
class ReplicationReport:
    config_echo: str
    config_hash: str
    seeds: tuple[int, ...]
    rows: tuple[SeedResult, ...]
    aggregate: dict[str, tuple[float, float]]
    mean_curve: Optional[np.ndarray]
    eps_checks: dict[float, tuple[float, bool]]
    constants: Optional[dict] = None

    @property
    def failures(self) -> dict[int, str]:
        return {r.seed: r.error for r in self.rows if not r.ok}

    def per_seed_csv(self) -> str:
        keys = list(self.aggregate)
        return write_csv(["seed", *keys, "error"],
                         ([r.seed, *[r.metrics.get(k, math.nan) for k in keys], r.error or ""] for r in self.rows))

    def aggregate_csv(self) -> str:
        return write_csv(["metric", "mean", "stderr", "n_seeds"],
                         ([k, m, s, sum(r.ok for r in self.rows)] for k, (m, s) in self.aggregate.items()))

    def curve_csv(self) -> str:
        c = self.mean_curve if self.mean_curve is not None else np.array([])
        return write_csv(["t", "mean_err"], ((t, v) for t, v in enumerate(c)))

    def eps_csv(self) -> str:
        return write_csv(["eps", "max_agent_mean_sq_dev", "pass"],
                         ((e, v, int(p)) for e, (v, p) in self.eps_checks.items()))

    def summary(self) -> str:
        lines = [f"config sha256 {self.config_hash}", f"seeds {self.seeds[0]}..{self.seeds[-1]} ({len(self.seeds)})"]
        for k, (m, s) in self.aggregate.items():
            lines.append(f"{k:>20s}  mean {m:.6g}  stderr {s:.3g}")
        for e, (v, p) in self.eps_checks.items():
            lines.append(f"eps {e:g}: max_i E(x_i - x*)^2 = {v:.6g} -> {'pass' if p else 'fail'}")
        for seed, msg in self.failures.items():
            lines.append(f"seed {seed} failed: {msg}")
        return "\n".join(lines)


def replicate(
    cfg: ScenarioConfig,
    n_seeds: Optional[int] = None,
    base_seed: Optional[int] = None,
    threads: int = 1,
) -> ReplicationReport:
    n_seeds = cfg.seeds if n_seeds is None else n_seeds
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    base = cfg.seed if base_seed is None else base_seed
    seeds = tuple(range(base, base + n_seeds))
    rows = tuple(pmap(lambda s: _one_seed(cfg, s), seeds, threads))
    ok = [r for r in rows if r.ok]
    curve = None
    if ok:
        curves = np.array([r.curve for r in ok])
        curve = np.array([math.fsum(col) / len(ok) for col in curves.T])
    eps_checks: dict[float, tuple[float, bool]] = {}
    if ok and not cfg.is_loadbalance:
        dev = np.array([r.agent_sq_dev for r in ok])
        per_agent = np.array([math.fsum(col) / len(ok) for col in dev.T])
        worst = float(per_agent.max())
        eps_checks = {float(e): (worst, worst <= e) for e in cfg.eps}
    return ReplicationReport(cfg.echo(), cfg.config_hash(), seeds, rows, aggregate(rows), curve, eps_checks)


# -- step-size sweep --------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SweepRow:
    label: str
    schedule: StepSizeSchedule
    hit_times: tuple[float, ...]
    recovery_times: tuple[float, ...]
    mean_curve: np.ndarray = field(repr=False)

    @property
    def time_to_threshold(self) -> tuple[float, float]:
        return _mean_se(self.hit_times)

    @property
    def recovery(self) -> tuple[float, float]:
        return _mean_se(self.recovery_times)

    @property
    def censored(self) -> int:
        return sum(1 for v in self.hit_times if v == math.inf)


@dataclass(frozen=True, eq=False)
class SweepReport:
    threshold: float
    injection_time: Optional[int]
    horizon: int
    rows: tuple[SweepRow, ...]

    def summary_csv(self) -> str:
        out = []
        for r in self.rows:
            m, s = r.time_to_threshold
            rm, rs = r.recovery
            out.append([r.label, m, s, r.censored, rm, rs])
        return write_csv(["schedule", "mean_time_to_threshold", "stderr", "censored", "mean_recovery", "recovery_stderr"], out)

    def curves_csv(self) -> str:
        return write_csv(["schedule", "t", "mean_err"],
                         ([r.label, t, v] for r in self.rows for t, v in enumerate(r.mean_curve)))


def schedule_label(s: StepSizeSchedule) -> str:
    if s.kind == "constant":
        return f"alpha={s.alpha:g}"
    if s.kind == "one-over-t":
        return f"alpha={s.alpha:g}/t"
    return "explicit"


def _err_curve(cfg: ScenarioConfig, sched: StepSizeSchedule, seed: int) -> np.ndarray:
    if cfg.is_loadbalance:
        return run_lb(cfg.lb_scenario(sched), seed).metrics().err
    return run(cfg.consensus_scenario(sched), seed).err()


def step_size_sweep(
    cfg: ScenarioConfig,
    schedules: Sequence[StepSizeSchedule],
    seeds: Sequence[int],
    threads: int = 1,
    threshold: Optional[float] = None,
) -> SweepReport:
    """Err curves per schedule; first time ``Err <= threshold`` and, when the
    scenario injects work, the time to get back under it afterwards.

    Runs that never reach the threshold count as ``inf`` (censored at the horizon).
    """
    thr = float(cfg.get("metrics", "err_threshold")) if threshold is None else threshold
    inj = None
    if cfg.is_loadbalance and cfg.arrivals().injections:
        inj = min(t for t, _, _ in cfg.arrivals().injections)
    seeds = list(seeds)
    rows = []
    for sched in schedules:
        curves = pmap(lambda s: _err_curve(cfg, sched, s), seeds, threads)
        hits, recs = [], []
        for c in curves:
            h = first_hit(c, thr)
            hits.append(float(h) if h is not None else math.inf)
            if inj is not None:
                r = first_hit(c, thr, inj + 1)
                recs.append(float(r - inj) if r is not None else math.inf)
        arr = np.array(curves)
        mean_curve = np.array([math.fsum(col) / len(seeds) for col in arr.T])
        rows.append(SweepRow(schedule_label(sched), sched, tuple(hits), tuple(recs), mean_curve))
    return SweepReport(thr, inj, cfg.T, tuple(rows))


# -- comparison -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ComparisonSummary:
    """With- and without-redistribution arms of one seed on common arrivals.

    Fractions are over steps ``t >= warmup`` at which the without-arm still
    holds work.
    """

    seed: int
    with_arm: object = field(repr=False)
    without_arm: object = field(repr=False)
    steps: int
    frac_d_abs_below: float
    frac_queue_leq: float

    def metrics_csv(self) -> str:
        return metrics_to_csv({"with": self.with_arm.metrics(), "without": self.without_arm.metrics()})


def compare(cfg: ScenarioConfig, seed: Optional[int] = None, T: Optional[int] = None) -> ComparisonSummary:
    if not cfg.is_loadbalance:
        raise ValueError("comparison needs a load-balancing scenario")
    seed = cfg.seed if seed is None else seed
    w, wo = run_comparison(cfg.lb_scenario(), seed, T)
    mw, mo = w.metrics(), wo.metrics()
    t = np.arange(w.q.shape[0])
    sel = (t >= int(cfg.get("metrics", "warmup"))) & (wo.q.sum(axis=1) > 0)
    steps = int(sel.sum())
    if steps == 0:
        return ComparisonSummary(seed, w, wo, 0, math.nan, math.nan)
    below = float(np.mean(mw.d_abs[sel] < mo.d_abs[sel]))
    leq = float(np.mean(mw.total_queue[sel] <= mo.total_queue[sel] + 1e-9))
    return ComparisonSummary(seed, w, wo, steps, below, leq)


# -- analysis tables --------------------------------------------------------


def timing_table(cfg: ScenarioConfig) -> list[list]:
    """Rows ``[source, lambda2_re, dist0_sq, eps, T]``.

    ``computed`` uses the scenario's averaged topology and initial state;
    ``anchor`` back-solves the initial spread from the reference row in
    ``[metrics]`` when one is given.
    """
    topo = cfg.topology()
    rows: list[list] = []
    eps_list = list(cfg.eps)
    eps_list += [e / 4 for e in eps_list if e / 4 not in eps_list]
    if isinstance(topo, StochasticTopologySpec) and not cfg.is_loadbalance:
        tm = avg.consensus_timing(build_a_max(topo).real_block(), cfg.x0())
        for e in eps_list:
            rows.append(["computed", tm.lambda2_re, tm.dist0_sq, e, tm.T(e)])
    lam, Ta, ea = (cfg.get("metrics", k) for k in ("anchor_lambda2", "anchor_T", "anchor_eps"))
    if None not in (lam, Ta, ea):
        d0 = avg.dist0_from_anchor(lam, cfg.n, Ta, ea)
        for e in sorted(set(eps_list) | {ea}, reverse=True):
            rows.append(["anchor", lam, d0, e, avg.time_to_eps_consensus(lam, cfg.n, d0, e)])
    return rows


def constants_rows(cfg: ScenarioConfig) -> list[list]:
    """Bound-constant block: ``[bound, name, value]`` rows."""
    topo = cfg.topology()
    if not isinstance(topo, StochasticTopologySpec) or cfg.is_loadbalance:
        return []
    sc = cfg.consensus_scenario()
    norm = cfg.get("metrics", "norm")
    X0 = sc.initial_state().flat
    rows = []
    c3 = avg.deviation_bound_constants(topo, sc.dynamics, sc.schedule, X0, max(cfg.T, 1), norm)
    for k, v in c3.as_dict().items():
        if v is not None:
            rows.append(["discrete-deviation", k, v])
    if sc.schedule.kind == "constant" and sc.dynamics.name == "identity-control":
        try:
            c5 = avg.consensus_bound_constants(topo, sc.schedule.alpha, max(cfg.T, 1), X0, norm=norm)
        except ValueError as exc:
            rows.append(["eps-consensus", "error", str(exc)])
        else:
            for k, v in c5.as_dict().items():
                if v is not None:
                    rows.append(["eps-consensus", k, v])
    return rows


# -- bundles ----------------------------------------------------------------


def _sha256(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class Bundle:
    """Collects output files and writes them with a manifest."""

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        self.files: dict[str, str] = {}
        self.configs: dict[str, str] = {}

    def add(self, name: str, text: str) -> None:
        self.files[name] = text

    def add_config(self, cfg: ScenarioConfig) -> None:
        key = cfg.name or "scenario"
        self.configs[key] = cfg.config_hash()
        self.add(f"{key}.echo.cfg", cfg.echo())

    def write(self, extra: Optional[dict] = None) -> str:
        os.makedirs(self.out_dir, exist_ok=True)
        for name, text in self.files.items():
            with open(os.path.join(self.out_dir, name), "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return write_manifest(self.out_dir, {n: _sha256(t) for n, t in self.files.items()}, self.configs, extra)


def write_manifest(out_dir: str, artifacts: dict[str, str], config_hashes: dict[str, str], extra: Optional[dict] = None) -> str:
    doc = {
        "artifacts": [{"path": k, "sha256": v} for k, v in sorted(artifacts.items())],
        "config_sha256": dict(sorted(config_hashes.items())),
    }
    if extra:
        doc.update(extra)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _averaged_vs_stochastic(cfg: ScenarioConfig, seed: int) -> str:
    sc = cfg.consensus_scenario()
    tr = run(sc, seed)
    taus = sc.schedule.taus(sc.T)
    model = avg.AveragedOdeModel(build_a_max(sc.topology), sc.dynamics, sc.schedule.at(0))
    _, xs = avg.integrate_ode(model, sc.x0, float(taus[-1]), taus=taus)
    return write_csv(
        ["t", "tau", "agent", "x_stochastic", "x_averaged"],
        ([t, taus[t], i + 1, tr.states[t, i], xs[t, i]] for t in range(sc.T + 1) for i in range(sc.topology.n)),
    )


def _discrete_vs_stochastic(cfg: ScenarioConfig, seed: int) -> str:
    sc = cfg.consensus_scenario()
    tr = run(sc, seed)
    model = avg.AveragedDiscreteModel(build_a_max(sc.topology), sc.dynamics)
    zs = avg.run_averaged_discrete(model, sc.initial_state(), sc.schedule, sc.T)
    n = sc.topology.n
    return write_csv(
        ["t", "agent", "x_stochastic", "z_averaged"],
        ([t, i + 1, tr.states[t, i], zs[t, i]] for t in range(sc.T + 1) for i in range(n)),
    )


def sweep_schedules(alphas: Sequence[float] = (0.05, 0.1, 0.2), one_over_t: float = 1.0) -> list[StepSizeSchedule]:
    out = [StepSizeSchedule("constant", a) for a in alphas]
    if one_over_t:
        out.append(StepSizeSchedule("one-over-t", one_over_t))
    return out


def reproduce(
    name: str,
    out_dir: str,
    seeds: Optional[int] = None,
    threads: int = 1,
    full: bool = False,
    base_seed: Optional[int] = None,
) -> dict[str, object]:
    """Write the data behind one experiment family to ``out_dir``; return a summary."""
    if name not in REPRODUCIBLE:
        raise ValueError(f"unknown experiment {name!r}; choose from {REPRODUCIBLE}")
    b = Bundle(out_dir)
    summary: dict[str, object] = {"experiment": name}
    if name in ("six-node", "six-node-delayed"):
        cfg = load_scenario(name)
        b.add_config(cfg)
        seed = cfg.seed if base_seed is None else base_seed
        b.add("trace.csv", trace_to_csv(run(cfg.consensus_scenario(), seed)))
        b.add("timing.csv", write_csv(["source", "lambda2_re", "dist0_sq", "eps", "T"], timing_table(cfg)))
        b.add("constants.csv", write_csv(["bound", "name", "value"], constants_rows(cfg)))
        rep = replicate(cfg, seeds, seed, threads)
        b.add("replication.csv", rep.per_seed_csv())
        b.add("replication_mean_err.csv", rep.curve_csv())
        b.add("eps_checks.csv", rep.eps_csv())
        summary["replication"] = {k: list(v) for k, v in rep.aggregate.items()}
        if name == "six-node":
            b.add("averaged_ode.csv", _averaged_vs_stochastic(cfg, seed))
            lb = load_scenario("six-node-lb")
            b.add_config(lb)
            tr = run_lb(lb.lb_scenario(), seed)
            b.add("lb_trace.csv", lb_trace_to_csv(tr))
            b.add("lb_metrics.csv", metrics_to_csv({"with": tr.metrics()}))
            n_sw = seeds if seeds is not None else lb.seeds
            sw = step_size_sweep(lb, sweep_schedules(), range(seed, seed + n_sw), threads)
            b.add("sweep_summary.csv", sw.summary_csv())
            b.add("sweep_curves.csv", sw.curves_csv())
            summary["sweep"] = {r.label: list(r.time_to_threshold) for r in sw.rows}
        else:
            b.add("averaged_discrete.csv", _discrete_vs_stochastic(cfg, seed))
            n_dev = seeds if seeds is not None else min(cfg.seeds, 30)
            est = avg.deviation_estimate(cfg.consensus_scenario(), range(seed, seed + max(n_dev, 2)), threads=threads)
            b.add("deviation.csv", write_csv(["mode", "mean", "stderr", "n_seeds"], [[est.mode, est.mean, est.stderr, est.n_seeds]]))
            summary["deviation"] = [est.mean, est.stderr]
    else:
        for label, cname in (("stream", "ring-full" if full else "ring"), ("batch", "ring-batch")):
            cfg = load_scenario(cname)
            if full and label == "batch":
                continue
            b.add_config(cfg)
            cs = compare(cfg, base_seed)
            b.add(f"ring_{label}_metrics.csv", cs.metrics_csv())
            summary[label] = {"steps": cs.steps, "frac_d_abs_below": cs.frac_d_abs_below, "frac_queue_leq": cs.frac_queue_leq}
    b.add("summary.json", json.dumps(summary, indent=2, sort_keys=True, default=float) + "\n")
    b.write({"experiment": name, "threads_independent": True})
    return summary
