"""Load balancing with the local voting protocol.

Agent ``i`` holds ``q`` units of work and processes ``p`` units per step; its
load is ``x = q / p``.  Queues evolve as ``q' = max(0, q - p + z + u)``.  The
protocol uses weights ``b^{ij} = p^j / p^i`` (times the link's own weight) on
noisy, possibly delayed readings of neighbour queue lengths.

Two ways to turn the protocol into queue increments ``u``:

* ``state`` -- the literal per-agent increment ``p^i * u_x^i``; total work is
  not conserved when productivities differ.
* ``transfer`` -- antisymmetric pairwise job transfers.  For every linked pair
  the transfer is the average of the two endpoints' protocol terms, and an
  agent never ships out more than it holds.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

from .core import ExtendedState, StepSizeSchedule, observe
from .rng import Kind, stream
from .topology import (
    AveragedTopology,
    StochasticTopologySpec,
    TopologyDraw,
    _noise,
    build_a_max,
    sample,
)

__all__ = [
    "LbAgentState",
    "queue_step",
    "lb_protocol",
    "transfer_increments",
    "optimal_redistribution",
    "completion_time",
    "LbMetrics",
    "metrics",
    "ArrivalProcess",
    "RingTopology",
    "draw_topology",
    "LbScenario",
    "LbTrace",
    "run_lb",
    "run_comparison",
    "lb_spec",
    "lb_a_max",
    "lb_trace_to_csv",
    "lb_trace_from_csv",
    "metrics_to_csv",
    "metrics_from_csv",
    "MODES",
]

MODES = ("transfer", "state")
CONSERVATION_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class LbAgentState:
    q: np.ndarray
    p: np.ndarray

    def __post_init__(self) -> None:
        q = np.asarray(self.q, dtype=float)
        p = np.asarray(self.p, dtype=float)
        if q.shape != p.shape:
            raise ValueError("q and p must have the same shape")
        if np.any(q < 0):
            raise ValueError("queue lengths must be >= 0")
        if np.any(p <= 0):
            raise ValueError("productivities must be positive")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "p", p)

    @property
    def load(self) -> np.ndarray:
        return self.q / self.p


def queue_step(
    q: np.ndarray,
    p: np.ndarray,
    z: np.ndarray,
    u: np.ndarray,
    conserve: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """``q' = max(0, q - p + z + u)``; also returns the idle (unused) capacity.

    With ``conserve=True`` a redistribution whose sum is not zero aborts.
    """
    q, p, z, u = (np.asarray(v, dtype=float) for v in (q, p, z, u))
    if conserve:
        s = float(np.sum(u))
        if abs(s) > CONSERVATION_TOL * max(1.0, float(np.sum(np.abs(u)))):
            raise ValueError(f"redistribution does not conserve work: sum(u) = {s!r}")
    raw = q - p + z + u
    return np.maximum(raw, 0.0), np.maximum(-raw, 0.0)


def _check_p(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if np.any(~(p > 0)):
        raise ValueError("productivities must be positive")
    return p


def _edge_terms(own: np.ndarray, edge: np.ndarray, p: np.ndarray, draw: TopologyDraw) -> np.ndarray:
    """Per active link ``j -> i``: ``b^{ij} (y^{ij}/p^j - y^{ii}/p^i)`` in load units."""
    i, j = draw.recv, draw.send
    b = draw.weights * p[j] / p[i]
    return b * (edge / p[j] - own[i] / p[i])


def lb_protocol(
    own: np.ndarray,
    edge: np.ndarray,
    p: np.ndarray,
    draw: TopologyDraw,
    alpha_t: float,
) -> np.ndarray:
    """Load-unit increment ``alpha * sum_j b^{ij} (y^{ij}/p^j - y^{ii}/p^i)``.

    ``own`` and ``edge`` are queue-length readings (see :func:`lvcons.core.observe`).
    Multiply by ``p`` for queue units.
    """
    p = _check_p(p)
    terms = _edge_terms(np.asarray(own, float), np.asarray(edge, float), p, draw)
    return alpha_t * np.bincount(draw.recv, weights=terms, minlength=p.size)


def transfer_increments(
    own: np.ndarray,
    edge: np.ndarray,
    p: np.ndarray,
    q: np.ndarray,
    draw: TopologyDraw,
    alpha_t: float,
) -> np.ndarray:
    """Queue-unit increments from antisymmetric pairwise transfers (sums to 0)."""
    p = _check_p(p)
    n = p.size
    if draw.recv.size == 0:
        return np.zeros(n)
    # flow into i from j, as agent i sees it
    flow = alpha_t * p[draw.recv] * _edge_terms(np.asarray(own, float), np.asarray(edge, float), p, draw)
    lo = np.minimum(draw.recv, draw.send)
    hi = np.maximum(draw.recv, draw.send)
    key = lo * n + hi
    # orient every term as "into lo from hi"
    signed = np.where(draw.recv == lo, flow, -flow)
    keys, inv = np.unique(key, return_inverse=True)
    tau = 0.5 * np.bincount(inv, weights=signed, minlength=keys.size)
    a, b = keys // n, keys % n
    # sender of each transfer and how much it ships
    sender = np.where(tau < 0, a, b)
    amount = np.abs(tau)
    out = np.bincount(sender, weights=amount, minlength=n)
    q = np.asarray(q, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(out > q, q / out, 1.0)
    amount = amount * scale[sender]
    tau = np.where(tau < 0, -amount, amount)
    return np.bincount(a, weights=tau, minlength=n) - np.bincount(b, weights=tau, minlength=n)


def optimal_redistribution(q: Sequence[float], p: Sequence[float]) -> tuple[np.ndarray, float]:
    """Equal-load allocation: every load is ``sum q / sum p``, which is also the completion time."""
    q = np.asarray(q, dtype=float)
    p = _check_p(p)
    t_min = float(q.sum() / p.sum())
    return np.full(p.size, t_min), t_min


def completion_time(q: Sequence[float], p: Sequence[float]) -> float:
    """Batch completion time ``max_i q^i / p^i``."""
    return float(np.max(np.asarray(q, dtype=float) / _check_p(p)))


@dataclass(frozen=True, eq=False)
class LbMetrics:
    err: np.ndarray
    d_abs: np.ndarray
    completion: np.ndarray
    total_queue: np.ndarray


def metrics(loads: np.ndarray, x_star: Optional[Union[float, np.ndarray]] = None, q: Optional[np.ndarray] = None) -> LbMetrics:
    """Per-row metrics of a ``(T, n)`` (or ``(n,)``) load array.

    ``err`` is the RMS residual to ``x_star`` (the current mean load when not
    given); ``d_abs`` the largest deviation from the mean load; ``completion``
    the largest load.
    """
    x = np.atleast_2d(np.asarray(loads, dtype=float))
    mean = x.mean(axis=1, keepdims=True)
    ref = mean if x_star is None else np.reshape(np.asarray(x_star, dtype=float), (-1, 1))
    err = np.sqrt(np.mean((x - ref) ** 2, axis=1))
    d_abs = np.max(np.abs(x - mean), axis=1)
    completion = np.max(x, axis=1)
    total = np.atleast_2d(q).sum(axis=1) if q is not None else np.full(x.shape[0], np.nan)
    return LbMetrics(err, d_abs, completion, total)


@dataclass(frozen=True)
class ArrivalProcess:
    """External work ``z_t``.

    ``batch``: ``jobs`` jobs at ``t = 0``.  ``stream``: on each of the steps
    ``1..window`` every agent receives a Poisson number of jobs with mean
    ``jobs / (window * n)``.  Jobs pick agents uniformly; job sizes are
    exponential with mean ``complexity_mean``.  ``injections`` adds fixed
    ``(t, agent, work)`` amounts; ``agent = -1`` picks one uniformly.

    Draws are keyed by the seed alone, so runs that differ only in how they
    redistribute work see identical arrivals.
    """

    kind: str = "none"
    jobs: int = 0
    window: int = 1
    complexity_mean: float = 1.0
    injections: tuple[tuple[int, int, float], ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "injections", tuple((int(t), int(a), float(w)) for t, a, w in self.injections))
        problems = self.validate()
        if problems:
            raise ValueError("invalid arrivals: " + "; ".join(problems))

    def validate(self, n: Optional[int] = None) -> list[str]:
        out = []
        if self.kind not in ("none", "batch", "stream"):
            out.append(f"arrival kind must be none, batch or stream, got {self.kind!r}")
        if self.jobs < 0:
            out.append("jobs must be >= 0")
        if self.window < 1:
            out.append("window must be >= 1")
        if not self.complexity_mean > 0:
            out.append("complexity mean must be positive")
        for t, a, w in self.injections:
            if t < 0 or w < 0:
                out.append(f"injection ({t}, {a}, {w}): time and work must be >= 0")
            if n is not None and not -1 <= a < n:
                out.append(f"injection ({t}, {a}, {w}): agent out of range")
        return out

    def _work(self, seed: int, t: int, counts: np.ndarray) -> np.ndarray:
        g = stream(seed, t, Kind.ARRIVAL_WORK)
        return self.complexity_mean * g.standard_gamma(counts.astype(float))

    def arrivals(self, n: int, t: int, seed: int) -> np.ndarray:
        z = np.zeros(n)
        if self.kind == "batch" and t == 0 and self.jobs > 0:
            counts = stream(seed, 0, Kind.ARRIVAL_COUNT).multinomial(self.jobs, np.full(n, 1.0 / n))
            z += self._work(seed, 0, counts)
        elif self.kind == "stream" and 1 <= t <= self.window and self.jobs > 0:
            counts = stream(seed, t, Kind.ARRIVAL_COUNT).poisson(self.jobs / (self.window * n), n)
            z += self._work(seed, t, counts)
        for k, (ti, a, w) in enumerate(self.injections):
            if ti == t:
                if a < 0:
                    a = int(stream(seed, t, Kind.INJECTION, k).integers(n))
                z[a] += w
        return z


@dataclass(frozen=True)
class RingTopology:
    """Bidirectional ring plus ``extra`` random links redrawn every step.

    Extra links are uniformly random ordered pairs without self-loops, each
    made bidirectional; duplicates collapse.  All weights are 1.
    """

    n: int
    extra: Optional[int] = None
    noise_var: float = 0.0
    noise_dist: str = "gaussian"
    d_bar: int = 0

    def __post_init__(self) -> None:
        if self.n < 3:
            raise ValueError("ring needs at least 3 agents")
        if self.extra is None:
            object.__setattr__(self, "extra", self.n)
        if self.extra < 0 or self.noise_var < 0:
            raise ValueError("extra links and noise variance must be >= 0")
        if self.d_bar != 0:
            raise ValueError("ring topology has no delays")

    def sample(self, t: int, seed: int) -> TopologyDraw:
        n = self.n
        idx = np.arange(n)
        recv = [idx, (idx + 1) % n]
        send = [(idx + 1) % n, idx]
        if self.extra:
            g = stream(seed, t, Kind.RING_LINKS)
            a = g.integers(n, size=self.extra)
            b = (a + g.integers(1, n, size=self.extra)) % n
            recv += [a, b]
            send += [b, a]
        r, s = np.concatenate(recv), np.concatenate(send)
        key = np.unique(r * n + s)
        r, s = key // n, key % n
        m = key.size
        return TopologyDraw(
            t=t,
            recv=r,
            send=s,
            weights=np.ones(m),
            delays=np.zeros(m, dtype=np.intp),
            edge_noise=_noise(stream(seed, t, Kind.EDGE_NOISE), m, self.noise_var, self.noise_dist),
            self_noise=_noise(stream(seed, t, Kind.SELF_NOISE), n, self.noise_var, self.noise_dist),
        )


Topology = Union[StochasticTopologySpec, RingTopology]


def draw_topology(topo: Topology, t: int, seed: int) -> TopologyDraw:
    if isinstance(topo, RingTopology):
        return topo.sample(t, seed)
    return sample(topo, t, seed)


def lb_spec(spec: StochasticTopologySpec, p: Sequence[float]) -> StochasticTopologySpec:
    """Copy of ``spec`` whose mean link weights include the ``p^j / p^i`` factor."""
    p = _check_p(p)
    edges = tuple(
        replace(e, b_mean=e.b_mean * p[e.j] / p[e.i], b_var=e.b_var * (p[e.j] / p[e.i]) ** 2)
        for e in spec.edges
    )
    return replace(spec, edges=edges)


def lb_a_max(spec: StochasticTopologySpec, p: Sequence[float]) -> AveragedTopology:
    """Averaged topology of the load-balancing protocol."""
    return build_a_max(lb_spec(spec, p))


@dataclass(frozen=True, eq=False)
class LbScenario:
    topology: Topology
    productivities: np.ndarray
    q0: np.ndarray
    schedule: StepSizeSchedule
    arrivals: ArrivalProcess = field(default_factory=ArrivalProcess)
    T: int = 100
    mode: str = "transfer"
    prehistory: str = "clamp"

    def __post_init__(self) -> None:
        p = np.asarray(self.productivities, dtype=float)
        q0 = np.asarray(self.q0, dtype=float)
        n = self.topology.n
        problems = []
        if p.shape != (n,):
            problems.append(f"productivities must have {n} entries")
        elif np.any(~(p > 0)):
            problems.append("productivities must be positive")
        if q0.shape != (n,):
            problems.append(f"initial queues must have {n} entries")
        elif np.any(q0 < 0):
            problems.append("initial queues must be >= 0")
        if self.mode not in MODES:
            problems.append(f"mode must be one of {MODES}")
        problems += self.arrivals.validate(n)
        if problems:
            raise ValueError("invalid load-balancing scenario: " + "; ".join(problems))
        object.__setattr__(self, "productivities", p)
        object.__setattr__(self, "q0", q0)

    @property
    def n(self) -> int:
        return self.topology.n


@dataclass(frozen=True, eq=False)
class LbTrace:
    """``q[t]`` for ``t = 0..T``; ``z[t]``, ``u[t]``, ``idle[t]`` act between ``t`` and ``t + 1`` (zero at ``T``)."""

    q: np.ndarray
    p: np.ndarray
    z: np.ndarray
    u: np.ndarray
    idle: np.ndarray
    mode: str
    seed: int
    redistribute: bool = True

    @property
    def loads(self) -> np.ndarray:
        return self.q / self.p

    def metrics(self, x_star=None) -> LbMetrics:
        return metrics(self.loads, x_star, self.q)


def run_lb(scenario: LbScenario, seed: int, redistribute: bool = True, T: Optional[int] = None) -> LbTrace:
    T = scenario.T if T is None else T
    n, p = scenario.n, scenario.productivities
    d_bar = scenario.topology.d_bar
    state = ExtendedState.initial(scenario.q0, d_bar, scenario.prehistory)
    qs = np.empty((T + 1, n))
    zs = np.zeros((T + 1, n))
    us = np.zeros((T + 1, n))
    idle = np.zeros((T + 1, n))
    qs[0] = state.x
    transfer = scenario.mode == "transfer"
    for t in range(T):
        z = scenario.arrivals.arrivals(n, t, seed)
        alpha = scenario.schedule.at(t)
        if redistribute and alpha > 0:
            draw = draw_topology(scenario.topology, t, seed)
            obs = observe(state, draw)
            if transfer:
                u = transfer_increments(obs.own, obs.edge, p, state.x, draw, alpha)
            else:
                u = p * lb_protocol(obs.own, obs.edge, p, draw, alpha)
        else:
            u = np.zeros(n)
        q_next, idle[t] = queue_step(state.x, p, z, u, conserve=transfer)
        state = state.advance(q_next)
        qs[t + 1], zs[t], us[t] = q_next, z, u
    return LbTrace(qs, p, zs, us, idle, scenario.mode, seed, redistribute)


def run_comparison(scenario: LbScenario, seed: int, T: Optional[int] = None) -> tuple[LbTrace, LbTrace]:
    """``(with redistribution, without)`` on common arrival streams."""
    return run_lb(scenario, seed, True, T), run_lb(scenario, seed, False, T)


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def lb_trace_to_csv(trace: LbTrace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "agent", "q", "p", "load", "z", "u", "mode"])
    loads = trace.loads
    for t in range(trace.q.shape[0]):
        for i in range(trace.q.shape[1]):
            w.writerow([t, i + 1, _fmt(trace.q[t, i]), _fmt(trace.p[i]), _fmt(loads[t, i]),
                        _fmt(trace.z[t, i]), _fmt(trace.u[t, i]), trace.mode])
    return buf.getvalue()


def lb_trace_from_csv(text: str) -> dict[str, np.ndarray]:
    """Arrays ``q, p, load, z, u`` of shape ``(T + 1, n)`` plus ``mode``."""
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        raise ValueError("empty trace")
    T = max(int(r["t"]) for r in rows) + 1
    n = max(int(r["agent"]) for r in rows)
    out = {k: np.full((T, n), np.nan) for k in ("q", "p", "load", "z", "u")}
    for r in rows:
        t, i = int(r["t"]), int(r["agent"]) - 1
        for k in out:
            out[k][t, i] = float(r[k])
    out["mode"] = rows[0]["mode"]
    return out


def metrics_to_csv(arms: dict[str, LbMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "err", "d_abs", "completion", "total_queue", "arm"])
    for arm, m in arms.items():
        for t in range(m.err.size):
            w.writerow([t, _fmt(m.err[t]), _fmt(m.d_abs[t]), _fmt(m.completion[t]), _fmt(m.total_queue[t]), arm])
    return buf.getvalue()


def metrics_from_csv(text: str) -> dict[str, LbMetrics]:
    rows = list(csv.DictReader(io.StringIO(text)))
    arms: dict[str, list[dict]] = {}
    for r in rows:
        arms.setdefault(r["arm"], []).append(r)
    out = {}
    for arm, rs in arms.items():
        rs.sort(key=lambda r: int(r["t"]))
        cols = [np.array([float(r[k]) for r in rs]) for k in ("err", "d_abs", "completion", "total_queue")]
        out[arm] = LbMetrics(*cols)
    return out
