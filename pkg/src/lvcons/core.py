"""Closed-loop stochastic consensus: observations, local voting, agent update.

The state carried between steps is the window ``[x_t, x_{t-1}, ..., x_{t-d}]``
(:class:`ExtendedState`), which is exactly what delayed neighbour readings
need.  One step is synchronous: every agent reads the step-``t`` snapshot,
then all agents update.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .graph import WeightedDigraph, has_spanning_tree, left_consensus_vector
from .topology import (
    StochasticTopologySpec,
    TopologyDraw,
    build_a_max,
    sample,
)

__all__ = [
    "SimulationError",
    "AgentDynamics",
    "dynamics_family",
    "DYNAMICS_FAMILIES",
    "StepSizeSchedule",
    "ExtendedState",
    "Observations",
    "observe",
    "local_voting_control",
    "step_stochastic",
    "ConsensusScenario",
    "SimTrace",
    "run",
    "trace_to_csv",
    "trace_from_csv",
    "deterministic_step",
]


class SimulationError(RuntimeError):
    """A run could not continue (non-finite state, bad schedule, ...)."""


@dataclass(frozen=True)
class AgentDynamics:
    """Per-agent increment ``f(x, u)`` plus the declared Lipschitz constants.

    ``f`` is applied elementwise to numpy arrays.  ``control_only`` declares
    ``f(x, 0) == 0``; :meth:`check_control_only` probes it.
    """

    name: str
    f: Callable[[np.ndarray, np.ndarray], np.ndarray] = field(compare=False)
    L1: float = 1.0
    Lx: float = 0.0
    L2: float = 1.0
    Lc: float = 0.0
    control_only: bool = True

    def __call__(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.f(x, u)

    def check_control_only(self, probes: int = 256, seed: int = 0, scale: float = 100.0) -> bool:
        x = np.random.default_rng(seed).uniform(-scale, scale, probes)
        return bool(np.all(self.f(x, np.zeros_like(x)) == 0))

    def lipschitz_ratio(self, probes: int = 1024, seed: int = 0, scale: float = 10.0) -> float:
        """Largest observed ``|f(x,u) - f(x',u')| / (L1 (Lx|x-x'| + |u-u'|))``; <= 1 when consistent."""
        g = np.random.default_rng(seed)
        x, xp, u, up = (g.uniform(-scale, scale, probes) for _ in range(4))
        num = np.abs(self.f(x, u) - self.f(xp, up))
        den = self.L1 * (self.Lx * np.abs(x - xp) + np.abs(u - up))
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(den > 0, num / den, np.where(num > 0, np.inf, 0.0))
        return float(r.max())

    def growth_ratio(self, probes: int = 1024, seed: int = 1, scale: float = 10.0) -> float:
        """Largest ``|f|^2 / (L2 (Lc + Lx x^2 + u^2))`` on random probes."""
        g = np.random.default_rng(seed)
        x, u = g.uniform(-scale, scale, probes), g.uniform(-scale, scale, probes)
        den = self.L2 * (self.Lc + self.Lx * x * x + u * u)
        return float(np.max(self.f(x, u) ** 2 / den))


def _identity(x, u):
    return np.asarray(u, dtype=float) + 0.0 * np.asarray(x, dtype=float)


def _drain(x, u):
    return -1.0 + np.asarray(u, dtype=float) + 0.0 * np.asarray(x, dtype=float)


def _saturating(x, u):
    return np.tanh(np.asarray(u, dtype=float)) + 0.0 * np.asarray(x, dtype=float)


DYNAMICS_FAMILIES = ("identity-control", "load-balance", "saturating")


def dynamics_family(name: str, **constants: float) -> AgentDynamics:
    """Named dynamics with their default constants (overridable by keyword).

    ``load-balance`` is the load drift ``f = -1 + u`` of a unit-productivity
    server with no arrivals; arrivals and queue clamping live in
    :mod:`lvcons.loadbalance`.
    """
    if name == "identity-control":
        base = dict(L1=1.0, Lx=0.0, L2=1.0, Lc=0.0)
        dyn = AgentDynamics(name, _identity, control_only=True, **{**base, **constants})
    elif name == "load-balance":
        # (u - 1)^2 <= 2 (1 + u^2)
        base = dict(L1=1.0, Lx=0.0, L2=2.0, Lc=1.0)
        dyn = AgentDynamics(name, _drain, control_only=False, **{**base, **constants})
    elif name == "saturating":
        base = dict(L1=1.0, Lx=0.0, L2=1.0, Lc=0.0)
        dyn = AgentDynamics(name, _saturating, control_only=True, **{**base, **constants})
    else:
        raise ValueError(f"unknown dynamics family {name!r}; expected one of {DYNAMICS_FAMILIES}")
    return dyn


@dataclass(frozen=True)
class StepSizeSchedule:
    """Step sizes ``alpha_t`` for ``t = 0, 1, ...``.

    ``constant``: ``alpha``.  ``one-over-t``: ``alpha / (t + 1)``, i.e. ``1/t``
    on a 1-based step count.  ``explicit``: ``values[t]``.
    """

    kind: str = "constant"
    alpha: float = 0.1
    values: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if self.kind not in ("constant", "one-over-t", "explicit"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "explicit":
            if not self.values:
                raise ValueError("explicit schedule needs values")
            if any(not v > 0 for v in self.values):
                raise ValueError("step sizes must be positive")
        elif not self.alpha > 0:
            raise ValueError("step size must be positive")

    def at(self, t: int) -> float:
        if self.kind == "constant":
            return self.alpha
        if self.kind == "one-over-t":
            return self.alpha / (t + 1)
        if t >= len(self.values):
            raise SimulationError(f"explicit schedule has no step size for t={t}")
        return self.values[t]

    def alphas(self, T: int) -> np.ndarray:
        """``alpha_0 .. alpha_{T-1}``."""
        return np.array([self.at(t) for t in range(T)], dtype=float)

    def alpha_bar(self, T: int) -> float:
        return float(self.alphas(max(T, 1)).max())

    def alpha_underbar(self, T: int) -> float:
        """``min_{1 <= t <= T} alpha_t``."""
        return float(min(self.at(t) for t in range(1, T + 1))) if T >= 1 else self.at(0)

    def tau(self, t: int) -> float:
        """``alpha_0 + ... + alpha_{t-1}``."""
        return float(self.alphas(t).sum()) if t > 0 else 0.0

    def taus(self, T: int) -> np.ndarray:
        """``tau_0 .. tau_T`` (length ``T + 1``)."""
        return np.concatenate([[0.0], np.cumsum(self.alphas(T))])


@dataclass(frozen=True, eq=False)
class ExtendedState:
    """``window[k]`` holds ``x_{t-k}``, ``k = 0 .. d_bar``."""

    window: np.ndarray
    t: int = 0

    @property
    def d_bar(self) -> int:
        return self.window.shape[0] - 1

    @property
    def n(self) -> int:
        return self.window.shape[1]

    @property
    def x(self) -> np.ndarray:
        return self.window[0]

    @property
    def flat(self) -> np.ndarray:
        """Stacked vector ``[x_t, x_{t-1}, ..., x_{t-d}]`` of length ``n (d_bar + 1)``."""
        return self.window.reshape(-1)

    @classmethod
    def initial(cls, x0: Sequence[float], d_bar: int, prehistory: str = "zero") -> "ExtendedState":
        x0 = np.asarray(x0, dtype=float)
        w = np.zeros((d_bar + 1, x0.size))
        w[0] = x0
        if prehistory == "clamp":
            w[1:] = x0
        elif prehistory != "zero":
            raise ValueError(f"prehistory must be 'zero' or 'clamp', got {prehistory!r}")
        return cls(w, 0)

    @classmethod
    def from_flat(cls, v: np.ndarray, n: int, t: int = 0) -> "ExtendedState":
        return cls(np.asarray(v, dtype=float).reshape(-1, n).copy(), t)

    def advance(self, x_next: np.ndarray) -> "ExtendedState":
        w = np.empty_like(self.window)
        w[0] = x_next
        w[1:] = self.window[:-1]
        return ExtendedState(w, self.t + 1)


@dataclass(frozen=True, eq=False)
class Observations:
    """Readings at one step: ``own[i] = y^{i,i}``; ``edge[e] = y^{recv_e, send_e}``."""

    own: np.ndarray
    edge: np.ndarray


def observe(state: ExtendedState, draw: TopologyDraw) -> Observations:
    if draw.delays.size and int(draw.delays.max()) > state.d_bar:
        raise ValueError(
            f"delay {int(draw.delays.max())} exceeds the state window (d_bar={state.d_bar})"
        )
    own = state.x + draw.self_noise
    edge = state.window[draw.delays, draw.send] + draw.edge_noise
    return Observations(own, edge)


def local_voting_control(obs: Observations, draw: TopologyDraw, alpha_t: float) -> np.ndarray:
    """``u^i = alpha * sum_j b^{ij} (y^{ij} - y^{ii})`` over active in-links."""
    n = obs.own.size
    terms = draw.weights * (obs.edge - obs.own[draw.recv])
    return alpha_t * np.bincount(draw.recv, weights=terms, minlength=n)


def step_stochastic(
    state: ExtendedState,
    dyn: AgentDynamics,
    sched: StepSizeSchedule,
    draw: TopologyDraw,
    *,
    details: bool = False,
):
    """Advance one step.  With ``details=True`` also return ``(u, observations)``."""
    obs = observe(state, draw)
    # overflow shows up as a non-finite state and is reported below
    with np.errstate(over="ignore", invalid="ignore"):
        u = local_voting_control(obs, draw, sched.at(state.t))
        x_next = state.x + dyn(state.x, u)
    if not np.all(np.isfinite(x_next)):
        raise SimulationError(f"non-finite state at step {state.t}")
    nxt = state.advance(x_next)
    return (nxt, u, obs) if details else nxt


@dataclass(frozen=True, eq=False)
class ConsensusScenario:
    topology: StochasticTopologySpec
    dynamics: AgentDynamics
    schedule: StepSizeSchedule
    x0: np.ndarray
    T: int = 100
    prehistory: str = "zero"

    def __post_init__(self) -> None:
        x0 = np.asarray(self.x0, dtype=float)
        if x0.shape != (self.topology.n,):
            raise ValueError(f"x0 must have {self.topology.n} entries")
        object.__setattr__(self, "x0", x0)

    def initial_state(self) -> ExtendedState:
        return ExtendedState.initial(self.x0, self.topology.d_bar, self.prehistory)

    def predicted_consensus(self) -> Optional[float]:
        """Limit of the averaged model for ``f = u`` (None when not unique or not applicable)."""
        if self.dynamics.name != "identity-control":
            return None
        topo = build_a_max(self.topology)
        folded = topo.real_block()
        if not has_spanning_tree(WeightedDigraph(folded)):
            return None
        if self.topology.d_bar == 0:
            z = left_consensus_vector(np.eye(topo.n) - topo.laplacian_max)
            return float(z @ self.x0)
        if self.schedule.kind != "constant":
            return None
        alpha = self.schedule.alpha
        m = topo.U - alpha * topo.laplacian_max
        z = left_consensus_vector(m)
        return float(z @ self.initial_state().flat)


@dataclass(frozen=True, eq=False)
class SimTrace:
    """Trajectory of one run.

    ``states[t]`` is ``x_t`` for ``t = 0..T``; ``controls[t]`` and
    ``own_obs[t]`` are ``u_t`` and ``y_t^{ii}`` for ``t < T`` and NaN at ``T``.
    """

    states: np.ndarray
    controls: np.ndarray
    own_obs: np.ndarray
    seed: int
    x_star: Optional[float] = None
    windows: Optional[np.ndarray] = None

    @property
    def T(self) -> int:
        return self.states.shape[0] - 1

    def err(self) -> np.ndarray:
        """Root-mean-square residual to ``x_star`` (or the current mean when unknown)."""
        ref = self.x_star if self.x_star is not None else self.states.mean(axis=1, keepdims=True)
        return np.sqrt(np.mean((self.states - ref) ** 2, axis=1))


def run(scenario: ConsensusScenario, seed: int, T: Optional[int] = None, keep_windows: bool = False) -> SimTrace:
    T = scenario.T if T is None else T
    n = scenario.topology.n
    state = scenario.initial_state()
    states = np.empty((T + 1, n))
    controls = np.full((T + 1, n), np.nan)
    own = np.full((T + 1, n), np.nan)
    windows = np.empty((T + 1, state.flat.size)) if keep_windows else None
    states[0] = state.x
    if keep_windows:
        windows[0] = state.flat
    for t in range(T):
        draw = sample(scenario.topology, t, seed)
        try:
            state, u, obs = step_stochastic(state, scenario.dynamics, scenario.schedule, draw, details=True)
        except SimulationError as exc:
            raise SimulationError(f"run with seed {seed}: {exc}") from exc
        states[t + 1] = state.x
        controls[t] = u
        own[t] = obs.own
        if keep_windows:
            windows[t + 1] = state.flat
    return SimTrace(states, controls, own, seed, scenario.predicted_consensus(), windows)


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def trace_to_csv(trace: SimTrace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "agent", "x", "u", "y_self"])
    T, n = trace.states.shape
    for t in range(T):
        for i in range(n):
            w.writerow([t, i + 1, _fmt(trace.states[t, i]), _fmt(trace.controls[t, i]), _fmt(trace.own_obs[t, i])])
    return buf.getvalue()


def trace_from_csv(text: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of :func:`trace_to_csv`: ``(states, controls, own_obs)``."""
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        raise ValueError("empty trace")
    T = max(int(r["t"]) for r in rows) + 1
    n = max(int(r["agent"]) for r in rows)
    out = [np.full((T, n), np.nan) for _ in range(3)]
    for r in rows:
        t, i = int(r["t"]), int(r["agent"]) - 1
        for arr, key in zip(out, ("x", "u", "y_self")):
            arr[t, i] = float(r[key])
    return out[0], out[1], out[2]


def deterministic_step(x: np.ndarray, b: np.ndarray, alpha: float) -> np.ndarray:
    """Noise- and delay-free fixed-topology step ``x - L(alpha B) x``."""
    b = np.asarray(b, dtype=float)
    return x - alpha * (b.sum(axis=1) * x - b @ x)

