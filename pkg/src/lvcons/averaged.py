"""Deterministic averaged models and the constants that tie them to the noisy system.

Two averaged models are provided:

* :class:`AveragedOdeModel` -- ``dx/dtau = (1/alpha) f(x, alpha s(x))`` with
  ``s(x) = -L(A_max) x``; integrated with fixed-step classical RK4.
* :class:`AveragedDiscreteModel` -- ``Z_{t+1} = U Z_t + G(alpha_t, Z_t)`` on the
  delay-extended state.

Bound constants are evaluated literally and returned together with the
bound they produce.  They are astronomically loose in practice; the point is
to put them next to Monte-Carlo deviation estimates.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import (
    AgentDynamics,
    ConsensusScenario,
    ExtendedState,
    SimulationError,
    StepSizeSchedule,
    run,
)
from .graph import WeightedDigraph, has_spanning_tree, left_consensus_vector, sorted_eigenvalues
from .topology import AveragedTopology, StochasticTopologySpec, b_bar, build_a_max

__all__ = [
    "AveragedOdeModel",
    "AveragedDiscreteModel",
    "integrate_ode",
    "step_averaged_discrete",
    "run_averaged_discrete",
    "time_to_eps_consensus",
    "consensus_timing",
    "ConsensusTiming",
    "BoundConstants",
    "matrix_norm",
    "deviation_bound_constants",
    "consensus_bound_constants",
    "DeviationEstimate",
    "deviation_estimate",
    "calibrate_ode_constants",
    "certified_step_cap",
]


def matrix_norm(m: np.ndarray, kind: str = "frobenius") -> float:
    if kind == "frobenius":
        return float(np.linalg.norm(m, "fro"))
    if kind == "spectral":
        return float(np.linalg.norm(m, 2))
    raise ValueError(f"unknown norm {kind!r}")


@dataclass(frozen=True, eq=False)
class AveragedOdeModel:
    """Right-hand side ``R(alpha, x)`` on the real agents.

    With delays the delay slots are folded onto their source agent, which is
    the small-step limit of the delayed averaged map.
    """

    topology: AveragedTopology
    dynamics: AgentDynamics
    alpha: float

    @property
    def laplacian(self) -> np.ndarray:
        a = self.topology.real_block()
        return np.diag(a.sum(axis=1)) - a

    def s(self, x: np.ndarray) -> np.ndarray:
        return -self.laplacian @ x

    def rhs(self, x: np.ndarray) -> np.ndarray:
        a = self.alpha
        return self.dynamics(x, a * self.s(x)) / a


def integrate_ode(
    model: AveragedOdeModel,
    x0: Sequence[float],
    tau_max: float,
    h: Optional[float] = None,
    taus: Optional[Sequence[float]] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Classical RK4 at fixed step ``h``, sampled at ``taus`` (default: every ``h``).

    Each sampling interval is split into ``ceil(len / h)`` equal substeps so the
    samples land exactly on the requested times.  Returns ``(taus, xs)``.
    """
    if tau_max < 0:
        raise ValueError("tau_max must be >= 0")
    if h is None:
        h = min(0.01, model.alpha / 10)
    if not h > 0:
        raise ValueError("h must be positive")
    if taus is None:
        k = int(math.ceil(tau_max / h - 1e-12))
        grid = np.linspace(0.0, tau_max, k + 1) if k > 0 else np.array([0.0])
    else:
        grid = np.asarray(taus, dtype=float)
        if grid.size == 0 or grid[0] != 0 or np.any(np.diff(grid) < 0):
            raise ValueError("taus must start at 0 and be non-decreasing")
    x = np.asarray(x0, dtype=float).copy()
    out = np.empty((grid.size, x.size))
    out[0] = x
    f = model.rhs
    for idx in range(1, grid.size):
        span = grid[idx] - grid[idx - 1]
        if span > 0:
            m = int(math.ceil(span / h - 1e-12))
            dt = span / m
            for _ in range(m):
                k1 = f(x)
                k2 = f(x + 0.5 * dt * k1)
                k3 = f(x + 0.5 * dt * k2)
                k4 = f(x + dt * k3)
                x = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            if not np.all(np.isfinite(x)):
                raise SimulationError(f"non-finite ODE state at tau={grid[idx]}")
        out[idx] = x
    return grid, out


@dataclass(frozen=True, eq=False)
class AveragedDiscreteModel:
    topology: AveragedTopology
    dynamics: AgentDynamics

    def s(self, z_flat: np.ndarray) -> np.ndarray:
        n = self.topology.n
        return -(self.topology.laplacian_max[:n] @ z_flat)

    def one_step_matrix(self, alpha: float) -> np.ndarray:
        """For ``f = u``: ``U - L(alpha A_max)``, i.e. ``I - ((I - U) + L(alpha A_max))``."""
        return self.topology.U - alpha * self.topology.laplacian_max

    def step(self, z: ExtendedState, alpha_t: float) -> ExtendedState:
        x = z.x
        x_next = x + self.dynamics(x, alpha_t * self.s(z.flat))
        return z.advance(x_next)


def step_averaged_discrete(model: AveragedDiscreteModel, z: ExtendedState, alpha_t: float) -> ExtendedState:
    return model.step(z, alpha_t)


def run_averaged_discrete(
    model: AveragedDiscreteModel, z0: ExtendedState, sched: StepSizeSchedule, T: int
) -> np.ndarray:
    """Flat extended states ``Z_0 .. Z_T`` as a ``(T + 1, n_bar)`` array."""
    out = np.empty((T + 1, z0.flat.size))
    z = z0
    out[0] = z.flat
    for t in range(T):
        z = model.step(z, sched.at(t))
        out[t + 1] = z.flat
    return out


def time_to_eps_consensus(lambda2_re: float, n: int, dist0_sq: float, eps: float) -> float:
    """``ln((n-1) dist0_sq / eps) / (2 Re lambda_2)``; 0 when already within ``eps``."""
    if not lambda2_re > 0:
        raise ValueError("Re(lambda_2) must be positive")
    if not eps > 0:
        raise ValueError("eps must be positive")
    if not dist0_sq > 0:
        raise ValueError("squared initial distance to consensus must be positive")
    arg = (n - 1) * dist0_sq / eps
    if arg <= 1:
        return 0.0
    return math.log(arg) / (2.0 * lambda2_re)


@dataclass(frozen=True)
class ConsensusTiming:
    lambda2_re: float
    x_star: float
    dist0_sq: float
    n: int

    def T(self, eps: float) -> float:
        return time_to_eps_consensus(self.lambda2_re, self.n, self.dist0_sq, eps)


def consensus_timing(a: np.ndarray, x0: Sequence[float]) -> ConsensusTiming:
    """Re(lambda_2), predicted consensus value and initial spread for ``dx/dtau = -L(a) x``."""
    g = WeightedDigraph(np.asarray(a, dtype=float))
    if not has_spanning_tree(g):
        raise ValueError("graph has no spanning tree")
    ev = sorted_eigenvalues(g.laplacian())
    x0 = np.asarray(x0, dtype=float)
    z = left_consensus_vector(np.eye(g.n) - g.laplacian())
    xs = float(z @ x0)
    return ConsensusTiming(float(ev[1].real), xs, float(np.sum((x0 - xs) ** 2)), g.n)


@dataclass(frozen=True)
class BoundConstants:
    """Constants of either bound; those that do not apply to a variant are None."""

    c1: Optional[float]
    c2: Optional[float]
    c3: float
    c_prime: Optional[float]
    c_hat: float
    c_tilde: float
    b_bar: float
    tau_T: float
    d_tilde: int
    norm_L: float
    log_bound: float
    norm: str = "frobenius"
    C1_bar: Optional[float] = None
    C2_bar: Optional[float] = None
    alpha_bar: Optional[float] = None

    @property
    def bound(self) -> float:
        return math.exp(self.log_bound) if self.log_bound < 709 else math.inf

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__} | {"bound": self.bound}


def _log_pos(v: float) -> float:
    return math.log(v) if v > 0 else -math.inf


def deviation_bound_constants(
    spec: StochasticTopologySpec,
    dyn: AgentDynamics,
    sched: StepSizeSchedule,
    X0: Sequence[float],
    T: int,
    norm: str = "frobenius",
) -> BoundConstants:
    """Constants of the stochastic-vs-averaged-discrete deviation bound, evaluated literally.

    Returns the bound ``c1 * tau_T * exp(c2 tau_T^2) * alpha_bar`` in ``log_bound``.
    """
    if T < 1:
        raise ValueError("horizon T must be >= 1")
    n, dbar = spec.n, spec.d_bar
    topo = build_a_max(spec)
    L1, Lx, L2, Lc = dyn.L1, dyn.Lx, dyn.L2, dyn.Lc
    a_bar = sched.alpha_bar(T)
    a_low = sched.alpha_underbar(T)
    if Lx > 0 and not a_low > 0:
        raise ValueError("minimum step size is zero; the Lx/alpha term is undefined")
    d_t = 0 if dbar == 0 else 1
    bb = b_bar(spec)
    Ln = matrix_norm(topo.laplacian_max, norm)
    X0 = np.asarray(X0, dtype=float)
    c_tilde = n * L1**2 * spec.noise_var * bb
    c_hat = 2 * L1**2 * n * bb
    root = 2 ** (1 + d_t / 2)
    c_prime = root * L1 * Ln + a_bar * (L2 * Ln**2 + c_hat)
    c3 = d_t + Lx * (root * L1 + L2) + a_bar * c_prime
    c2 = 2 ** (1 - dbar) * L1**2 * ((Lx / a_low if Lx > 0 else 0.0) + 2 * a_bar**2 * Ln**2)
    num = n * L2 * Lc + a_bar**2 * c_tilde
    inner = (num / c3 if num > 0 else 0.0) + float(X0 @ X0)
    log_growth = T * math.log1p(c3)
    log_term = np.logaddexp(_log_pos(c_tilde), _log_pos(c_hat * inner) + log_growth)
    log_c1 = math.log(8 * n) + float(log_term)
    tau_T = 2**dbar * float(sched.alphas(T).sum())
    log_bound = log_c1 + _log_pos(tau_T) + c2 * tau_T**2 + math.log(a_bar)
    c1 = math.exp(log_c1) if log_c1 < 709 else math.inf
    return BoundConstants(
        c1=c1, c2=c2, c3=c3, c_prime=c_prime, c_hat=c_hat, c_tilde=c_tilde, b_bar=bb,
        tau_T=tau_T, d_tilde=d_t, norm_L=Ln, log_bound=log_bound, norm=norm, alpha_bar=a_bar,
    )


def consensus_bound_constants(
    spec: StochasticTopologySpec,
    alpha: float,
    T: int,
    X0: Sequence[float],
    variant: str = "consensus",
    productivities: Optional[Sequence[float]] = None,
    norm: str = "frobenius",
) -> BoundConstants:
    """Constants for the constant-step ``f = u`` case (``variant='consensus'``)
    or the load-balancing version (``variant='load-balance'``, needs productivities).

    ``tau`` is taken as ``2**d_bar * alpha * T``.  ``log_bound`` holds
    ``log(C1_bar * exp(C2_bar) * alpha)``; compare it with ``log(eps / 4)``.
    """
    topo = build_a_max(spec)
    if not alpha * topo.d_max < 1:
        raise ValueError(
            f"step size condition alpha < 1/d_max(A_max) violated: alpha={alpha}, d_max={topo.d_max}"
        )
    n, dbar = spec.n, spec.d_bar
    d_t = 0 if dbar == 0 else 1
    bb = b_bar(spec)
    Ln = matrix_norm(topo.laplacian_max, norm)
    tau = 2**dbar * alpha * T
    if variant == "consensus":
        c_tilde = n**2 * bb**2 * spec.noise_var
        c_hat = 2 * n * (n - 1) * bb**2 * tau**2
    elif variant == "load-balance":
        if productivities is None:
            raise ValueError("load-balance variant needs productivities")
        p_low = float(np.min(productivities))
        if not p_low > 0:
            raise ValueError("productivities must be positive")
        c_tilde = n * (math.sqrt(spec.noise_var) / p_low) ** 2 * bb
        c_hat = 2 * n * bb * tau
    else:
        raise ValueError(f"unknown variant {variant!r}")
    c3 = 2 ** (1 + d_t) + 2 * alpha**2 * (Ln**2 + c_hat)
    X0 = np.asarray(X0, dtype=float)
    inner = alpha**2 * c_tilde / c3 + float(X0 @ X0)
    log_term = np.logaddexp(_log_pos(c_tilde), _log_pos(c_hat * inner) + T * math.log1p(c3))
    log_C1 = math.log(8 * n) + float(log_term) + _log_pos(tau)
    C2 = 2 ** (2 - dbar) * alpha**2 * Ln**2
    log_bound = log_C1 + C2 + math.log(alpha)
    C1 = math.exp(log_C1) if log_C1 < 709 else math.inf
    return BoundConstants(
        c1=None, c2=None, c3=c3, c_prime=None, c_hat=c_hat, c_tilde=c_tilde, b_bar=bb,
        tau_T=tau, d_tilde=d_t, norm_L=Ln, log_bound=log_bound, norm=norm, C1_bar=C1, C2_bar=C2,
        alpha_bar=alpha,
    )


def consensus_bound_holds(consts: BoundConstants, eps: float) -> bool:
    """``C1_bar * exp(C2_bar) * alpha <= eps / 4``."""
    return consts.log_bound <= math.log(eps / 4)


__all__.append("consensus_bound_holds")


@dataclass(frozen=True)
class DeviationEstimate:
    mean: float
    stderr: float
    per_seed: tuple[float, ...] = field(repr=False)
    mode: str = "discrete"

    @property
    def n_seeds(self) -> int:
        return len(self.per_seed)


def _averaged_reference(scenario: ConsensusScenario, T: int, mode: str) -> np.ndarray:
    topo = build_a_max(scenario.topology)
    if mode == "discrete":
        model = AveragedDiscreteModel(topo, scenario.dynamics)
        return run_averaged_discrete(model, scenario.initial_state(), scenario.schedule, T)
    if mode == "ode":
        model = AveragedOdeModel(topo, scenario.dynamics, scenario.schedule.at(0))
        h = min(0.01, scenario.schedule.alpha_bar(T) / 10)
        taus = scenario.schedule.taus(T)
        return integrate_ode(model, scenario.x0, float(taus[-1]), h=h, taus=taus)[1]
    raise ValueError(f"mode must be 'discrete' or 'ode', got {mode!r}")


def _seed_deviation(scenario: ConsensusScenario, seed: int, T: int, ref: np.ndarray, mode: str) -> np.ndarray:
    """Running maximum of the squared deviation, ``t = 0..T``."""
    tr = run(scenario, seed, T, keep_windows=(mode == "discrete"))
    got = tr.windows if mode == "discrete" else tr.states
    return np.maximum.accumulate(np.sum((got - ref) ** 2, axis=1))


def deviation_curves(
    scenario: ConsensusScenario,
    seeds: Sequence[int],
    T: Optional[int] = None,
    mode: str = "discrete",
    threads: int = 1,
) -> np.ndarray:
    """Per-seed running-max squared deviation curves, shape ``(len(seeds), T + 1)``."""
    T = scenario.T if T is None else T
    ref = _averaged_reference(scenario, T, mode)
    seeds = list(seeds)
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            curves = list(ex.map(lambda s: _seed_deviation(scenario, s, T, ref, mode), seeds))
    else:
        curves = [_seed_deviation(scenario, s, T, ref, mode) for s in seeds]
    return np.array(curves)


__all__.append("deviation_curves")


def _mean_se(values: np.ndarray) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else math.nan
    return float(math.fsum(v) / v.size), se


def deviation_estimate(
    scenario: ConsensusScenario,
    seeds: Sequence[int],
    T: Optional[int] = None,
    mode: str = "discrete",
    threads: int = 1,
) -> DeviationEstimate:
    """Monte-Carlo ``E max_t ||X_t - Z_t||^2`` (``discrete``) or ``E max_t ||x_t - x(tau_t)||^2`` (``ode``)."""
    curves = deviation_curves(scenario, seeds, T, mode, threads)
    finals = curves[:, -1]
    mean, se = _mean_se(finals)
    return DeviationEstimate(mean, se, tuple(float(v) for v in finals), mode)


def calibrate_ode_constants(
    scenario: ConsensusScenario,
    alphas: Sequence[float],
    tau_max: float,
    seeds: Sequence[int],
    threads: int = 1,
    z: float = 2.0,
    points: int = 20,
) -> tuple[float, float]:
    """Empirical ``(C1, C2)`` with ``E max ||x_t - x(tau_t)||^2 <= C1 exp(C2 tau) alpha``.

    For each pilot step size the running-max deviation curve (mean + ``z``
    standard errors) is divided by ``alpha``; ``C2`` is the least-squares
    log-slope of the worst case over ``tau`` (floored at 0) and ``C1`` the
    smallest prefactor that makes the envelope cover every pilot point.
    """
    grid = np.linspace(tau_max / points, tau_max, points)
    worst = np.zeros(points)
    for a in alphas:
        sc = ConsensusScenario(
            scenario.topology, scenario.dynamics, StepSizeSchedule("constant", a),
            scenario.x0, int(math.ceil(tau_max / a)), scenario.prehistory,
        )
        curves = deviation_curves(sc, seeds, sc.T, "ode", threads)
        mean = curves.mean(axis=0)
        se = curves.std(axis=0, ddof=1) / math.sqrt(curves.shape[0])
        upper = mean + z * se
        taus = sc.schedule.taus(sc.T)
        idx = np.minimum(np.searchsorted(taus, grid - 1e-12), taus.size - 1)
        worst = np.maximum(worst, upper[idx] / a)
    pos = worst > 0
    if pos.sum() >= 2:
        slope = float(np.polyfit(grid[pos], np.log(worst[pos]), 1)[0])
    else:
        slope = 0.0
    c2 = max(slope, 0.0)
    c1 = float(np.max(worst * np.exp(-c2 * grid)))
    return c1, c2


def certified_step_cap(eps: float, c1: float, c2: float, tau_max: float) -> float:
    """Largest step size allowed: ``eps / (4 C1 exp(C2 tau_max))``."""
    return eps / (4.0 * c1 * math.exp(c2 * tau_max))


def dist0_from_anchor(lambda2_re: float, n: int, T_anchor: float, eps_anchor: float) -> float:
    """Squared initial spread for which ``time_to_eps_consensus`` returns ``T_anchor`` at ``eps_anchor``."""
    return math.exp(2.0 * lambda2_re * T_anchor) * eps_anchor / (n - 1)


__all__.append("dist0_from_anchor")
