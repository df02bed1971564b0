"""Random network topology: edge appearance, protocol weights, delays, noise.

A :class:`StochasticTopologySpec` describes the maximal link set and the
distribution of everything random about it.  :func:`sample` turns it into one
realised :class:`TopologyDraw` per step; :func:`build_a_max` averages it into
the deterministic adjacency matrix of the extended (delay-augmented) network.

Draw order.  Each element kind is drawn from its own stream keyed by
``(seed, t, kind)`` and element ``e`` always reads the ``e``-th variate of
that stream (edge index in declaration order, group index, or agent index for
self-noise).  Appearance, weights, delays and noises are drawn for every
declared edge whether or not it turns out active, so a draw for edge ``e``
never depends on what happened to other edges.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import log_ndtr, ndtri

from .graph import WeightedDigraph, has_spanning_tree, laplacian_of
from .rng import Kind, stream

__all__ = [
    "EdgeSpec",
    "ExclusiveGroup",
    "StochasticTopologySpec",
    "TopologyDraw",
    "AveragedTopology",
    "build_a_max",
    "check_a3",
    "sample",
    "shift_matrix",
    "b_bar",
    "spec_from_adjacency",
    "WEIGHT_DISTS",
    "NOISE_DISTS",
]

WEIGHT_DISTS = ("point", "truncnorm", "gamma")
NOISE_DISTS = ("gaussian", "uniform")
PMF_TOL = 1e-12


@dataclass(frozen=True)
class EdgeSpec:
    """Directed link ``j -> i`` (0-based)."""

    i: int
    j: int
    p_appear: float = 1.0
    b_mean: float = 1.0
    b_var: float = 0.0
    pmf: tuple[float, ...] = (1.0,)


@dataclass(frozen=True)
class ExclusiveGroup:
    """At most one member edge ``j -> i`` is active per step.

    ``members`` lists ``(j, prob)``; with leftover probability no member is
    active.
    """

    i: int
    members: tuple[tuple[int, float], ...]


def _truncnorm_params(mean: float, var: float) -> tuple[float, float]:
    """(mu, sigma) of a normal whose zero-truncation has the given moments."""
    if var == 0:
        return mean, 0.0
    target = var / mean**2
    if target < 1e-6:
        return mean, float(np.sqrt(var))

    def lam(a: float) -> float:
        # phi(a) / P(Z > a), stable for large a
        return float(np.exp(-0.5 * a * a - 0.5 * np.log(2 * np.pi) - log_ndtr(-a)))

    def cv2(a: float) -> float:
        lm = lam(a)
        return (1 + a * lm - lm * lm) / (lm - a) ** 2 - target

    a = brentq(cv2, -1e3, 60.0, xtol=1e-14, rtol=1e-14)
    s = mean / (lam(a) - a)
    return -a * s, s


@dataclass(frozen=True)
class StochasticTopologySpec:
    n: int
    d_bar: int = 0
    edges: tuple[EdgeSpec, ...] = ()
    groups: tuple[ExclusiveGroup, ...] = ()
    noise_var: float = 0.0
    weight_dist: str = "point"
    noise_dist: str = "gaussian"

    def __post_init__(self) -> None:
        object.__setattr__(self, "edges", tuple(self.edges))
        object.__setattr__(
            self,
            "groups",
            tuple(ExclusiveGroup(g.i, tuple((int(j), float(p)) for j, p in g.members)) for g in self.groups),
        )
        problems = self.validate()
        if problems:
            raise ValueError("invalid topology: " + "; ".join(problems))

    def validate(self) -> list[str]:
        """Every violated invariant, described (empty when valid)."""
        out: list[str] = []
        n, dbar = self.n, self.d_bar
        if n < 1:
            out.append("n must be positive")
        if dbar < 0:
            out.append("d_bar must be >= 0")
        if self.noise_var < 0:
            out.append("noise_var must be >= 0")
        if self.weight_dist not in WEIGHT_DISTS:
            out.append(f"weight_dist must be one of {WEIGHT_DISTS}")
        if self.noise_dist not in NOISE_DISTS:
            out.append(f"noise_dist must be one of {NOISE_DISTS}")
        seen: dict[tuple[int, int], int] = {}
        for e in self.edges:
            tag = f"edge {e.j + 1}->{e.i + 1}"
            if not (0 <= e.i < n and 0 <= e.j < n):
                out.append(f"{tag}: node out of range")
            if e.i == e.j:
                out.append(f"{tag}: self-loop")
            if (e.i, e.j) in seen:
                out.append(f"{tag}: declared twice")
            seen[(e.i, e.j)] = 1
            if not 0 < e.p_appear <= 1:
                out.append(f"{tag}: appearance probability must be in (0, 1]")
            if e.b_mean < 0:
                out.append(f"{tag}: weight mean must be >= 0")
            if e.b_var < 0:
                out.append(f"{tag}: weight variance must be >= 0")
            if len(e.pmf) != dbar + 1:
                out.append(f"{tag}: delay pmf needs {dbar + 1} entries, got {len(e.pmf)}")
            if any(p < 0 or p > 1 for p in e.pmf):
                out.append(f"{tag}: delay probabilities must lie in [0, 1]")
            elif abs(sum(e.pmf) - 1.0) > PMF_TOL:
                out.append(f"{tag}: delay pmf sums to {sum(e.pmf)!r}, not 1")
            if e.b_var > 0 and self.weight_dist == "point":
                out.append(f"{tag}: weight variance > 0 needs weight_dist truncnorm or gamma")
            if e.b_var > 0 and self.weight_dist == "truncnorm" and e.b_var >= 0.999 * e.b_mean**2:
                out.append(f"{tag}: truncated normal cannot reach variance/mean^2 >= 0.999")
            if e.b_var > 0 and e.b_mean == 0:
                out.append(f"{tag}: random weight needs a positive mean")
        grouped: set[tuple[int, int]] = set()
        for g in self.groups:
            gtag = f"group at node {g.i + 1}"
            total = 0.0
            for j, p in g.members:
                key = (g.i, j)
                if key not in seen:
                    out.append(f"{gtag}: member {j + 1} has no matching edge line")
                    continue
                if key in grouped:
                    out.append(f"{gtag}: edge {j + 1}->{g.i + 1} belongs to two groups")
                grouped.add(key)
                e = self.edges[self._edge_index[key]]
                if abs(e.p_appear - p) > PMF_TOL:
                    out.append(
                        f"{gtag}: edge {j + 1}->{g.i + 1} appearance {e.p_appear} conflicts with group probability {p}"
                    )
                total += p
            if total > 1 + PMF_TOL:
                out.append(f"{gtag}: member probabilities sum to {total} > 1")
        return out

    @cached_property
    def _edge_index(self) -> dict[tuple[int, int], int]:
        return {(e.i, e.j): k for k, e in enumerate(self.edges)}

    @property
    def m(self) -> int:
        return len(self.edges)

    @cached_property
    def arrays(self) -> "_EdgeArrays":
        return _EdgeArrays.build(self)

    def e_max(self) -> np.ndarray:
        mask = np.zeros((self.n, self.n), dtype=bool)
        for e in self.edges:
            mask[e.i, e.j] = True
        return mask

    def mean_adjacency(self) -> np.ndarray:
        """``p_a * b`` per link, ignoring delays (n x n)."""
        a = np.zeros((self.n, self.n))
        for e in self.edges:
            a[e.i, e.j] += e.p_appear * e.b_mean
        return a


@dataclass(frozen=True, eq=False)
class _EdgeArrays:
    recv: np.ndarray
    send: np.ndarray
    p_appear: np.ndarray
    b_mean: np.ndarray
    b_var: np.ndarray
    cdf: np.ndarray
    group_of: np.ndarray  # -1 for independent edges
    group_cum: tuple[np.ndarray, ...]  # per group: cumulative member probabilities
    group_edges: tuple[np.ndarray, ...]  # per group: member edge indices
    tn_mu: np.ndarray
    tn_sigma: np.ndarray

    @classmethod
    def build(cls, spec: StochasticTopologySpec) -> "_EdgeArrays":
        m = spec.m
        recv = np.array([e.i for e in spec.edges], dtype=np.intp)
        send = np.array([e.j for e in spec.edges], dtype=np.intp)
        p_appear = np.array([e.p_appear for e in spec.edges], dtype=float)
        b_mean = np.array([e.b_mean for e in spec.edges], dtype=float)
        b_var = np.array([e.b_var for e in spec.edges], dtype=float)
        pmf = np.array([e.pmf for e in spec.edges], dtype=float).reshape(m, spec.d_bar + 1)
        cdf = np.cumsum(pmf, axis=1)
        group_of = np.full(m, -1, dtype=np.intp)
        cums, members = [], []
        for gi, g in enumerate(spec.groups):
            idx = np.array([spec._edge_index[(g.i, j)] for j, _ in g.members], dtype=np.intp)
            group_of[idx] = gi
            members.append(idx)
            cums.append(np.cumsum([p for _, p in g.members]))
        tn = [_truncnorm_params(mu, v) if spec.weight_dist == "truncnorm" and v > 0 else (mu, 0.0)
              for mu, v in zip(b_mean, b_var)]
        tn_mu = np.array([t[0] for t in tn], dtype=float)
        tn_sigma = np.array([t[1] for t in tn], dtype=float)
        for arr in (recv, send, p_appear, b_mean, b_var, cdf, group_of, tn_mu, tn_sigma):
            arr.setflags(write=False)
        return cls(recv, send, p_appear, b_mean, b_var, cdf, group_of, tuple(cums), tuple(members), tn_mu, tn_sigma)


@dataclass(frozen=True, eq=False)
class TopologyDraw:
    """Realised topology at step ``t``; edge arrays list active links only."""

    t: int
    recv: np.ndarray
    send: np.ndarray
    weights: np.ndarray
    delays: np.ndarray
    edge_noise: np.ndarray
    self_noise: np.ndarray

    @property
    def active_edges(self) -> list[tuple[int, int]]:
        return [(int(i), int(j)) for i, j in zip(self.recv, self.send)]

    def adjacency(self, n: int) -> np.ndarray:
        """Realised protocol weights as an n x n matrix (delays ignored)."""
        b = np.zeros((n, n))
        np.add.at(b, (self.recv, self.send), self.weights)
        return b


def _noise(gen: np.random.Generator, size: int, var: float, dist: str) -> np.ndarray:
    if var == 0:
        return np.zeros(size)
    sd = float(np.sqrt(var))
    if dist == "gaussian":
        return sd * gen.standard_normal(size)
    half = np.sqrt(3.0) * sd
    return gen.uniform(-half, half, size)


def sample(spec: StochasticTopologySpec, t: int, seed: int) -> TopologyDraw:
    """Draw the step-``t`` topology from streams keyed by ``seed``."""
    ea = spec.arrays
    m = spec.m
    active = np.zeros(m, dtype=bool)
    indep = ea.group_of < 0
    if m:
        u = stream(seed, t, Kind.APPEAR).random(m)
        active[indep] = u[indep] < ea.p_appear[indep]
    if spec.groups:
        ug = stream(seed, t, Kind.GROUP).random(len(spec.groups))
        for gi, (cum, idx) in enumerate(zip(ea.group_cum, ea.group_edges)):
            k = int(np.searchsorted(cum, ug[gi], side="right"))
            if k < len(idx):
                active[idx[k]] = True

    if spec.weight_dist == "point" or not np.any(ea.b_var > 0):
        weights = ea.b_mean.copy()
    elif spec.weight_dist == "truncnorm":
        uw = stream(seed, t, Kind.WEIGHT).random(m)
        weights = ea.b_mean.copy()
        rnd = ea.tn_sigma > 0
        mu, sg = ea.tn_mu[rnd], ea.tn_sigma[rnd]
        sf_a = np.exp(log_ndtr(mu / sg))  # P(Z > -mu/sigma)
        z = -ndtri((1.0 - uw[rnd]) * sf_a)
        weights[rnd] = np.maximum(mu + sg * z, 0.0)
    else:
        gen = stream(seed, t, Kind.WEIGHT)
        weights = ea.b_mean.copy()
        rnd = ea.b_var > 0
        shape = ea.b_mean**2 / np.where(rnd, ea.b_var, 1.0)
        scale = np.where(rnd, ea.b_var, 0.0) / np.where(ea.b_mean > 0, ea.b_mean, 1.0)
        g = gen.standard_gamma(np.where(rnd, shape, 1.0))
        weights[rnd] = (g * scale)[rnd]

    if spec.d_bar == 0:
        delays = np.zeros(m, dtype=np.intp)
    else:
        ud = stream(seed, t, Kind.DELAY).random(m)
        delays = np.minimum((ud[:, None] >= ea.cdf).sum(axis=1), spec.d_bar).astype(np.intp)

    edge_noise = _noise(stream(seed, t, Kind.EDGE_NOISE), m, spec.noise_var, spec.noise_dist)
    self_noise = _noise(stream(seed, t, Kind.SELF_NOISE), spec.n, spec.noise_var, spec.noise_dist)
    return TopologyDraw(
        t=t,
        recv=ea.recv[active],
        send=ea.send[active],
        weights=weights[active],
        delays=delays[active],
        edge_noise=edge_noise[active],
        self_noise=self_noise,
    )


def shift_matrix(n: int, d_bar: int) -> np.ndarray:
    """Block shift ``U``: first block row ``[I 0 .. 0]``, then ``I`` on the subdiagonal."""
    nb = n * (d_bar + 1)
    u = np.zeros((nb, nb))
    eye = np.eye(n)
    u[:n, :n] = eye
    for k in range(1, d_bar + 1):
        u[k * n:(k + 1) * n, (k - 1) * n:k * n] = eye
    return u


@dataclass(frozen=True, eq=False)
class AveragedTopology:
    n: int
    d_bar: int
    a_max: np.ndarray
    laplacian_max: np.ndarray
    U: np.ndarray
    e_max: np.ndarray = field(repr=False)

    @property
    def n_bar(self) -> int:
        return self.n * (self.d_bar + 1)

    def real_block(self) -> np.ndarray:
        """Delay slots folded back onto real agents: ``sum_k a_max[:, j + k n]`` (n x n)."""
        return self.a_max[: self.n].reshape(self.n, self.d_bar + 1, self.n).sum(axis=1)

    @property
    def d_max(self) -> float:
        return float(self.a_max.sum(axis=1).max())


def build_a_max(spec: StochasticTopologySpec) -> AveragedTopology:
    """Averaged extended adjacency: entry ``(i, j + k n) = p_a * p_k * b``."""
    n, dbar = spec.n, spec.d_bar
    nb = n * (dbar + 1)
    a = np.zeros((nb, nb))
    for e in spec.edges:
        for k, pk in enumerate(e.pmf):
            a[e.i, e.j + k * n] += e.p_appear * pk * e.b_mean
    lap = laplacian_of(a)
    u = shift_matrix(n, dbar)
    em = spec.e_max()
    for arr in (a, lap, u, em):
        arr.setflags(write=False)
    return AveragedTopology(n=n, d_bar=dbar, a_max=a, laplacian_max=lap, U=u, e_max=em)


def check_a3(topo: AveragedTopology) -> bool:
    """Spanning tree on the maximal link set, and every link carries weight in some delay slot."""
    if not has_spanning_tree(WeightedDigraph(topo.e_max.astype(float))):
        return False
    folded = topo.real_block()
    return bool(np.all(folded[topo.e_max] > 0))


def b_bar(spec: StochasticTopologySpec) -> float:
    """``max_i sum_j (b_ij^2 + var_ij)`` over declared links."""
    acc = np.zeros(spec.n)
    for e in spec.edges:
        acc[e.i] += e.b_mean**2 + e.b_var
    return float(acc.max()) if spec.n else 0.0


def spec_from_adjacency(
    a: np.ndarray,
    d_bar: int = 0,
    pmf: Optional[Sequence[float]] = None,
    noise_var: float = 0.0,
) -> StochasticTopologySpec:
    """Deterministic spec (every link always present) with weights ``a``."""
    a = np.asarray(a, dtype=float)
    pmf = tuple(pmf) if pmf is not None else (1.0,) + (0.0,) * d_bar
    edges = tuple(
        EdgeSpec(int(i), int(j), 1.0, float(a[i, j]), 0.0, pmf) for i, j in zip(*np.nonzero(a))
    )
    return StochasticTopologySpec(n=a.shape[0], d_bar=d_bar, edges=edges, noise_var=noise_var)

