"""Weighted digraphs, Laplacians and spectral consensus certificates.

Convention: ``weights[i, j]`` is the weight of the directed edge ``j -> i``,
i.e. the influence agent ``j`` has on agent ``i``.  Row ``i`` therefore holds
the in-neighbours of ``i`` and the in-degree of ``i`` is the row sum.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, shortest_path

__all__ = [
    "WeightedDigraph",
    "SpectralReport",
    "SpectralError",
    "laplacian_of",
    "has_spanning_tree",
    "spectral_report",
    "sorted_eigenvalues",
    "fiedler_bounds",
    "left_consensus_vector",
    "perron_consensus_value",
    "continuous_consensus_value",
    "read_edge_list",
    "write_edge_list",
]

BALANCE_TOL = 1e-9


class SpectralError(RuntimeError):
    """Raised when an eigen-solve fails or yields non-finite values."""


@dataclass(frozen=True, eq=False)
class WeightedDigraph:
    """Immutable weighted digraph on ``n`` nodes (0-based internally)."""

    weights: np.ndarray

    def __post_init__(self) -> None:
        w = np.array(self.weights, dtype=float, copy=True)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError(f"adjacency must be square, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("adjacency contains non-finite entries")
        if np.any(w < 0):
            raise ValueError("adjacency weights must be non-negative")
        if np.any(np.diag(w) != 0):
            raise ValueError("adjacency diagonal must be zero (no self-loops)")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @property
    def in_degrees(self) -> np.ndarray:
        return self.weights.sum(axis=1)

    @property
    def out_degrees(self) -> np.ndarray:
        return self.weights.sum(axis=0)

    @property
    def d_max(self) -> float:
        return float(self.in_degrees.max()) if self.n else 0.0

    def laplacian(self) -> np.ndarray:
        return laplacian_of(self.weights)

    def is_undirected(self, tol: float = 0.0) -> bool:
        return bool(np.all(np.abs(self.weights - self.weights.T) <= tol))

    def is_balanced(self, tol: float = BALANCE_TOL) -> bool:
        return bool(np.all(np.abs(self.in_degrees - self.out_degrees) <= tol))

    def edges(self) -> list[tuple[int, int, float]]:
        """``(i, j, w)`` triples with ``w > 0``: edge ``j -> i``."""
        ii, jj = np.nonzero(self.weights)
        return [(int(i), int(j), float(self.weights[i, j])) for i, j in zip(ii, jj)]

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[tuple[int, int, float]]) -> "WeightedDigraph":
        w = np.zeros((n, n))
        for i, j, a in edges:
            w[i, j] += a
        return cls(w)

    @classmethod
    def undirected(cls, n: int, edges: Iterable[tuple[int, int, float]]) -> "WeightedDigraph":
        w = np.zeros((n, n))
        for i, j, a in edges:
            w[i, j] += a
            w[j, i] += a
        return cls(w)

    @classmethod
    def complete(cls, n: int, weight: float = 1.0) -> "WeightedDigraph":
        return cls(weight * (np.ones((n, n)) - np.eye(n)))

    @classmethod
    def directed_cycle(cls, n: int, weight: float = 1.0) -> "WeightedDigraph":
        # edge i -> i+1
        w = np.zeros((n, n))
        for i in range(n):
            w[(i + 1) % n, i] = weight
        return cls(w)


def laplacian_of(a: np.ndarray) -> np.ndarray:
    """``D(A) - A`` with ``D`` the diagonal of row sums."""
    a = np.asarray(a, dtype=float)
    return np.diag(a.sum(axis=1)) - a


def has_spanning_tree(g: WeightedDigraph) -> bool:
    """True iff some node reaches every other node along directed edges.

    Works on the condensation: a directed spanning tree exists iff exactly
    one strongly connected component has no incoming edge from another one.
    """
    n = g.n
    if n <= 1:
        return True
    # csgraph wants edge u -> v at [u, v]; our weights store j -> i at [i, j]
    adj = csr_matrix((g.weights.T > 0).astype(np.int8))
    ncomp, labels = connected_components(adj, directed=True, connection="strong")
    if ncomp == 1:
        return True
    has_incoming = np.zeros(ncomp, dtype=bool)
    ii, jj = np.nonzero(g.weights)
    for i, j in zip(labels[ii], labels[jj]):
        if i != j:
            has_incoming[i] = True
    return int((~has_incoming).sum()) == 1


def sorted_eigenvalues(m: np.ndarray) -> np.ndarray:
    """Eigenvalues sorted by real part, ties by imaginary part."""
    try:
        ev = np.linalg.eigvals(np.asarray(m, dtype=float))
    except np.linalg.LinAlgError as exc:
        raise SpectralError(f"eigenvalue computation did not converge: {exc}") from exc
    if not np.all(np.isfinite(ev)):
        raise SpectralError("eigenvalue computation produced non-finite values")
    ev = ev.astype(complex)
    # round real parts so conjugate pairs compare equal on the primary key
    scale = max(1.0, float(np.max(np.abs(ev)))) if ev.size else 1.0
    key_re = np.round(ev.real / scale, 10)
    order = np.lexsort((ev.imag, key_re))
    return ev[order]


@dataclass(frozen=True, eq=False)
class SpectralReport:
    eigenvalues: np.ndarray
    lambda2: Optional[complex]
    d_max: float
    spanning_tree: bool
    balanced: bool

    @property
    def lambda2_re(self) -> Optional[float]:
        return None if self.lambda2 is None else float(self.lambda2.real)


def spectral_report(g: WeightedDigraph, tol: float = BALANCE_TOL) -> SpectralReport:
    if tol <= 0:
        raise ValueError("tol must be positive")
    ev = sorted_eigenvalues(g.laplacian())
    ev.setflags(write=False)
    return SpectralReport(
        eigenvalues=ev,
        lambda2=complex(ev[1]) if g.n >= 2 else None,
        d_max=g.d_max,
        spanning_tree=has_spanning_tree(g),
        balanced=g.is_balanced(tol),
    )


def _hop_diameter(g: WeightedDigraph) -> float:
    dist = shortest_path(csr_matrix((g.weights > 0).astype(float)), unweighted=True, directed=True)
    return float(dist.max())


def fiedler_bounds(g: WeightedDigraph) -> tuple[Optional[float], float]:
    """Bounds on Re(lambda_2): ``(lower, upper)``.

    ``upper = n/(n-1) * min in-degree``.  ``lower = 1/(diam * vol)`` is only
    returned for connected undirected graphs; ``diam`` is the hop-count
    diameter and ``vol`` the sum of weighted degrees.  The lower bound is a
    statement about graphs whose edge weights are at least 1 (it is not scale
    invariant: halving every weight halves lambda_2 but doubles the bound).
    """
    n = g.n
    if n < 2:
        raise ValueError("Fiedler bounds need at least two nodes")
    upper = n / (n - 1) * float(g.in_degrees.min())
    lower = None
    if g.is_undirected(tol=BALANCE_TOL) and has_spanning_tree(g):
        diam = _hop_diameter(g)
        vol = float(g.in_degrees.sum())
        if np.isfinite(diam) and diam > 0 and vol > 0:
            lower = 1.0 / (diam * vol)
    return lower, upper


def left_consensus_vector(p: np.ndarray) -> np.ndarray:
    """Left eigenvector of ``p`` for the eigenvalue closest to 1, summing to 1.

    Pass a Perron-type matrix (rows summing to 1).  For a Laplacian use
    ``np.eye(n) - L`` -- the left null vector of ``L`` is the same vector.
    """
    vals, vecs = np.linalg.eig(np.asarray(p, dtype=float).T)
    k = int(np.argmin(np.abs(vals - 1.0)))
    z = np.real(vecs[:, k])
    s = z.sum()
    if abs(s) < 1e-14:
        raise SpectralError("left eigenvector is orthogonal to the ones vector")
    return z / s


def perron_consensus_value(g: WeightedDigraph, alpha: float, x0: Sequence[float]) -> float:
    """Consensus value reached by ``x <- (I - L(alpha A)) x`` from ``x0``."""
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (g.n,):
        raise ValueError(f"x0 must have length {g.n}")
    if not alpha > 0:
        raise ValueError("step size must be positive")
    if not alpha * g.d_max < 1:
        raise ValueError(
            f"step size condition alpha < 1/d_max violated: alpha={alpha}, "
            f"d_max={g.d_max}, alpha*d_max={alpha * g.d_max}"
        )
    if not has_spanning_tree(g):
        raise ValueError("graph has no spanning tree; consensus value is not unique")
    p = np.eye(g.n) - alpha * g.laplacian()
    z = left_consensus_vector(p)
    return float(z @ x0)


def continuous_consensus_value(g: WeightedDigraph, x0: Sequence[float]) -> float:
    """Limit of ``dx/dtau = -L x``: the left-null-vector weighted average of ``x0``.

    Identical to the orthonormal-basis form ``(1/sqrt n) z1 . x0`` when the
    left and right bases are biorthonormal (``z1 . 1 = sqrt n``).
    """
    x0 = np.asarray(x0, dtype=float)
    if not has_spanning_tree(g):
        raise ValueError("graph has no spanning tree; consensus value is not unique")
    z = left_consensus_vector(np.eye(g.n) - g.laplacian())
    return float(z @ x0)


def read_edge_list(text: str) -> WeightedDigraph:
    """Parse the plain-text graph format.

    First significant line: ``n <count>`` (or just ``<count>``).  Each further
    line is ``i j w`` with 1-based ids: weight ``w`` on edge ``j -> i``.
    Blank lines and ``#`` comments are ignored.
    """
    n: Optional[int] = None
    edges: list[tuple[int, int, float]] = []
    seen: set[tuple[int, int]] = set()
    errors: list[str] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if n is None:
            if tok[0] == "n" and len(tok) == 2:
                tok = tok[1:]
            if len(tok) != 1:
                raise ValueError(f"line {lineno}: expected header 'n <count>'")
            n = int(tok[0])
            if n < 1:
                raise ValueError(f"line {lineno}: node count must be positive")
            continue
        if len(tok) != 3:
            errors.append(f"line {lineno}: expected 'i j w', got {line!r}")
            continue
        try:
            i, j, w = int(tok[0]), int(tok[1]), float(tok[2])
        except ValueError:
            errors.append(f"line {lineno}: could not parse {line!r}")
            continue
        if not (1 <= i <= n and 1 <= j <= n):
            errors.append(f"line {lineno}: node id out of range 1..{n}")
        elif i == j:
            errors.append(f"line {lineno}: self-loop on node {i}")
        elif w < 0:
            errors.append(f"line {lineno}: negative weight")
        elif (i, j) in seen:
            errors.append(f"line {lineno}: duplicate edge {j} -> {i}")
        else:
            seen.add((i, j))
            edges.append((i - 1, j - 1, w))
    if n is None:
        raise ValueError("missing header line with node count")
    if errors:
        raise ValueError("; ".join(errors))
    return WeightedDigraph.from_edges(n, edges)


def write_edge_list(g: WeightedDigraph) -> str:
    lines = [f"n {g.n}"]
    for i, j, w in g.edges():
        lines.append(f"{i + 1} {j + 1} {w!r}")
    return "\n".join(lines) + "\n"
