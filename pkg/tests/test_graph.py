from __future__ import annotations

import numpy as np
import pytest

from lvcons.graph import (
    SpectralError,
    WeightedDigraph,
    continuous_consensus_value,
    fiedler_bounds,
    has_spanning_tree,
    laplacian_of,
    left_consensus_vector,
    perron_consensus_value,
    read_edge_list,
    sorted_eigenvalues,
    spectral_report,
    write_edge_list,
)

from oracles import power_limit, spanning_tree_bfs, spanning_tree_rank


def test_rejects_bad_adjacency():
    with pytest.raises(ValueError, match="square"):
        WeightedDigraph(np.zeros((2, 3)))
    with pytest.raises(ValueError, match="non-negative"):
        WeightedDigraph(np.array([[0, -1.0], [1, 0]]))
    with pytest.raises(ValueError, match="self-loops"):
        WeightedDigraph(np.eye(2))
    with pytest.raises(ValueError, match="non-finite"):
        WeightedDigraph(np.array([[0, np.nan], [1, 0]]))


def test_weights_are_read_only():
    g = WeightedDigraph.complete(3)
    with pytest.raises(ValueError):
        g.weights[0, 1] = 5.0


def test_laplacian_rows_sum_to_zero(rng):
    a = rng.uniform(0, 2, (7, 7)) * (rng.random((7, 7)) < 0.4)
    np.fill_diagonal(a, 0)
    lap = laplacian_of(a)
    assert np.allclose(lap.sum(axis=1), 0, atol=1e-12)
    assert np.allclose(np.diag(lap), a.sum(axis=1))


def test_direction_convention():
    # weights[i, j] is the link j -> i: node 0 feeds node 1 only
    g = WeightedDigraph.from_edges(2, [(1, 0, 1.0)])
    assert g.in_degrees.tolist() == [0.0, 1.0]
    assert has_spanning_tree(g)
    assert not has_spanning_tree(WeightedDigraph(np.zeros((2, 2))))


def test_spanning_tree_known_cases():
    assert has_spanning_tree(WeightedDigraph.directed_cycle(5))
    # two sources -> no spanning tree
    two_roots = WeightedDigraph.from_edges(3, [(2, 0, 1.0), (2, 1, 1.0)])
    assert not has_spanning_tree(two_roots)
    # a star rooted at 0
    star = WeightedDigraph.from_edges(4, [(i, 0, 1.0) for i in range(1, 4)])
    assert has_spanning_tree(star)
    assert has_spanning_tree(WeightedDigraph(np.zeros((1, 1))))


def test_spanning_tree_matches_oracles_on_random_digraphs(rng):
    for _ in range(300):
        n = int(rng.integers(2, 9))
        w = (rng.random((n, n)) < rng.uniform(0.1, 0.5)).astype(float)
        np.fill_diagonal(w, 0)
        got = has_spanning_tree(WeightedDigraph(w))
        assert got == spanning_tree_bfs(w) == spanning_tree_rank(w)


def test_eigenvalues_sorted_and_conjugate_pairs_adjacent():
    ev = sorted_eigenvalues(WeightedDigraph.directed_cycle(5).laplacian())
    assert abs(ev[0]) < 1e-12
    assert np.all(np.diff(np.round(ev.real, 9)) >= 0)
    # conjugate pair: same real part, imaginary ascending
    assert ev[1].real == pytest.approx(ev[2].real)
    assert ev[1].imag < 0 < ev[2].imag


def test_sorted_eigenvalues_rejects_nonfinite():
    with pytest.raises((SpectralError, np.linalg.LinAlgError)):
        sorted_eigenvalues(np.array([[np.inf, 0], [0, 1.0]]))


def test_complete_graph_spectrum():
    """K_n with unit weights: eigenvalues 0 and n (multiplicity n - 1)."""
    rep = spectral_report(WeightedDigraph.complete(5))
    assert rep.eigenvalues[0] == pytest.approx(0, abs=1e-12)
    assert np.allclose(rep.eigenvalues[1:].real, 5.0)
    assert rep.lambda2_re == pytest.approx(5.0)
    assert rep.balanced and rep.spanning_tree


def test_report_rejects_nonpositive_tol():
    with pytest.raises(ValueError):
        spectral_report(WeightedDigraph.complete(3), tol=0)


def test_six_node_averaged_spectrum(six):
    """[DERIVED] unit-weight averaged six-node network: lambda_2 = 0.8311903884 +- 0.9278915393i."""
    from lvcons.topology import build_a_max

    g = WeightedDigraph(build_a_max(six).a_max)
    rep = spectral_report(g)
    assert rep.lambda2_re == pytest.approx(0.8311903884, abs=1e-9)
    assert abs(rep.lambda2.imag) == pytest.approx(0.9278915393, abs=1e-9)
    assert not rep.balanced


def test_fiedler_path_graph():
    """Path on 3 nodes: lambda_2 = 1, diam 2, vol 4, min degree 1."""
    g = WeightedDigraph.undirected(3, [(0, 1, 1.0), (1, 2, 1.0)])
    lo, hi = fiedler_bounds(g)
    assert lo == pytest.approx(1 / 8)
    assert hi == pytest.approx(1.5)
    lam = spectral_report(g).lambda2_re
    assert lo <= lam <= hi


def test_fiedler_lower_bound_absent_for_directed():
    lo, hi = fiedler_bounds(WeightedDigraph.directed_cycle(4))
    assert lo is None
    assert hi == pytest.approx(4 / 3)


def test_fiedler_lower_bound_needs_unit_scale_weights():
    """Shrinking weights shrinks lambda_2 but raises the lower bound: the bound assumes weights >= 1."""
    g = WeightedDigraph.undirected(2, [(0, 1, 0.01)])
    lo, _ = fiedler_bounds(g)
    assert spectral_report(g).lambda2_re < lo


def test_perron_consensus_value_matches_power_iteration(rng):
    a = rng.uniform(0.2, 1.0, (5, 5))
    np.fill_diagonal(a, 0)
    g = WeightedDigraph(a)
    alpha = 0.9 / g.d_max
    x0 = rng.normal(size=5)
    p = np.eye(5) - alpha * g.laplacian()
    expected = power_limit(p, x0, 4096)
    assert np.allclose(expected, expected[0], atol=1e-10)
    assert perron_consensus_value(g, alpha, x0) == pytest.approx(expected[0], abs=1e-10)
    assert continuous_consensus_value(g, x0) == pytest.approx(expected[0], abs=1e-10)


def test_perron_step_condition_and_spanning_tree():
    g = WeightedDigraph.complete(3)
    with pytest.raises(ValueError, match="alpha < 1/d_max"):
        perron_consensus_value(g, 0.5, [1, 2, 3])
    disconnected = WeightedDigraph(np.zeros((3, 3)))
    with pytest.raises(ValueError, match="spanning tree"):
        perron_consensus_value(disconnected, 0.1, [1, 2, 3])


def test_balanced_consensus_is_average():
    g = WeightedDigraph.directed_cycle(4, 2.0)
    assert perron_consensus_value(g, 0.2, [1, 2, 3, 10]) == pytest.approx(4.0)


def test_left_vector_sums_to_one():
    z = left_consensus_vector(np.eye(3) - 0.1 * WeightedDigraph.complete(3).laplacian())
    assert z.sum() == pytest.approx(1.0)
    assert np.allclose(z, 1 / 3)


def test_edge_list_roundtrip(rng):
    a = np.round(rng.uniform(0, 3, (4, 4)), 3) * (rng.random((4, 4)) < 0.6)
    np.fill_diagonal(a, 0)
    g = WeightedDigraph(a)
    back = read_edge_list(write_edge_list(g))
    assert np.array_equal(back.weights, g.weights)


def test_edge_list_reports_every_problem():
    text = "n 3\n1 2 1.0\n1 2 2.0\n2 2 1\n4 1 1\n3 1 -1\n"
    with pytest.raises(ValueError) as exc:
        read_edge_list(text)
    msg = str(exc.value)
    for needle in ("duplicate", "self-loop", "out of range", "negative"):
        assert needle in msg


def test_edge_list_header_forms():
    assert read_edge_list("# comment\n3\n2 1 1.5\n").weights[1, 0] == 1.5
    with pytest.raises(ValueError, match="header"):
        read_edge_list("")


def test_gershgorin_disc(rng):
    for _ in range(50):
        n = int(rng.integers(2, 10))
        a = rng.uniform(0, 2, (n, n)) * (rng.random((n, n)) < 0.5)
        np.fill_diagonal(a, 0)
        g = WeightedDigraph(a)
        ev = sorted_eigenvalues(g.laplacian())
        assert np.all(np.abs(ev - g.d_max) <= g.d_max + 1e-9)
        assert np.all(ev.real >= -1e-9)
