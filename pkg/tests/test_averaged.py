from __future__ import annotations

import dataclasses
import math

import numpy as np
import pytest

from lvcons.averaged import (
    AveragedDiscreteModel,
    AveragedOdeModel,
    calibrate_ode_constants,
    consensus_timing,
    certified_step_cap,
    deviation_estimate,
    dist0_from_anchor,
    integrate_ode,
    matrix_norm,
    run_averaged_discrete,
    step_averaged_discrete,
    deviation_bound_constants,
    consensus_bound_constants,
    consensus_bound_holds,
    time_to_eps_consensus,
)
from lvcons.core import ConsensusScenario, ExtendedState, StepSizeSchedule, deterministic_step, dynamics_family
from lvcons.graph import left_consensus_vector
from lvcons.topology import build_a_max, spec_from_adjacency

from conftest import BALANCED_WEIGHTS, six_node_spec
from oracles import linear_flow

IDENT = dynamics_family("identity-control")


def test_rhs_independent_of_alpha_for_identity(six):
    topo = build_a_max(six)
    x = np.arange(6.0)
    r1 = AveragedOdeModel(topo, IDENT, 0.1).rhs(x)
    r2 = AveragedOdeModel(topo, IDENT, 0.7).rhs(x)
    assert np.allclose(r1, r2)
    assert np.allclose(r1, -topo.laplacian_max @ x)


def test_s_sums_to_zero_when_balanced():
    topo = build_a_max(six_node_spec(weights=BALANCED_WEIGHTS))
    x = np.random.default_rng(0).normal(size=6)
    assert AveragedOdeModel(topo, IDENT, 0.1).s(x).sum() == pytest.approx(0, abs=1e-12)


def test_ode_constant_state_stays_put(six):
    _, xs = integrate_ode(AveragedOdeModel(build_a_max(six), IDENT, 0.1), np.full(6, 3.0), 5.0)
    assert np.allclose(xs, 3.0)


def test_ode_balanced_conserves_sum():
    topo = build_a_max(six_node_spec(weights=BALANCED_WEIGHTS))
    x0 = np.arange(6.0)
    _, xs = integrate_ode(AveragedOdeModel(topo, IDENT, 0.1), x0, 20.0)
    assert np.allclose(xs.sum(axis=1), x0.sum(), atol=1e-9)


def test_ode_matches_matrix_exponential(six):
    """[DERIVED] RK4 at h = 0.01 against expm(-10 L) x0."""
    topo = build_a_max(six)
    x0 = np.array([3.0, -1.0, 4.0, 1.0, -5.0, 9.0])
    _, xs = integrate_ode(AveragedOdeModel(topo, IDENT, 0.1), x0, 10.0, h=0.01)
    assert np.allclose(xs[-1], linear_flow(topo.laplacian_max, x0, 10.0), atol=1e-8)
    z = left_consensus_vector(np.eye(6) - topo.laplacian_max)
    # weighted average is invariant along the flow
    assert np.allclose(xs @ z, z @ x0, atol=1e-9)


def test_ode_samples_on_schedule_grid(six):
    sched = StepSizeSchedule("one-over-t", 1.0)
    taus = sched.taus(10)
    t, xs = integrate_ode(AveragedOdeModel(build_a_max(six), IDENT, 1.0), np.arange(6.0), float(taus[-1]), h=0.01, taus=taus)
    assert np.array_equal(t, taus)
    assert xs.shape == (11, 6)
    with pytest.raises(ValueError):
        integrate_ode(AveragedOdeModel(build_a_max(six), IDENT, 1.0), np.zeros(6), -1.0)
    with pytest.raises(ValueError):
        integrate_ode(AveragedOdeModel(build_a_max(six), IDENT, 1.0), np.zeros(6), 1.0, h=0.0)


def test_discrete_map_rows_sum_to_one():
    model = AveragedDiscreteModel(build_a_max(six_node_spec(d_bar=1)), IDENT)
    m = model.one_step_matrix(0.1)
    assert np.allclose(m.sum(axis=1), 1.0)


def test_discrete_step_matches_one_step_matrix(rng):
    topo = build_a_max(six_node_spec(d_bar=1))
    model = AveragedDiscreteModel(topo, IDENT)
    z = ExtendedState.from_flat(rng.normal(size=12), 6)
    nxt = step_averaged_discrete(model, z, 0.1)
    assert np.allclose(nxt.flat, model.one_step_matrix(0.1) @ z.flat)


def test_discrete_no_delay_equals_deterministic_step(six, rng):
    topo = build_a_max(six)
    z = ExtendedState.initial(rng.normal(size=6), 0)
    nxt = AveragedDiscreteModel(topo, IDENT).step(z, 0.2)
    assert np.allclose(nxt.x, deterministic_step(z.x, topo.a_max, 0.2))


def test_discrete_consensus_fixed_point():
    model = AveragedDiscreteModel(build_a_max(six_node_spec(d_bar=1)), IDENT)
    z = ExtendedState.initial(np.full(6, 1.5), 1, "clamp")
    assert np.allclose(model.step(z, 0.1).flat, 1.5)


def test_delayed_discrete_converges_to_left_vector_prediction():
    spec = six_node_spec(d_bar=1)
    topo = build_a_max(spec)
    assert 0.1 * topo.d_max < 1
    model = AveragedDiscreteModel(topo, IDENT)
    z0 = ExtendedState.initial(np.arange(1.0, 7.0), 1)
    zs = run_averaged_discrete(model, z0, StepSizeSchedule("constant", 0.1), 3000)
    z = left_consensus_vector(model.one_step_matrix(0.1))
    target = z @ z0.flat
    assert np.allclose(zs[-1], target, atol=1e-8)


def test_time_to_eps_formula():
    assert time_to_eps_consensus(0.5, 3, 2.0, 0.1) == pytest.approx(math.log(40) / 1.0)
    assert time_to_eps_consensus(0.5, 3, 2.0, 4.0) == 0.0
    assert time_to_eps_consensus(0.5, 3, 2.0, 10.0) == 0.0
    for bad in ((0.0, 3, 1.0, 0.1), (0.5, 3, 0.0, 0.1), (0.5, 3, 1.0, 0.0)):
        with pytest.raises(ValueError):
            time_to_eps_consensus(*bad)


def test_time_difference_identity():
    lam = 0.37
    t1 = time_to_eps_consensus(lam, 8, 12.0, 0.02)
    t2 = time_to_eps_consensus(lam, 8, 12.0, 0.5)
    assert t1 - t2 == pytest.approx(math.log(0.5 / 0.02) / (2 * lam), rel=1e-14)


def test_anchor_inverse():
    d0 = dist0_from_anchor(0.7, 5, 3.0, 0.5)
    assert time_to_eps_consensus(0.7, 5, d0, 0.5) == pytest.approx(3.0)


def test_eps_consensus_time_holds_on_six_node(six):
    """||x(tau) - x* 1||^2 <= eps for tau >= T(eps) on the averaged six-node flow."""
    topo = build_a_max(six)
    x0 = np.array([1.0, 2, 3, 4, 5, 6])
    tm = consensus_timing(topo.a_max, x0)
    assert tm.lambda2_re == pytest.approx(0.8311903884, abs=1e-9)
    assert tm.x_star == pytest.approx(33 / 9)
    for eps in (1.0, 0.1, 0.01):
        T = tm.T(eps)
        for tau in np.linspace(T, T + 10, 21):
            x = linear_flow(topo.laplacian_max, x0, tau)
            assert np.sum((x - tm.x_star) ** 2) <= eps


def test_norms():
    m = np.array([[3.0, 0], [0, 4.0]])
    assert matrix_norm(m) == pytest.approx(5.0)
    assert matrix_norm(m, "spectral") == pytest.approx(4.0)
    with pytest.raises(ValueError):
        matrix_norm(m, "max")


def test_deviation_bound_hand_substitution():
    """d_bar = 0, no noise, f = u on a 2-cycle with unit weights, alpha = 0.1, T = 10."""
    spec = spec_from_adjacency(np.array([[0, 1.0], [1.0, 0]]))
    sched = StepSizeSchedule("constant", 0.1)
    X0 = np.array([1.0, -1.0])
    c = deviation_bound_constants(spec, IDENT, sched, X0, 10)
    Ln2 = 4.0  # ||[[1,-1],[-1,1]]||_F^2
    assert c.norm_L == pytest.approx(2.0)
    assert c.c_tilde == 0
    assert c.b_bar == 1.0
    assert c.c_hat == pytest.approx(2 * 2 * 1.0)
    assert c.c2 == pytest.approx(2 * (2 * 0.01 * Ln2))  # = 4 alpha^2 ||L||^2
    c_prime = 2 * 1 * 2.0 + 0.1 * (1 * Ln2 + 4.0)
    assert c.c_prime == pytest.approx(c_prime)
    assert c.c3 == pytest.approx(0.1 * c_prime)
    c1 = 8 * 2 * (0 + 4.0 * (0 + 2.0) * math.exp(10 * math.log1p(c.c3)))
    assert c.c1 == pytest.approx(c1)
    assert c.tau_T == pytest.approx(1.0)
    assert c.log_bound == pytest.approx(math.log(c1 * 1.0 * math.exp(c.c2) * 0.1))
    assert c.d_tilde == 0


def test_deviation_bound_bound_linear_in_alpha_at_fixed_tau():
    """With c2 tau^2 and the exponential growth held fixed, the bound scales with alpha_bar."""
    spec = six_node_spec()
    X0 = np.arange(6.0)
    a = deviation_bound_constants(spec, IDENT, StepSizeSchedule("constant", 0.1), X0, 40)
    b = deviation_bound_constants(spec, IDENT, StepSizeSchedule("constant", 0.05), X0, 80)
    assert a.tau_T == pytest.approx(b.tau_T)
    assert b.bound < a.bound


def test_deviation_bound_vanishing_step_with_state_dependence():
    dyn = dataclasses.replace(IDENT, Lx=1.0)
    sched = StepSizeSchedule("explicit", values=(0.1, 0.1))
    c = deviation_bound_constants(six_node_spec(), dyn, sched, np.zeros(6), 1)
    assert c.c2 > 0
    with pytest.raises(ValueError):
        deviation_bound_constants(six_node_spec(), IDENT, sched, np.zeros(6), 0)


def test_consensus_bound_constants_six_node_regression():
    """[DERIVED] literal evaluation, frozen: delayed six-node, noise 0.04, alpha 0.1, T 100."""
    spec = six_node_spec(d_bar=1, noise_var=0.04)
    X0 = ExtendedState.initial(np.arange(1.0, 7.0), 1).flat
    c = consensus_bound_constants(spec, 0.1, 100, X0)
    assert c.d_tilde == 1
    assert c.tau_T == pytest.approx(20.0)
    assert c.c_hat == pytest.approx(96000.0)
    assert c.c_tilde == pytest.approx(5.76)
    assert c.c3 == pytest.approx(1924.175)
    assert c.C2_bar == pytest.approx(0.175)
    assert c.norm_L == pytest.approx(2.958039891549808)
    assert c.log_bound == pytest.approx(776.9995266654709, rel=1e-12)
    assert not consensus_bound_holds(c, 0.5)
    for v in (c.c3, c.c_hat, c.c_tilde, c.C2_bar, c.b_bar):
        assert v >= 0


def test_consensus_bound_no_delay_c3():
    spec = six_node_spec()
    c = consensus_bound_constants(spec, 0.1, 10, np.zeros(6))
    assert c.d_tilde == 0
    assert c.c3 == pytest.approx(2 + 2 * 0.01 * (c.norm_L ** 2 + c.c_hat))
    assert c.c_tilde == 0


def test_consensus_bound_step_condition():
    with pytest.raises(ValueError, match="alpha < 1/d_max"):
        consensus_bound_constants(six_node_spec(), 1.0, 10, np.zeros(6))


def test_consensus_bound_load_balance_variant():
    spec = six_node_spec(noise_var=0.25)
    c = consensus_bound_constants(spec, 0.1, 10, np.zeros(6), variant="load-balance", productivities=np.full(6, 0.5))
    assert c.c_tilde == pytest.approx(6 * (0.5 / 0.5) ** 2 * 2.0)
    assert c.c_hat == pytest.approx(2 * 6 * 2.0 * 1.0)
    with pytest.raises(ValueError):
        consensus_bound_constants(spec, 0.1, 10, np.zeros(6), variant="load-balance")


def test_deviation_zero_when_systems_coincide(rng):
    a = rng.uniform(0.1, 1.0, (4, 4))
    np.fill_diagonal(a, 0)
    sc = ConsensusScenario(spec_from_adjacency(a), IDENT, StepSizeSchedule("constant", 0.1), rng.normal(size=4), T=30)
    est = deviation_estimate(sc, range(5))
    assert est.mean == pytest.approx(0, abs=1e-24)


def test_deviation_thread_independent():
    sc = ConsensusScenario(six_node_spec(d_bar=1, noise_var=0.04), IDENT, StepSizeSchedule("constant", 0.1), np.arange(6.0), T=40)
    a = deviation_estimate(sc, range(8), threads=1)
    b = deviation_estimate(sc, range(8), threads=4)
    assert a.per_seed == b.per_seed
    assert a.mean == b.mean
    ode = deviation_estimate(sc, range(4), mode="ode")
    assert ode.mode == "ode" and ode.mean > 0
    with pytest.raises(ValueError):
        deviation_estimate(sc, range(2), mode="nope")


def test_step_cap_formula():
    assert certified_step_cap(0.5, 2.0, 0.1, 3.0) == pytest.approx(0.5 / (8 * math.exp(0.3)))


def test_calibration_envelope_covers_pilot():
    sc = ConsensusScenario(six_node_spec(noise_var=0.04), IDENT, StepSizeSchedule("constant", 0.1), np.arange(6.0))
    c1, c2 = calibrate_ode_constants(sc, (0.2, 0.1), 2.0, range(10), points=5)
    assert c1 > 0 and c2 >= 0
