import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meanfield_ldp.measures import StateDistribution, theta_values
from meanfield_ldp.mckean_vlasov import find_equilibrium, integrate
from meanfield_ldp.models import single_particle_stationary
from meanfield_ldp.cost import (EndpointMismatchError, FluxTrajectory,
                                InfeasibleTrajectoryError, Segment,
                                concatenate, cost_nonvariational,
                                cost_variational, evolve, flux_from_path,
                                load_trajectory, moment_inequality_check,
                                save_trajectory, tau, tau_star,
                                testfunction_lower_bound)


# -- Poisson conjugate pair ------------------------------------------------------

def test_tau_and_dual_at_origin():
    assert tau(0.0) == 0.0
    assert tau_star(0.0) == 0.0


def test_tau_star_special_values():
    assert tau_star(-1.0) == 1.0
    assert tau_star(-1.5) == math.inf
    # symbolic evaluation: (e) * 1 - (e - 1) = 1
    assert tau_star(math.e - 1.0) == pytest.approx(1.0, abs=1e-14)


def test_tau_star_convex_nonnegative():
    us = np.linspace(-1.0, 4.0, 101)
    vals = [tau_star(float(u)) for u in us]
    assert all(v >= 0.0 for v in vals)
    mid = [0.5 * (a + c) >= tau_star(float(0.5 * (u1 + u2))) - 1e-12
           for (a, u1), (c, u2) in zip(zip(vals, us), zip(vals[2:], us[2:]))]
    assert all(mid)


@settings(max_examples=200, deadline=None)
@given(st.floats(-3, 3), st.floats(-0.999, 5))
def test_duality_inequality(u, h):
    assert h * u <= tau_star(h) + tau(u) + 1e-12


# -- evolve -----------------------------------------------------------------------

def test_evolve_zero_fluxes_constant():
    init = StateDistribution.geometric(0.5, 8)
    traj = FluxTrajectory(init, (Segment(2.0, {}),), 8)
    path = evolve(traj)
    assert np.array_equal(path.probs[0], path.probs[-1])


def test_evolve_unit_transfer():
    traj = FluxTrajectory(StateDistribution.delta(0, 5),
                          (Segment(1.0, {(0, 1): 1.0}),), 5)
    path = evolve(traj)
    assert abs(path.probs[-1][1] - 1.0) < 1e-15
    assert abs(path.probs[-1][0]) < 1e-15


def test_evolve_infeasible():
    traj = FluxTrajectory(StateDistribution.delta(0, 5),
                          (Segment(2.0, {(0, 1): 1.0}),), 5)
    with pytest.raises(InfeasibleTrajectoryError):
        evolve(traj)


# -- control-form cost --------------------------------------------------------------

def test_cost_of_drift_matched_fluxes_is_zero(wlan_const):
    """Fluxes equal to lambda * phi on every edge give h = 0."""
    pi = single_particle_stationary(wlan_const, 12)
    fwd = wlan_const.forward_rates(12) * pi.probs
    back = wlan_const.backward_rates(12) * pi.probs
    fluxes = {(z, z + 1): float(fwd[z]) for z in range(12)}
    fluxes.update({(z, 0): float(back[z]) for z in range(1, 13)})
    traj = FluxTrajectory(pi, (Segment(3.0, fluxes),), 12)
    assert cost_nonvariational(wlan_const, traj) < 1e-8


def test_cost_all_zero_fluxes_idle_suppression(wlan_const):
    """h = -1 everywhere: cost is the integral of sum lambda * phi."""
    xi = StateDistribution.geometric(0.5, 10)
    T = 1.7
    traj = FluxTrajectory(xi, (Segment(T, {}),), 10)
    fwd = wlan_const.forward_rates(10) * xi.probs
    back = wlan_const.backward_rates(10) * xi.probs
    expected = T * float(fwd.sum() + back.sum())
    assert cost_nonvariational(wlan_const, traj) == pytest.approx(
        expected, rel=1e-12)


def _simpson_adaptive(f, a, b, tol, depth=0):
    m = 0.5 * (a + b)
    s1 = (b - a) / 6.0 * (f(a) + 4 * f(m) + f(b))
    lm, rm = 0.5 * (a + m), 0.5 * (m + b)
    s2 = (m - a) / 6.0 * (f(a) + 4 * f(lm) + f(m)) \
        + (b - m) / 6.0 * (f(m) + 4 * f(rm) + f(b))
    if depth > 40 or abs(s2 - s1) < 15 * tol:
        return s2 + (s2 - s1) / 15.0
    return (_simpson_adaptive(f, a, m, tol / 2, depth + 1)
            + _simpson_adaptive(f, m, b, tol / 2, depth + 1))


def test_unit_transfer_against_quadrature_oracle(wlan_const):
    """Closed-form segment cost versus adaptive quadrature of
    sum_edges tau*(flux/(lambda phi) - 1) lambda phi along the path."""
    traj = FluxTrajectory(StateDistribution.delta(0, 5),
                          (Segment(1.0, {(0, 1): 1.0}),), 5)

    def integrand(t):
        phi0 = 1.0 - t
        phi1 = t
        total = 0.0
        if phi0 > 0:
            total += tau_star(1.0 / phi0 - 1.0) * phi0  # edge (0,1), flux 1
        total += phi1  # idle forward edge (1,2): tau*(-1) * lambda * phi1
        total += phi1  # idle reset edge (1,0)
        return total

    # integrable log singularity at t -> 1: quadrature on [0, 1-eps] plus
    # the analytic remainder of the singular part
    eps = 1e-12
    oracle = _simpson_adaptive(integrand, 0.0, 1.0 - eps, 1e-10)
    oracle += eps * math.log(1.0 / eps) + 0.5 * eps * eps  # active-edge tail
    val = cost_nonvariational(wlan_const, traj)
    assert val == pytest.approx(oracle, abs=1e-6)
    assert val == pytest.approx(1.5, abs=1e-9)  # exact closed form


def test_inf_sentinel_flux_from_empty_state(wlan_const):
    init = StateDistribution.delta(0, 5)
    traj = FluxTrajectory(init, (Segment(1.0, {(2, 0): 0.0, (0, 1): 0.1}),), 5)
    assert cost_nonvariational(wlan_const, traj) < math.inf
    # positive flux out of state 2 whose mass is identically zero (small
    # enough that the feasibility tolerance does not trip first)
    bad = FluxTrajectory(init, (Segment(0.5, {(2, 3): 1e-12}),), 5)
    assert cost_nonvariational(wlan_const, bad) == math.inf


def test_cost_nonnegative_random(wlan_const):
    rng = np.random.default_rng(5)
    for _ in range(10):
        p = rng.dirichlet(np.ones(9) * 2)
        init = StateDistribution(p, 8)
        fwd = wlan_const.forward_rates(8) * p
        fluxes = {(z, z + 1): float(fwd[z] * rng.uniform(0, 2))
                  for z in range(8)}
        traj = FluxTrajectory(init, (Segment(0.05, fluxes),), 8)
        try:
            c = cost_nonvariational(wlan_const, traj)
        except InfeasibleTrajectoryError:
            continue
        assert c >= -1e-10


def test_edge_cost_vectorised_matches_scalar():
    from meanfield_ldp.cost import _edge_cost, _edge_cost_vec
    rng = np.random.default_rng(0)
    for _ in range(200):
        f = float(rng.choice([0.0, rng.uniform(0, 2)]))
        lam = float(rng.uniform(0.1, 3))
        phi0 = float(rng.choice([0.0, rng.uniform(0, 1)]))
        phi1 = float(rng.choice([0.0, rng.uniform(0, 1)]))
        delta = float(rng.uniform(0.01, 1))
        ref = _edge_cost(f, lam, phi0, phi1, delta)
        vec = _edge_cost_vec(np.array([f]), np.array([lam]),
                             np.array([phi0]), np.array([phi1]), delta)
        if math.isinf(ref):
            assert math.isinf(vec)
        else:
            assert vec == pytest.approx(ref, rel=1e-12, abs=1e-15)


# -- variational form and duality ------------------------------------------------------

def test_variational_zero_on_flow(wlan_const):
    nu = StateDistribution.from_weights(np.exp(-0.4 * np.arange(21)), 20)
    path = integrate(wlan_const, nu, 2.0, tol=1e-10, dt_max=0.004)
    assert cost_variational(wlan_const, path) < 1e-6


def test_variational_nonnegative(wlan_const):
    times = np.array([0.0, 0.5, 1.0])
    a = StateDistribution.geometric(0.5, 8).probs.copy()
    a /= a.sum()
    b = np.roll(a, 1)
    b[0] = a[0]
    b /= b.sum()
    probs = np.stack([a, b, a])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert cost_variational(wlan_const, (times, probs)) >= 0.0


def _random_feasible(model, rng, z_max, T_max):
    p = rng.dirichlet(np.full(z_max + 1, 2.0))
    p = 0.7 * p + 0.3 / (z_max + 1)
    init = StateDistribution(p / p.sum(), z_max)
    segs = []
    cur = init.probs.copy()
    n_seg = int(rng.integers(3, 6))
    for _ in range(n_seg):
        d = float(rng.uniform(0.1, T_max / n_seg))
        fwd = model.forward_rates(z_max, cur) * cur
        back = model.backward_rates(z_max, cur) * cur
        fluxes = {}
        for z in range(z_max):
            fluxes[(z, z + 1)] = float(fwd[z] * math.exp(rng.uniform(-0.6, 0.6)))
        for z in range(1, z_max + 1):
            fluxes[(z, model.backward_target(z))] = \
                float(back[z] * math.exp(rng.uniform(-0.6, 0.6)))
        for _ in range(50):
            div = np.zeros(z_max + 1)
            for (a, b), f in fluxes.items():
                div[a] -= f
                div[b] += f
            trial = cur + d * div
            if trial.min() > 1e-4:
                break
            fluxes = {e: 0.5 * f for e, f in fluxes.items()}
        segs.append(Segment(d, fluxes))
        cur = trial
    return FluxTrajectory(init, tuple(segs), z_max)


def test_duality_crosscheck_small(mm1, wlan_const):
    rng = np.random.default_rng(11)
    for model in (mm1, wlan_const):
        traj = _random_feasible(model, rng, 6, 1.5)
        path = evolve(traj)
        var = cost_variational(model, path)
        rec = flux_from_path(model, path)
        nonvar = cost_nonvariational(model, rec)
        assert abs(var - nonvar) < 1e-5
        assert nonvar <= cost_nonvariational(model, traj) + 1e-8


def test_flux_recovery_on_flow_matches_drift(wlan_const):
    nu = StateDistribution.from_weights(np.exp(-0.4 * np.arange(13)), 12)
    path = integrate(wlan_const, nu, 1.0, tol=1e-10, dt_max=0.01)
    rec = flux_from_path(wlan_const, path, refine=1)
    times, probs = path.as_grid()
    k = len(rec.segments) // 2
    mid = 0.5 * (probs[k] + probs[k + 1])
    fwd = wlan_const.forward_rates(12, mid) * mid
    for z in range(6):
        assert rec.segments[k].fluxes[(z, z + 1)] == pytest.approx(
            float(fwd[z]), abs=1e-6)


def test_flux_recovery_balance_residual(wlan_const):
    """Constant non-equilibrium path: strictly positive cost and exact
    balance between recovered fluxes and the (zero) slope."""
    p = StateDistribution.geometric(0.7, 10)
    p = StateDistribution(p.probs / p.probs.sum(), 10)
    times = np.linspace(0.0, 1.0, 21)
    probs = np.tile(p.probs, (21, 1))
    rec = flux_from_path(wlan_const, (times, probs))
    path2 = evolve(rec)
    assert np.abs(path2.probs[-1] - p.probs).sum() < 1e-8
    assert cost_nonvariational(wlan_const, rec) > 0.01


def test_flux_recovery_cheaper_than_two_way_flow(mm1):
    """Simultaneous forward/backward flux on birth-death edges is
    wasteful; the dual-optimal split can only cost less."""
    p = StateDistribution.geometric(0.5, 6)
    p = StateDistribution(p.probs / p.probs.sum(), 6)
    fluxes = {(2, 3): 0.05, (3, 2): 0.05}  # net zero, pure churn
    traj = FluxTrajectory(p, (Segment(1.0, fluxes),), 6)
    path = evolve(traj)
    rec = flux_from_path(mm1, path)
    assert cost_nonvariational(mm1, rec) <= cost_nonvariational(mm1, traj) + 1e-8


# -- concatenation ---------------------------------------------------------------------

def test_concatenate_empty_identity(wlan_const):
    init = StateDistribution.geometric(0.5, 8)
    a = FluxTrajectory(init, (Segment(1.0, {(0, 1): 0.1}),), 8)
    empty = FluxTrajectory(evolve(a).final_distribution(), (), 8)
    assert concatenate(a, empty) is a


def test_concatenate_cost_additive(wlan_const):
    init = StateDistribution.geometric(0.5, 8)
    a = FluxTrajectory(init, (Segment(0.5, {(0, 1): 0.2}),), 8)
    end_a = evolve(a).final_distribution()
    b = FluxTrajectory(end_a, (Segment(0.5, {(1, 0): 0.1}),), 8)
    glued = concatenate(a, b)
    ca = cost_nonvariational(wlan_const, a)
    cb = cost_nonvariational(wlan_const, b)
    assert cost_nonvariational(wlan_const, glued) == pytest.approx(
        ca + cb, abs=1e-12)


def test_concatenate_endpoint_mismatch(wlan_const):
    init = StateDistribution.geometric(0.5, 8)
    a = FluxTrajectory(init, (Segment(0.5, {(0, 1): 0.2}),), 8)
    b = FluxTrajectory(init, (Segment(0.5, {}),), 8)  # wrong start
    with pytest.raises(EndpointMismatchError):
        concatenate(a, b)


# -- test-function lower bounds -----------------------------------------------------------

def test_lower_bound_vacuous_at_equilibrium(mm1):
    xi_star = single_particle_stationary(mm1, 30)
    for kind in ("linear_fn", "theta_n"):
        for n in (1, 5, 20):
            assert testfunction_lower_bound(mm1, xi_star, xi_star, 1.0, n,
                                            kind) <= 0.0


def test_lower_bound_grows_with_truncation(mm1):
    from meanfield_ldp.quasipotential import heavy_tail_target
    vals = []
    for K in (50, 200, 800):
        target = heavy_tail_target(K)
        xi_star = single_particle_stationary(mm1, K)
        best = max(testfunction_lower_bound(mm1, xi_star, target, 1.0, n,
                                            "theta_n")
                   for n in (K // 2, K))
        vals.append(best)
    assert vals[0] < vals[1] < vals[2]  # no apparent ceiling


def test_lower_bound_validity_against_witnesses(wlan_decay):
    from meanfield_ldp.quasipotential import v_upper_bound
    xi = StateDistribution.from_weights(np.exp(-0.8 * np.arange(13)), 12)
    bound = v_upper_bound(wlan_decay, xi)
    T = bound.witness.duration
    cost = cost_nonvariational(wlan_decay, bound.witness)
    xi_star = find_equilibrium(wlan_decay, 12)
    for kind in ("linear_fn", "theta_n"):
        for n in (1, 3, 6, 12):
            lb = testfunction_lower_bound(wlan_decay, xi_star, xi, T, n, kind)
            assert lb <= cost + 1e-8


# -- theta-moment inequality -----------------------------------------------------------------

def test_moment_inequality_on_zero_cost_flow(wlan_const):
    nu = StateDistribution.from_weights(np.exp(-0.4 * np.arange(13)), 12)
    path = integrate(wlan_const, nu, 1.0, tol=1e-10, dt_max=0.01)
    rec = flux_from_path(wlan_const, path, refine=1)
    assert moment_inequality_check(wlan_const, rec)


def test_moment_inequality_on_constructions(wlan_decay):
    from meanfield_ldp.quasipotential import construct_delta0_to_target
    rng = np.random.default_rng(2)
    for _ in range(5):
        w = rng.dirichlet(np.ones(13) * 0.5)
        xi = StateDistribution(w, 12)
        traj = construct_delta0_to_target(wlan_decay, xi)
        assert moment_inequality_check(wlan_decay, traj)


def test_moment_inequality_is_informative(wlan_decay):
    """Contrapositive design check: a trajectory with a large terminal
    theta-moment cannot have near-zero cost, otherwise the inequality
    itself would fail."""
    from meanfield_ldp.quasipotential import construct_delta0_to_target
    xi = StateDistribution.delta(12, 12)
    traj = construct_delta0_to_target(wlan_decay, xi)
    th = theta_values(12)
    sup_theta = float(np.max(evolve(traj).probs @ th))
    fake_cost = 0.0
    rhs = 0.0 + fake_cost + 1e-9 + wlan_decay.lambda_upper * (math.e - 1.0) \
        * traj.duration
    assert sup_theta > rhs  # a zero-cost claim would be rejected


def test_moment_inequality_requires_reset_edges(mm1):
    traj = FluxTrajectory(StateDistribution.delta(0, 5),
                          (Segment(1.0, {(0, 1): 0.5}),), 5)
    with pytest.raises(ValueError):
        moment_inequality_check(mm1, traj)


# -- file format -------------------------------------------------------------------------------

def test_trajectory_roundtrip(tmp_path):
    init = StateDistribution.geometric(0.5, 7)
    traj = FluxTrajectory(init, (Segment(0.123456789012345, {(0, 1): 0.25}),
                                 Segment(1.0 / 3.0, {(3, 0): 1e-17})), 7)
    f = tmp_path / "traj.txt"
    save_trajectory(traj, f)
    back = load_trajectory(f)
    assert back.z_max == traj.z_max
    assert np.array_equal(back.initial.probs, traj.initial.probs)
    assert back.initial.tail_mass == traj.initial.tail_mass
    assert len(back.segments) == 2
    for s1, s2 in zip(back.segments, traj.segments):
        assert s1.duration == s2.duration
        assert dict(s1.fluxes) == dict(s2.fluxes)
