import math

import numpy as np
import pytest

from meanfield_ldp.measures import StateDistribution, theta_values, tv_distance
from meanfield_ldp.mckean_vlasov import find_equilibrium
from meanfield_ldp.models import dominating_chain, single_particle_stationary
from meanfield_ldp.simulator import (BallEvent, NotInKMEvent,
                                     ParticleSystemState, SimConfig,
                                     TruncationOverflowError, WholeSpaceEvent,
                                     burn_in_diagnostic, estimate_invariant,
                                     estimate_rate_curve, gillespie_step,
                                     sample_iid_stationary, save_counts_path,
                                     save_rate_estimates, simulate_path,
                                     substream)


def test_single_enabled_transition(mm1):
    state = ParticleSystemState.all_at_zero(1, 10)
    rng = substream(0, 0)
    nxt, dt = gillespie_step(mm1, state, rng)
    assert dt > 0
    assert nxt.counts[1] == 1 and nxt.counts[0] == 0


def test_two_particles_at_zero(wlan_const):
    state = ParticleSystemState.all_at_zero(2, 10)
    rng = substream(0, 1)
    nxt, _ = gillespie_step(wlan_const, state, rng)
    assert nxt.counts[0] == 1 and nxt.counts[1] == 1


def test_counts_invariant_preserved(interacting):
    state = ParticleSystemState.all_at_zero(20, 15)
    rng = substream(3, 0)
    for _ in range(2000):
        state, _ = gillespie_step(interacting, state, rng)
        assert int(state.counts.sum()) == 20
        assert state.counts.min() >= 0


def test_edge_selection_frequencies(mm1):
    """Chi-square check of edge choice against rate proportions from a
    fixed state (3 sigma multinomial bounds)."""
    counts = np.zeros(11, dtype=np.int64)
    counts[0] = 3
    counts[1] = 2
    state = ParticleSystemState(counts, 5)
    rng = substream(7, 0)
    hits = {}
    n = 100_000
    for _ in range(n):
        nxt, _ = gillespie_step(mm1, state, rng)
        delta = nxt.counts - state.counts
        src = int(np.where(delta == -1)[0][0])
        dst = int(np.where(delta == 1)[0][0])
        hits[(src, dst)] = hits.get((src, dst), 0) + 1
    # rates: (0,1): 3*1, (1,2): 2*1, (1,0): 2*2
    total = 3.0 + 2.0 + 4.0
    expected = {(0, 1): 3 / total, (1, 2): 2 / total, (1, 0): 4 / total}
    for edge, p in expected.items():
        sd = math.sqrt(n * p * (1 - p))
        assert abs(hits[edge] - n * p) < 3.0 * sd


def test_seed_reproducibility(interacting):
    cfg = SimConfig(N=20, seed=5, horizon=10.0, burn_in=1.0, z_max=15)
    t1, c1 = simulate_path(interacting, cfg)
    t2, c2 = simulate_path(interacting, cfg)
    assert np.array_equal(t1, t2)
    assert np.array_equal(c1, c2)


def test_total_mass_at_every_sample(mm1):
    cfg = SimConfig(N=50, seed=1, horizon=20.0, burn_in=0.5, z_max=25)
    _, counts = simulate_path(mm1, cfg)
    assert np.all(counts.sum(axis=1) == 50)


def test_mean_state0_occupancy_mm1(mm1):
    """Long-run average occupancy of state 0 versus the closed form."""
    cfg = SimConfig(N=50, seed=11, horizon=400.0, burn_in=20.0, z_max=25)
    est = estimate_invariant(mm1, cfg, BallEvent(
        StateDistribution.delta(0, 25), 2.0), "whole")  # radius 2: everything
    assert est.p_hat == 1.0
    times, counts = simulate_path(mm1, cfg)
    keep = times >= 20.0
    frac0 = counts[keep, 0].mean() / 50
    assert abs(frac0 - 0.5) < 0.03


def test_whole_space_event(interacting):
    cfg = SimConfig(N=10, seed=2, horizon=30.0, burn_in=1.0, z_max=15)
    est = estimate_invariant(interacting, cfg, WholeSpaceEvent())
    assert est.p_hat == 1.0
    assert est.rate == 0.0


def test_zero_occupancy_lower_bound_only(interacting):
    cfg = SimConfig(N=30, seed=2, horizon=30.0, burn_in=1.0, z_max=15)
    est = estimate_invariant(interacting, cfg, NotInKMEvent(6.0, 15))
    assert est.lower_bound_only
    assert est.p_hat == 0.0
    assert est.rate > 0.0


def test_truncation_overflow_aborts(interacting):
    counts = np.zeros(13, dtype=np.int64)
    counts[12] = 1
    counts[0] = 9
    state = ParticleSystemState(counts, 10)
    with pytest.raises(TruncationOverflowError):
        gillespie_step(interacting, state, substream(0, 0))


# -- exact i.i.d. stationary sampling ----------------------------------------------

def test_iid_counts_sum(mm1):
    state = sample_iid_stationary(mm1, 64, substream(0, 0), z_max=30)
    assert int(state.counts.sum()) == 64


def test_iid_rejects_interacting(interacting):
    with pytest.raises(ValueError):
        sample_iid_stationary(interacting, 10, substream(0, 0))


def test_iid_single_particle_marginal(mm1):
    """Chi-square of N=1 draws against the stationary law."""
    pi = single_particle_stationary(mm1, 30)
    rng = substream(9, 0)
    n = 100_000
    hits = np.zeros(31)
    for _ in range(n):
        hits += sample_iid_stationary(mm1, 1, rng, 30).counts
    keep = pi.probs * n >= 10
    chi2 = float(np.sum((hits[keep] - n * pi.probs[keep]) ** 2
                        / (n * pi.probs[keep])))
    # dof ~ 12; 99.9% quantile ~ 32
    assert chi2 < 40.0


def test_iid_mean_matches_stationary(mm1):
    pi = single_particle_stationary(mm1, 30)
    rng = substream(4, 0)
    acc = np.zeros(31)
    m = 4000
    for _ in range(m):
        acc += sample_iid_stationary(mm1, 50, rng, 30).counts / 50
    assert tv_distance(StateDistribution(acc / m, 30), pi) < 0.01


# -- rate curves -----------------------------------------------------------------------

def test_rate_curve_probability_one_event(mm1):
    rows = estimate_rate_curve(mm1, WholeSpaceEvent(), [10, 20], 2000, seed=0)
    for r in rows:
        assert r.p_hat == 1.0
        assert r.rate == 0.0


def test_rate_curve_matches_sanov_at_small_N(mm1):
    """Feasible-scale check of the Sanov recovery: at N = 20 the ball
    event has probability ~2e-4 and plain Monte Carlo resolves it."""
    from meanfield_ldp.measures import sanov_inf_over_ball
    event = BallEvent(StateDistribution.delta(0, 30), 0.1)
    rows = estimate_rate_curve(mm1, event, [20], 400_000, seed=3, z_max=30)
    r = rows[0]
    assert not r.lower_bound_only
    target = sanov_inf_over_ball(single_particle_stationary(mm1, 30),
                                 StateDistribution.delta(0, 30), 0.1, 30)
    assert abs(r.rate - target) / target < 0.25


def test_rate_curve_zero_hits_reported_lower_bound(mm1):
    event = BallEvent(StateDistribution.delta(0, 30), 0.1)
    rows = estimate_rate_curve(mm1, event, [200], 2000, seed=3, z_max=30)
    assert rows[0].lower_bound_only


def test_rate_curve_threaded_deterministic(mm1):
    event = BallEvent(StateDistribution.delta(0, 30), 0.3)
    a = estimate_rate_curve(mm1, event, [20, 30, 40], 20_000, seed=5,
                            threads=1)
    b = estimate_rate_curve(mm1, event, [20, 30, 40], 20_000, seed=5,
                            threads=3)
    assert [r.p_hat for r in a] == [r.p_hat for r in b]


# -- dominating-chain stochastic domination audit -------------------------------------------

def test_dominating_chain_theta_domination(interacting):
    """Empirical theta-moments under the model are stochastically
    dominated by those under the dominating chain (one-sided CDF
    comparison with a 99% DKW band)."""
    dom = dominating_chain(interacting)
    rng = substream(21, 0)
    n_dom = 2000
    theta = theta_values(20)
    dom_samples = np.array([
        sample_iid_stationary(dom, 40, rng, 20).counts @ theta / 40
        for _ in range(n_dom)])
    cfg = SimConfig(N=40, seed=22, horizon=420.0, burn_in=20.0, z_max=20,
                    thinning=1.0)
    times, counts = simulate_path(interacting, cfg)
    keep = times >= cfg.burn_in
    model_samples = (counts[keep] @ theta) / 40
    eps = 1.63 / math.sqrt(n_dom) + 1.63 / math.sqrt(model_samples.size)
    grid = np.quantile(dom_samples, np.linspace(0.05, 0.95, 19))
    for x in grid:
        f_model = float((model_samples <= x).mean())
        f_dom = float((dom_samples <= x).mean())
        assert f_model >= f_dom - eps


def test_gillespie_occupation_matches_iid_sampling(mm1):
    """Long-run per-state occupation frequencies agree with exact
    i.i.d. stationary sampling within merged confidence bands."""
    z_max = 25
    N = 40
    cfg = SimConfig(N=N, seed=13, horizon=600.0, burn_in=30.0, z_max=z_max,
                    thinning=1.0)
    times, counts = simulate_path(mm1, cfg)
    keep = times >= cfg.burn_in
    occ = counts[keep].mean(axis=0) / N
    rng = substream(14, 0)
    m = 2000
    acc = np.zeros(z_max + 1)
    for _ in range(m):
        acc += sample_iid_stationary(mm1, N, rng, z_max).counts / N
    iid = acc / m
    for z in range(6):  # states carrying the bulk of the mass
        band = 3.0 * math.sqrt(iid[z] * (1 - iid[z]) / m) + 0.02
        assert abs(occ[z] - iid[z]) < band


def test_burn_in_diagnostic_small_at_stationarity(interacting):
    cfg = SimConfig(N=30, seed=8, horizon=300.0, burn_in=20.0, z_max=20)
    xi_star = find_equilibrium(interacting, 20)
    gap = burn_in_diagnostic(interacting, cfg, BallEvent(xi_star, 0.12))
    assert gap < 0.15  # first/second half occupation agreement


# -- output format ----------------------------------------------------------------------------

def test_rate_estimate_csv(tmp_path, mm1):
    rows = estimate_rate_curve(mm1, WholeSpaceEvent(), [10], 100, seed=0)
    f = tmp_path / "rates.csv"
    save_rate_estimates(rows, f)
    lines = f.read_text().splitlines()
    assert lines[0] == "N,event,p_hat,ci_low,ci_high,rate,seed,algorithm"
    assert lines[1].startswith("10,whole_space,1,")
    assert lines[1].endswith("philox4x64")


def test_counts_path_csv(tmp_path, mm1):
    cfg = SimConfig(N=10, seed=0, horizon=2.0, burn_in=0.5, z_max=5,
                    thinning=1.0)
    times, counts = simulate_path(mm1, cfg)
    f = tmp_path / "path.csv"
    save_counts_path(times, counts, 10, f, replica=3)
    lines = f.read_text().splitlines()
    assert lines[0] == "t,z,prob,replica"
    assert lines[1].endswith(",3")
    assert len(lines) == 1 + 6 * len(times)
