"""Mean-field limiting dynamics: integrate mu_dot = Lambda*_mu mu.

The limit ODE lives on the probability simplex over {0..z_max}.  The
integrator is a classic explicit 4th-order scheme with step doubling
for local error control; every accepted state is projected back onto
the simplex (clip-and-renormalise, with violations beyond 1e-12
aborting the step instead).  On the closed window the drift has zero
column sums, so total mass is conserved to rounding.

Also here: location of the globally attracting equilibrium by damped
fixed-point iteration on the frozen-field stationary law, a sampled
audit of the theta-moment convergence assumption, and the hitting time
of the equilibrium neighbourhood class.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .measures import (StateDistribution, in_class_KDelta, theta_moment,
                       theta_values)
from .models import RateModel, single_particle_stationary

_MIN_DT = 1e-12


class StiffnessError(RuntimeError):
    """Step size underflowed while controlling local error."""


class EquilibriumNotFoundError(RuntimeError):
    """Fixed-point iteration failed to reach the requested residual."""


@dataclass(frozen=True)
class MvePath:
    """Solution of the limiting dynamics sampled at accepted steps."""

    times: np.ndarray
    states: tuple[StateDistribution, ...]

    def __post_init__(self) -> None:
        t = np.asarray(self.times, dtype=float)
        object.__setattr__(self, "times", t)
        if t.ndim != 1 or t.shape[0] != len(self.states):
            raise ValueError("times and states must align")
        if t.shape[0] == 0 or t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise ValueError("times must strictly increase from 0")

    @property
    def final(self) -> StateDistribution:
        return self.states[-1]

    def as_grid(self) -> tuple[np.ndarray, np.ndarray]:
        return self.times, np.stack([s.probs for s in self.states])

    def state_at(self, t: float) -> StateDistribution:
        """Linear interpolation between sampled states."""
        times = self.times
        if t <= times[0]:
            return self.states[0]
        if t >= times[-1]:
            return self.states[-1]
        k = int(np.searchsorted(times, t) - 1)
        w = (t - times[k]) / (times[k + 1] - times[k])
        p = (1 - w) * self.states[k].probs + w * self.states[k + 1].probs
        return StateDistribution(p / p.sum(), self.states[0].z_max)


def _project_simplex_soft(p: np.ndarray) -> np.ndarray:
    if p.min() < -1e-12:
        raise FloatingPointError("negative excursion beyond tolerance")
    q = np.clip(p, 0.0, None)
    return q / q.sum()


def _rk4_step(drift: Callable[[np.ndarray], np.ndarray], p: np.ndarray,
              dt: float) -> np.ndarray:
    k1 = drift(p)
    k2 = drift(p + 0.5 * dt * k1)
    k3 = drift(p + 0.5 * dt * k2)
    k4 = drift(p + dt * k3)
    return p + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate(model: RateModel, nu: StateDistribution, T: float,
              tol: float = 1e-9, dt_max: float | None = None) -> MvePath:
    """Integrate the limiting dynamics from nu over [0, T].

    Local error is estimated by step doubling (one full step against
    two half steps) and kept below tol * dt; the step is halved until
    that holds and grown gently afterwards.  ``dt_max`` caps the node
    spacing for consumers that need a dense sampling (the cost
    evaluators see the piecewise-affine interpolant, whose own cost is
    second order in the spacing).  Raises :class:`StiffnessError` if
    dt underflows.
    """
    if T <= 0 or tol <= 0:
        raise ValueError("T and tol must be positive")
    drift = model.drift
    t, p = 0.0, nu.probs.copy()
    if nu.tail_mass > 0.0:
        # the flow lives on the closed window; fold tail mass back in
        p = p / p.sum()
        nu = StateDistribution(p.copy(), nu.z_max)
    times = [0.0]
    states = [nu]
    cap = dt_max if dt_max is not None else 0.25
    dt = min(0.1, cap, T)
    eps_T = 1e-12 * max(1.0, T)
    while T - t > eps_T:
        dt = min(dt, cap, T - t)
        while True:
            full = _rk4_step(drift, p, dt)
            half = _rk4_step(drift, _rk4_step(drift, p, dt / 2), dt / 2)
            err = float(np.abs(full - half).sum()) / 15.0
            if err < tol * dt:
                break
            dt *= 0.5
            if dt < _MIN_DT:
                raise StiffnessError(f"dt underflow at t={t!r}")
        try:
            p = _project_simplex_soft(half)
        except FloatingPointError:
            dt *= 0.5
            if dt < _MIN_DT:
                raise StiffnessError(f"projection failure at t={t!r}")
            continue
        t += dt
        times.append(t)
        states.append(StateDistribution(p, nu.z_max))
        if err < tol * dt / 32.0:
            dt *= 2.0
    times[-1] = T  # snap the sub-1e-12 terminal slack
    return MvePath(np.array(times), tuple(states))


# ---------------------------------------------------------------------------
# Equilibrium
# ---------------------------------------------------------------------------

def find_equilibrium(model: RateModel, z_max: int, tol: float = 1e-10,
                     initial: StateDistribution | None = None,
                     max_iters: int = 10000) -> StateDistribution:
    """Fixed point of the frozen-field stationary map, damped by 1/2.

    Iterates xi <- (1/2) xi + (1/2) stationary(frozen xi) until the
    stationarity residual ||Lambda*_xi xi||_1 drops below tol.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if not model.interacting:
        return single_particle_stationary(model, z_max)
    xi = initial or StateDistribution.delta(0, z_max)
    omega = 0.5
    for _ in range(max_iters):
        pi = single_particle_stationary(model, z_max, frozen_field=xi)
        mixed = (1 - omega) * xi.probs + omega * pi.probs
        xi = StateDistribution(mixed / mixed.sum(), z_max)
        resid = float(np.abs(model.drift(xi.probs)).sum())
        if resid < tol:
            return xi
    raise EquilibriumNotFoundError(
        f"no equilibrium at residual {tol!r} after {max_iters} iterations")


# ---------------------------------------------------------------------------
# Moment-convergence audit
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class B2Report:
    """Sampled audit of uniform theta-moment convergence.

    ``sup_gap[j]`` is the largest |<mu_nu(t_j), theta> - <xi*, theta>|
    over the sampled initial conditions at grid time t_j.  The verdict
    is 'consistent over the sampled initial conditions', never a proof.
    """

    grid: np.ndarray
    sup_gap: np.ndarray
    terminal_gap: float
    threshold: float
    passed: bool
    n_samples: int


def _sample_in_KM(rng: np.random.Generator, z_max: int, M: float) -> StateDistribution:
    """Random mixture of point masses thinned toward delta_0 until in K_M."""
    k = int(rng.integers(2, 6))
    support = rng.choice(z_max + 1, size=k, replace=False)
    w = rng.dirichlet(np.ones(k))
    p = np.zeros(z_max + 1)
    p[support] = w
    dist = StateDistribution(p, z_max)
    for _ in range(80):
        if theta_moment(dist) <= M:
            return dist
        p = 0.5 * p
        p[0] += 1.0 - p.sum()
        dist = StateDistribution(p, z_max)
    return StateDistribution.delta(0, z_max)


def check_B2(model: RateModel, M: float, horizon: float, n_samples: int,
             seed: int, z_max: int = 40, threshold: float = 1e-3,
             n_grid: int = 20, threads: int | None = None) -> B2Report:
    """Integrate from sampled initial conditions in K_M and track the
    theta-moment gap to the equilibrium on a uniform grid."""
    if M <= 0:
        raise ValueError("M must be positive")
    xi_star = find_equilibrium(model, z_max)
    target = theta_moment(xi_star)
    grid = np.linspace(0.0, horizon, n_grid + 1)
    theta_w = theta_values(z_max)

    initials: list[StateDistribution] = []
    if theta_moment(xi_star) <= M:
        initials.append(xi_star)
    for j in range(n_samples - len(initials)):
        sub = np.random.default_rng([seed, j])
        initials.append(_sample_in_KM(sub, z_max, M))

    def one(nu: StateDistribution) -> np.ndarray:
        path = integrate(model, nu, horizon, tol=1e-9)
        return np.array([abs(float(path.state_at(t).probs @ theta_w) - target)
                         for t in grid])

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            gaps = list(ex.map(one, initials))
    else:
        gaps = [one(nu) for nu in initials]
    sup_gap = np.max(np.stack(gaps), axis=0)
    terminal = float(sup_gap[-1])
    return B2Report(grid, sup_gap, terminal, threshold,
                    terminal < threshold, len(initials))


def monotone_convergence_diagnostic(model: RateModel, nu: StateDistribution,
                                    horizon: float,
                                    settle_fraction: float = 0.2) -> bool:
    """Whether tv(mu_nu(t), xi*) is decreasing after an initial settle
    window.  A diagnostic to report, not a property to assert: the flow
    can approach the equilibrium non-monotonically in TV.
    """
    xi_star = find_equilibrium(model, nu.z_max)
    path = integrate(model, nu, horizon, tol=1e-9)
    from .measures import tv_distance
    dists = [tv_distance(s, xi_star) for s in path.states]
    start = int(settle_fraction * len(dists))
    tail = dists[start:]
    return all(a >= b - 1e-12 for a, b in zip(tail, tail[1:]))


def time_to_KDelta(model: RateModel, nu: StateDistribution, delta: float,
                   horizon: float | None = None) -> float:
    """First sampled time at which the flow enters K(delta); inf if missed."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    z_max = nu.z_max
    xi_star = find_equilibrium(model, z_max)
    if in_class_KDelta(nu, xi_star, delta):
        return 0.0
    if horizon is None:
        horizon = 10.0 / model.lambda_lower
    path = integrate(model, nu, horizon, tol=1e-9)
    for t, state in zip(path.times, path.states):
        if in_class_KDelta(state, xi_star, delta):
            return float(t)
    return math.inf


# ---------------------------------------------------------------------------
# CSV export: long format t,z,prob
# ---------------------------------------------------------------------------

def save_path_csv(path: MvePath, out: str | Path) -> None:
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "z", "prob"])
        for t, s in zip(path.times, path.states):
            for z in range(s.z_max + 1):
                w.writerow([format(float(t), ".17g"), z,
                            format(float(s.probs[z]), ".17g")])
