"""Constructive quasipotential bounds.

The quasipotential V(xi) is the cheapest cost of reaching xi from the
equilibrium over any finite horizon.  Nothing here computes V exactly:
upper bounds come from explicit piecewise unit-velocity mass-transfer
plans (optionally polished by a local mass-preserving refinement), and
lower bounds come solely from the test-function inequalities in
:mod:`meanfield_ldp.cost`.

The two basic plans, both on the reset edge set:

  * staircase up: for each occupied state z (taken from the top down),
    carry the mass xi(z) from state 0 up to z through z unit-velocity
    steps of duration xi(z) each; total duration sum_z z*xi(z);

  * sweep down: for each z >= 1 move the mass xi*(z) straight to 0
    along the reset edge at unit velocity.

Gluing sweep-down and staircase-up connects the equilibrium to any
window distribution, with cost below the explicit per-target bound
:func:`cm_bound`.  The five-phase ``connector`` rearranges one
distribution into a nearby one at cost on the order of
eps * log(1/eps) in the tail discrepancy eps, which is what makes
small perturbations of the equilibrium cheap.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .cost import (FluxTrajectory, Segment, concatenate, cost_nonvariational,
                   evolve, flux_from_path, testfunction_lower_bound)
from .measures import (StateDistribution, TailProfile, in_class_KDelta,
                       relative_entropy, theta_moment, theta_values,
                       tv_distance)
from .mckean_vlasov import find_equilibrium, integrate
from .models import EdgeKind, RateModel

_E = math.e
_MASS_FLOOR = 1e-15


class PhaseOrderingError(RuntimeError):
    """Connector phases would drive an intermediate mass negative."""


class UndecidableTailError(ValueError):
    """Finiteness predicate asked about an undeclared tail profile."""


def _require_reset_model(model: RateModel) -> None:
    if model.kind is not EdgeKind.CHAIN_WITH_RESETS:
        raise ValueError("construction requires the reset edge set")


# ---------------------------------------------------------------------------
# Elementary plans
# ---------------------------------------------------------------------------

def _staircase_up(z: int, mass: float) -> list[Segment]:
    """Carry ``mass`` from state 0 to state z in z unit-velocity steps."""
    return [Segment(mass, {(k - 1, k): 1.0}) for k in range(1, z + 1)]


def construct_delta0_to_target(model: RateModel,
                               xi: StateDistribution) -> FluxTrajectory:
    """Plan from the point mass at 0 to xi: staircase each xi(z) up,
    top state first; duration sum_z z*xi(z)."""
    _require_reset_model(model)
    segs: list[Segment] = []
    for z in range(xi.z_max, 0, -1):
        m = float(xi.probs[z])
        if m > _MASS_FLOOR:
            segs.extend(_staircase_up(z, m))
    return FluxTrajectory(StateDistribution.delta(0, xi.z_max), tuple(segs),
                          xi.z_max)


def construct_equilibrium_to_delta0(model: RateModel,
                                    xi_star: StateDistribution) -> FluxTrajectory:
    """Plan from xi_star to the point mass at 0: sweep each state's mass
    down the reset edge at unit velocity; duration sum_{z>=1} xi*(z)."""
    _require_reset_model(model)
    segs = [Segment(float(xi_star.probs[z]), {(z, 0): 1.0})
            for z in range(1, xi_star.z_max + 1)
            if xi_star.probs[z] > _MASS_FLOOR]
    return FluxTrajectory(xi_star, tuple(segs), xi_star.z_max)


def choose_z0(to: StateDistribution, tol: float = 1e-6) -> int:
    """Smallest z0 whose tail theta-mass above z0 is below 0.1 * tol."""
    th = theta_values(to.z_max)
    tail = np.cumsum((th * to.probs)[::-1])[::-1]
    for z0 in range(to.z_max + 1):
        above = tail[z0 + 1] if z0 + 1 <= to.z_max else 0.0
        if above < 0.1 * tol:
            return z0
    return to.z_max


def connector(model: RateModel, from_: StateDistribution,
              to: StateDistribution, z0: int) -> FluxTrajectory:
    """Five-phase rearrangement of ``from_`` into ``to``.

    Phases: sweep the tail above z0 to state 0; top up the state-0
    reservoir from {1..z0} if the target tail mass eps exceeds it;
    carry eps up to z0+1; distribute it along the tail to match the
    target above z0; finally reconcile states {1..z0} through state 0.
    Terminal state matches ``to`` within 1e-10.
    """
    _require_reset_model(model)
    if from_.z_max != to.z_max:
        raise ValueError("windows differ")
    z_max = from_.z_max
    if tv_distance(from_, to) == 0.0:
        return FluxTrajectory(from_, (), z_max)
    segs: list[Segment] = []
    cur = from_.probs.copy()

    def move_to_zero(z: int, m: float) -> None:
        if m > _MASS_FLOOR:
            segs.append(Segment(m, {(z, 0): 1.0}))
            cur[z] -= m
            cur[0] += m

    # phase 0: clear everything above z0
    for z in range(z0 + 1, z_max + 1):
        move_to_zero(z, float(cur[z]))

    eps = float(to.probs[z0 + 1:].sum()) if z0 < z_max else 0.0
    if eps > _MASS_FLOOR and z0 + 1 > z_max:
        raise PhaseOrderingError("target tail mass with no room above z0")

    # phase 1: make sure state 0 holds at least eps
    deficit = eps - float(cur[0])
    for z in range(z0, 0, -1):
        if deficit <= _MASS_FLOOR:
            break
        m = min(float(cur[z]), deficit)
        move_to_zero(z, m)
        deficit -= m
    if eps - float(cur[0]) > 1e-12:
        raise PhaseOrderingError("cannot assemble carry mass at state 0")

    # phase 2: carry eps up to z0+1
    if eps > _MASS_FLOOR:
        for k in range(1, z0 + 2):
            segs.append(Segment(eps, {(k - 1, k): 1.0}))
        cur[0] -= eps
        cur[z0 + 1] += eps

    # phase 3: distribute along the tail, top state first
    for z in range(z_max, z0 + 1, -1):
        m = float(to.probs[z])
        if m > _MASS_FLOOR:
            for k in range(z0 + 2, z + 1):
                segs.append(Segment(m, {(k - 1, k): 1.0}))
            cur[z0 + 1] -= m
            cur[z] += m
            if cur[z0 + 1] < -1e-12:
                raise PhaseOrderingError("tail distribution overdrew the carry mass")

    # phase 4: reconcile {1..z0}: surpluses down first, then deficits up
    for z in range(1, z0 + 1):
        surplus = float(cur[z] - to.probs[z])
        if surplus > _MASS_FLOOR:
            move_to_zero(z, surplus)
    for z in range(1, z0 + 1):
        deficit = float(to.probs[z] - cur[z])
        if deficit > _MASS_FLOOR:
            for k in range(1, z + 1):
                segs.append(Segment(deficit, {(k - 1, k): 1.0}))
            cur[0] -= deficit
            cur[z] += deficit
            if cur[0] < -1e-12:
                raise PhaseOrderingError("state-0 reservoir exhausted (z0 too small)")

    traj = FluxTrajectory(from_, tuple(segs), z_max)
    end = evolve(traj).final_distribution()
    if tv_distance(end, to.retruncate(z_max)) > 1e-10:
        raise PhaseOrderingError("connector endpoint misses the target")
    return traj


def descend_to_equilibrium(model: RateModel, nu: StateDistribution,
                           delta: float) -> FluxTrajectory:
    """Ride the limiting flow into K(delta), then connect into xi_star.

    The flow leg is realised as a flux plan recovered from the sampled
    flow (near-zero cost, integration bias below 1e-6); the final leg
    is a connector, so the total cost is dominated by the connector
    term at radius delta.
    """
    _require_reset_model(model)
    z_max = nu.z_max
    xi_star = find_equilibrium(model, z_max)
    if in_class_KDelta(nu, xi_star, delta):
        return connector(model, nu, xi_star, choose_z0(xi_star))
    horizon = 10.0 / model.lambda_lower
    path = integrate(model, nu, horizon, tol=1e-10)
    hit = None
    for t, s in zip(path.times, path.states):
        if t > 0 and in_class_KDelta(s, xi_star, delta):
            hit = t
            break
    if hit is None:
        raise PhaseOrderingError(
            f"flow did not reach K({delta}) within horizon {horizon}")
    kt = int(np.searchsorted(path.times, hit))
    flow = flux_from_path(model, (path.times[: kt + 1],
                                  np.stack([s.probs for s in path.states[: kt + 1]])))
    entry = evolve(flow).final_distribution()
    tail = connector(model, entry, xi_star, choose_z0(xi_star))
    return concatenate(flow, tail)


# ---------------------------------------------------------------------------
# Upper bounds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VBound:
    """Two-sided information about V at one target."""

    target: StateDistribution
    upper: float
    lower: float
    witness: FluxTrajectory
    lower_params: tuple[float, int, str]  # (T, n, kind)

    def __post_init__(self) -> None:
        if math.isfinite(self.upper) and math.isfinite(self.lower):
            if self.lower > self.upper + 1e-8:
                raise ValueError("lower bound exceeds upper bound")


def _refine_witness(model: RateModel, traj: FluxTrajectory,
                    rounds: int = 200, seed: int = 7) -> FluxTrajectory:
    """Mass-preserving coordinate descent on (duration, flux) pairs.

    Each move rescales one segment's duration by (1+eta) and every flux
    in it by 1/(1+eta): the transferred mass and hence all endpoint
    states are unchanged, so feasibility is preserved and only that
    segment's cost moves.  Accept on decrease.
    """
    if not traj.segments:
        return traj
    rng = np.random.default_rng(seed)
    segs = list(traj.segments)
    path = evolve(traj)
    z_max = traj.z_max

    from .cost import _freeze_pieces, _segment_cost

    def seg_cost(k: int, seg: Segment) -> float:
        pieces = _freeze_pieces(model, seg.fluxes, path.probs[k],
                                path.probs[k + 1], seg.duration, 1e-7)
        return _segment_cost(model, seg.fluxes, path.probs[k],
                             path.probs[k + 1], seg.duration, z_max, pieces)

    costs = [seg_cost(k, s) for k, s in enumerate(segs)]
    for _ in range(rounds):
        k = int(rng.integers(len(segs)))
        eta = float(rng.choice([0.25, 0.1, -0.2, -0.0909090909090909]))
        scale = 1.0 + eta
        cand = Segment(segs[k].duration * scale,
                       {e: f / scale for e, f in segs[k].fluxes.items()})
        c = seg_cost(k, cand)
        if c < costs[k] - 1e-15:
            segs[k] = cand
            costs[k] = c
    return FluxTrajectory(traj.initial, tuple(segs), z_max)


def v_upper_bound(model: RateModel, xi: StateDistribution,
                  refine: bool = False, z_max: int | None = None,
                  lower_T: float | None = None) -> VBound:
    """Constructive upper bound on V(xi) with a witness trajectory.

    Candidates: the glued sweep-down ++ staircase-up plan through
    delta_0, and the direct connector from the equilibrium (cheap for
    targets near the equilibrium).  The cheaper feasible witness wins;
    optional refinement never increases the bound.  The lower field is
    the best test-function bound at the witness horizon.
    """
    _require_reset_model(model)
    z_max = xi.z_max if z_max is None else z_max
    xi = xi.retruncate(z_max)
    xi_star = find_equilibrium(model, z_max)

    candidates: list[FluxTrajectory] = []
    glued = concatenate(construct_equilibrium_to_delta0(model, xi_star),
                        construct_delta0_to_target(model, xi))
    candidates.append(glued)
    try:
        candidates.append(connector(model, xi_star, xi, choose_z0(xi)))
    except PhaseOrderingError:
        pass

    best = min(candidates, key=lambda t: cost_nonvariational(model, t))
    upper = cost_nonvariational(model, best)
    if refine:
        polished = _refine_witness(model, best)
        polished_cost = cost_nonvariational(model, polished)
        if polished_cost < upper:
            best, upper = polished, polished_cost

    T = lower_T if lower_T is not None else max(best.duration, 1e-6)
    lower, params = -math.inf, (T, 1, "linear_fn")
    for kind in ("linear_fn", "theta_n"):
        for n in (1, 2, 4, 8, 16, min(32, z_max), z_max):
            if n < 1:
                continue
            lb = testfunction_lower_bound(model, xi_star, xi, T, n, kind)
            if lb > lower:
                lower, params = lb, (T, n, kind)
    return VBound(xi, upper, lower, best, params)


def cm_bound(model: RateModel, xi: StateDistribution) -> float:
    """Explicit per-target bound dominating the glued-plan cost.

    Staircase-up leg:
        1/e + 3 sum_z (log z / z^2 + theta(z) xi(z))
            + sum_z [ (z log z + z) xi(z)
                      + z xi(z) (log(1/lambda_lower) + 2 lambda_upper) ]
            + 2 lambda_upper sum_z z xi(z)
    plus the sweep-down leg
        sum_{z>=1} xi*(z) [ log(1/xi*(z)) + log(1/lambda_lower)
                            + 2 lambda_upper ].
    """
    _require_reset_model(model)
    lam_lo, lam_up = model.lambda_lower, model.lambda_upper
    z = np.arange(xi.z_max + 1, dtype=float)
    th = theta_values(xi.z_max)
    p = xi.probs
    logz_over_z2 = np.zeros_like(z)
    logz_over_z2[2:] = np.log(z[2:]) / z[2:] ** 2
    leg_up = (1.0 / _E
              + 3.0 * float(logz_over_z2.sum() + th @ p)
              + float((th + z) @ p)
              + float((z * p).sum()) * (math.log(1.0 / lam_lo) + 2.0 * lam_up)
              + 2.0 * lam_up * float((z * p).sum()))
    xi_star = find_equilibrium(model, xi.z_max)
    q = xi_star.probs[1:]
    pos = q > 0
    leg_down = float(np.sum(q[pos] * (-np.log(q[pos])
                                      + math.log(1.0 / lam_lo) + 2.0 * lam_up)))
    return leg_up + leg_down


# ---------------------------------------------------------------------------
# Finiteness
# ---------------------------------------------------------------------------

def v_finiteness_predicate(model: RateModel,
                           xi: StateDistribution | TailProfile) -> str:
    """'finite' iff the declared tail keeps the theta-moment finite.

    Distributions must either have no tail mass (point/window support)
    or carry a declared analytic tail profile; otherwise the question
    is undecidable from the data and an error is raised.
    """
    _require_reset_model(model)
    if isinstance(xi, TailProfile):
        return "finite" if xi.theta_moment_finite() else "infinite"
    if xi.tail_mass <= 1e-15:
        return "finite"
    if xi.tail_profile is None:
        raise UndecidableTailError("tail mass without a declared profile")
    return "finite" if xi.tail_profile.theta_moment_finite() else "infinite"


# ---------------------------------------------------------------------------
# Counterexample report
# ---------------------------------------------------------------------------

def heavy_tail_target(K: int) -> StateDistribution:
    """xi(z) proportional to 1/(z^2 log^2 z) on {2..K}, normalised."""
    if K < 3:
        raise ValueError("K must be at least 3")
    z = np.arange(K + 1, dtype=float)
    w = np.zeros(K + 1)
    w[2:] = 1.0 / (z[2:] ** 2 * np.log(z[2:]) ** 2)
    return StateDistribution.from_weights(w, K)


@dataclass(frozen=True)
class CounterexampleRow:
    K: int
    entropy: float
    theta_moment: float
    lb_linear: float
    lb_theta: float
    best_n: int


@dataclass(frozen=True)
class CounterexampleReport:
    model_name: str
    T: float
    rows: tuple[CounterexampleRow, ...]
    divergence_ratio: float  # theta-moment ratio, largest over smallest K


def counterexample_report(model: RateModel, K_list: Sequence[int],
                          T: float = 1.0) -> CounterexampleReport:
    """Entropy-versus-lower-bound table over the truncation family.

    For each K the target is the normalised 1/(z^2 log^2 z) law
    truncated at K; the relative entropy to the stationary law
    stabilises in K while the theta-moment (and with it the
    theta-tent lower bound on horizon-T costs) keeps growing.
    """
    if model.interacting:
        raise ValueError("counterexamples are the non-interacting systems")
    if model.name not in ("mm1", "wlan_const"):
        raise ValueError("counterexample models are mm1 and wlan_const")
    from .models import single_particle_stationary

    rows: list[CounterexampleRow] = []
    for K in K_list:
        target = heavy_tail_target(K)
        xi_star = single_particle_stationary(model, K)
        ent = relative_entropy(target, xi_star)
        lb_lin = -math.inf
        lb_th, best_n = -math.inf, 1
        n_grid = sorted(set(list(range(1, min(K, 16) + 1))
                            + [K // 8, K // 4, K // 2, 3 * K // 4, K]))
        for n in n_grid:
            if n < 1:
                continue
            lb_lin = max(lb_lin, testfunction_lower_bound(
                model, xi_star, target, T, n, "linear_fn"))
            v = testfunction_lower_bound(model, xi_star, target, T, n, "theta_n")
            if v > lb_th:
                lb_th, best_n = v, n
        rows.append(CounterexampleRow(K, ent, theta_moment(target),
                                      lb_lin, lb_th, best_n))
    ratio = rows[-1].theta_moment / rows[0].theta_moment
    return CounterexampleReport(model.name, T, tuple(rows), ratio)


# ---------------------------------------------------------------------------
# VBound export
# ---------------------------------------------------------------------------

def save_trajectory_and_bound(bound: VBound, out_dir: str | Path,
                              target_file: str, witness_file: str,
                              bound_file: str) -> None:
    """Write the target distribution, the witness plan, and the bound."""
    from .cost import save_trajectory
    from .measures import save_distribution_csv

    out = Path(out_dir)
    save_distribution_csv(bound.target, out / target_file)
    save_trajectory(bound.witness, out / witness_file)
    save_vbound(bound, out / bound_file, target_file, witness_file)


def save_vbound(bound: VBound, path: str | Path, target_file: str,
                witness_file: str) -> None:
    payload = {
        "target_file": target_file,
        "upper": bound.upper,
        "upper_note": "upper bound (unverified gap)",
        "lower": bound.lower,
        "witness_file": witness_file,
        "lower_params": {"T": bound.lower_params[0],
                         "n": bound.lower_params[1],
                         "kind": bound.lower_params[2]},
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
