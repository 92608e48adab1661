"""Transition-rate models on the nonnegative integers.

Two edge-set shapes cover everything built here:

  * ``BIRTH_DEATH``        -- forward edges (z, z+1) and backward edges
                              (z, z-1) for z >= 1 (queue-like),
  * ``CHAIN_WITH_RESETS``  -- forward edges (z, z+1) and reset edges
                              (z, 0) for z >= 1 (backoff-like).

A ``RateModel`` bundles the edge shape with a rate evaluator
lambda(z, z', xi) that may depend on the current empirical measure xi,
plus declared envelope constants lambda_lower / lambda_upper.  The
decay condition checked by :func:`verify_A2` is

    lambda_lower/(z+1) <= rate(z, z+1, xi) <= lambda_upper/(z+1)
    lambda_lower       <= rate(z, 0,   xi) <= lambda_upper

Rate evaluators must be pure functions; RateModel values are immutable
and shareable across threads.  The forward rate out of the truncation
level z_max is taken to be zero in every module (reflecting closure),
which conserves probability; the induced error is controlled by
tail-mass diagnostics.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .measures import StateDistribution, tv_distance


class EdgeKind(Enum):
    CHAIN_WITH_RESETS = "chain_with_resets"
    BIRTH_DEATH = "birth_death"


class EdgeNotPresentError(ValueError):
    """Rate requested along an edge that is not in the edge set."""


class InstabilityError(ValueError):
    """No stationary law exists for the requested parameters."""


class MissingBoundsError(ValueError):
    """Operation requires declared rate envelope constants."""


RateFn = Callable[[int, int, np.ndarray], float]


@dataclass(frozen=True)
class RateModel:
    """Edge set plus rate evaluator with declared envelope constants.

    ``forward``/``backward`` evaluate one edge; the optional vectorised
    ``forward_profile``/``backward_profile`` map a state array to the
    rate array in one call (hot loops use them when present).
    """

    kind: EdgeKind
    forward: Callable[[int, np.ndarray], float]
    backward: Callable[[int, np.ndarray], float]
    lambda_upper: float
    lambda_lower: float
    interacting: bool
    name: str
    params: dict = field(default_factory=dict)
    forward_profile: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    backward_profile: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None

    # -- edge bookkeeping ----------------------------------------------------

    def backward_target(self, z: int) -> int:
        return 0 if self.kind is EdgeKind.CHAIN_WITH_RESETS else z - 1

    def has_edge(self, z: int, z_prime: int) -> bool:
        if z_prime == z + 1 and z >= 0:
            return True
        return z >= 1 and z_prime == self.backward_target(z)

    def edges(self, z_max: int) -> list[tuple[int, int]]:
        """All edges inside the window; the forward edge out of z_max is dropped."""
        es = [(z, z + 1) for z in range(z_max)]
        es += [(z, self.backward_target(z)) for z in range(1, z_max + 1)]
        return es

    def rate(self, z: int, z_prime: int, xi: StateDistribution | np.ndarray | None = None) -> float:
        probs = self._probs(xi)
        if not self.has_edge(z, z_prime):
            raise EdgeNotPresentError(f"no edge ({z},{z_prime}) in {self.kind.value}")
        if z_prime == z + 1:
            return self.forward(z, probs)
        return self.backward(z, probs)

    def _probs(self, xi) -> np.ndarray:
        if xi is None:
            if self.interacting:
                raise ValueError("interacting model needs the mean field xi")
            return np.zeros(1)
        if isinstance(xi, StateDistribution):
            return xi.probs
        return np.asarray(xi, dtype=float)

    # -- vectorised rate tables ----------------------------------------------

    def forward_rates(self, z_max: int, xi=None) -> np.ndarray:
        """Forward rates for z = 0..z_max with the boundary rate zeroed."""
        probs = self._probs(xi)
        if self.forward_profile is not None:
            out = np.asarray(self.forward_profile(np.arange(z_max + 1), probs),
                             dtype=float).copy()
        else:
            out = np.array([self.forward(z, probs) for z in range(z_max + 1)])
        out[z_max] = 0.0
        return out

    def backward_rates(self, z_max: int, xi=None) -> np.ndarray:
        """Backward/reset rates for z = 0..z_max (entry 0 is zero)."""
        probs = self._probs(xi)
        if self.backward_profile is not None:
            out = np.asarray(self.backward_profile(np.arange(z_max + 1), probs),
                             dtype=float).copy()
        else:
            out = np.zeros(z_max + 1)
            for z in range(1, z_max + 1):
                out[z] = self.backward(z, probs)
        out[0] = 0.0
        return out

    def generator(self, z_max: int, xi=None) -> np.ndarray:
        """Dense single-particle generator Lambda_xi on the closed window."""
        fwd = self.forward_rates(z_max, xi)
        back = self.backward_rates(z_max, xi)
        Q = np.zeros((z_max + 1, z_max + 1))
        for z in range(z_max):
            Q[z, z + 1] += fwd[z]
        for z in range(1, z_max + 1):
            Q[z, self.backward_target(z)] += back[z]
        np.fill_diagonal(Q, Q.diagonal() - Q.sum(axis=1))
        return Q

    def drift(self, probs: np.ndarray) -> np.ndarray:
        """Mean-field drift Lambda*_xi xi on the closed window."""
        z_max = probs.shape[0] - 1
        fwd = self.forward_rates(z_max, probs) * probs
        back = self.backward_rates(z_max, probs) * probs
        v = np.zeros_like(probs)
        v -= fwd + back
        v[1:] += fwd[:-1]
        if self.kind is EdgeKind.CHAIN_WITH_RESETS:
            v[0] += back.sum()
        else:
            v[:-1] += back[1:]
        return v


# ---------------------------------------------------------------------------
# Builtin models
# ---------------------------------------------------------------------------

def _require_positive(**kw: float) -> None:
    for k, v in kw.items():
        if not v > 0:
            raise ValueError(f"{k} must be positive, got {v!r}")


def mm1_model(lambda_f: float, lambda_b: float) -> RateModel:
    """Independent M/M/1 queues: forward lambda_f, backward lambda_b."""
    _require_positive(lambda_f=lambda_f, lambda_b=lambda_b)
    return RateModel(
        kind=EdgeKind.BIRTH_DEATH,
        forward=lambda z, xi: lambda_f,
        backward=lambda z, xi: lambda_b,
        lambda_upper=max(lambda_f, lambda_b),
        lambda_lower=min(lambda_f, lambda_b),
        interacting=False,
        name="mm1",
        params={"lambda_f": lambda_f, "lambda_b": lambda_b},
        forward_profile=lambda z, xi: np.full(z.shape, lambda_f),
        backward_profile=lambda z, xi: np.full(z.shape, lambda_b),
    )


def wlan_const_model(lambda_f: float, lambda_b: float) -> RateModel:
    """Backoff chain with constant forward rate and resets to 0."""
    _require_positive(lambda_f=lambda_f, lambda_b=lambda_b)
    return RateModel(
        kind=EdgeKind.CHAIN_WITH_RESETS,
        forward=lambda z, xi: lambda_f,
        backward=lambda z, xi: lambda_b,
        lambda_upper=max(lambda_f, lambda_b),
        lambda_lower=min(lambda_f, lambda_b),
        interacting=False,
        name="wlan_const",
        params={"lambda_f": lambda_f, "lambda_b": lambda_b},
        forward_profile=lambda z, xi: np.full(z.shape, lambda_f),
        backward_profile=lambda z, xi: np.full(z.shape, lambda_b),
    )


def wlan_decay_model(lambda_f: float, lambda_b: float) -> RateModel:
    """Backoff chain with 1/(z+1)-decaying forward rate and resets to 0."""
    _require_positive(lambda_f=lambda_f, lambda_b=lambda_b)
    return RateModel(
        kind=EdgeKind.CHAIN_WITH_RESETS,
        forward=lambda z, xi: lambda_f / (z + 1),
        backward=lambda z, xi: lambda_b,
        lambda_upper=max(lambda_f, lambda_b),
        lambda_lower=min(lambda_f, lambda_b),
        interacting=False,
        name="wlan_decay",
        params={"lambda_f": lambda_f, "lambda_b": lambda_b},
        forward_profile=lambda z, xi: lambda_f / (z + 1.0),
        backward_profile=lambda z, xi: np.full(z.shape, lambda_b),
    )


def interacting_wlan_model(kappa: float) -> RateModel:
    """Mean-field backoff chain coupled through the mass at state 0.

    forward(z, xi) = (1 + kappa*xi(0)) / (z+1)
    reset(z, xi)   = 1 + kappa*(1 - xi(0))

    Satisfies the decay envelope with lambda_lower = 1 and
    lambda_upper = 1 + kappa, and is Lipschitz in xi (TV, half-L1) with
    constant at most 2*kappa.  kappa = 0 reduces to wlan_decay(1, 1).
    """
    if not 0.0 <= kappa < 1.0:
        raise ValueError("kappa must lie in [0, 1)")

    def fwd(z: int, xi: np.ndarray) -> float:
        return (1.0 + kappa * float(xi[0])) / (z + 1)

    def back(z: int, xi: np.ndarray) -> float:
        return 1.0 + kappa * (1.0 - float(xi[0]))

    return RateModel(
        kind=EdgeKind.CHAIN_WITH_RESETS,
        forward=fwd,
        backward=back,
        lambda_upper=1.0 + kappa,
        lambda_lower=1.0,
        interacting=kappa > 0.0,
        name="interacting_wlan",
        params={"kappa": kappa},
        forward_profile=lambda z, xi: (1.0 + kappa * xi[0]) / (z + 1.0),
        backward_profile=lambda z, xi: np.full(
            z.shape, 1.0 + kappa * (1.0 - xi[0])),
    )


def dominating_chain(model: RateModel) -> RateModel:
    """Non-interacting chain with maximal forward and minimal reset rates."""
    if model.kind is not EdgeKind.CHAIN_WITH_RESETS:
        raise EdgeNotPresentError("dominating chain needs the reset edge set")
    if not (model.lambda_upper > 0 and model.lambda_lower > 0):
        raise MissingBoundsError("model lacks declared rate bounds")
    ub, lb = model.lambda_upper, model.lambda_lower
    return RateModel(
        kind=EdgeKind.CHAIN_WITH_RESETS,
        forward=lambda z, xi: ub / (z + 1),
        backward=lambda z, xi: lb,
        lambda_upper=ub,
        lambda_lower=lb,
        interacting=False,
        name=f"dominating({model.name})",
        params={"lambda_upper": ub, "lambda_lower": lb},
        forward_profile=lambda z, xi: ub / (z + 1.0),
        backward_profile=lambda z, xi: np.full(z.shape, lb),
    )


# ---------------------------------------------------------------------------
# Stationary laws
# ---------------------------------------------------------------------------

def _stationary_product_form(model: RateModel, z_max: int,
                             xi: np.ndarray | None) -> np.ndarray | None:
    """Log-domain product-form solution of the balance equations.

    Exact on the closed window for both edge shapes when the backward
    rates are state-independent: birth-death chains satisfy detailed
    balance pi(z+1) b = pi(z) f(z); reset chains satisfy the cut
    balance T(z+1)/T(z) = f(z)/(r + f(z)) for the upper-tail sums T.
    Returns None when the structure does not apply.
    """
    fwd = model.forward_rates(z_max, xi)
    back = model.backward_rates(z_max, xi)
    if np.ptp(back[1:]) > 1e-15 * max(back[1:].max(), 1.0):
        return None
    if model.kind is EdgeKind.BIRTH_DEATH:
        log_pi = np.cumsum(np.concatenate(
            [[0.0], np.log(fwd[:-1]) - np.log(back[1:])]))
        log_pi -= log_pi.max()
        pi = np.exp(log_pi)
        return pi / pi.sum()
    r = float(back[1])
    log_ratio = np.log(fwd[:-1]) - np.log(r + fwd[:-1])
    log_T = np.concatenate([[0.0], np.cumsum(log_ratio)])  # T_0 .. T_zmax
    # pi(z) = T_z - T_{z+1} = T_z * (1 - ratio_z); pi(z_max) = T_{z_max}
    pi = np.empty(z_max + 1)
    with np.errstate(under="ignore"):
        T = np.exp(log_T)
    pi[:-1] = T[:-1] - T[1:]
    pi[-1] = T[-1]
    return pi / pi.sum()


def single_particle_stationary(model: RateModel, z_max: int,
                               frozen_field: StateDistribution | None = None
                               ) -> StateDistribution:
    """Stationary law of one particle on the closed window {0..z_max}.

    Solves the balance equations of the (frozen-field) single-particle
    generator: through the exact product form when the backward rates
    are state-independent (stable in the deep tail), otherwise by a
    direct linear solve with the normalisation row replacing one
    balance row.  Interacting models must supply ``frozen_field``.
    """
    if z_max < 10:
        raise ValueError("truncation too small: z_max >= 10 required")
    if model.interacting and frozen_field is None:
        raise ValueError("interacting model needs a frozen mean field")
    if model.name == "mm1" and model.params["lambda_f"] >= model.params["lambda_b"]:
        raise InstabilityError("mm1 requires lambda_f < lambda_b")
    xi = frozen_field.probs if frozen_field is not None else None
    pi = _stationary_product_form(model, z_max, xi)
    if pi is None:
        Q = model.generator(z_max, xi)
        A = Q.T.copy()
        A[-1, :] = 1.0
        b = np.zeros(z_max + 1)
        b[-1] = 1.0
        pi = np.linalg.solve(A, b)
        pi = np.clip(pi, 0.0, None)
        pi /= pi.sum()
    return StateDistribution(pi, z_max)


def stationarity_residual(model: RateModel, pi: StateDistribution,
                          frozen_field: StateDistribution | None = None) -> float:
    """L1 norm of Lambda* pi on the closed window."""
    field = (frozen_field or pi).probs if model.interacting else None
    Q = model.generator(pi.z_max, field)
    return float(np.abs(Q.T @ pi.probs).sum())


# ---------------------------------------------------------------------------
# Assumption audits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class A2Report:
    passed: bool
    first_violation: tuple | None  # (z, edge, value, low, high, sample_index)


def verify_A2(model: RateModel, sample_measures: Sequence[StateDistribution],
              z_max: int = 60) -> A2Report:
    """Check the decay envelope on every edge against every sample field."""
    if not sample_measures:
        raise ValueError("need at least one sample measure")
    if model.kind is not EdgeKind.CHAIN_WITH_RESETS:
        return A2Report(False, (0, "edge_set", 0.0, 0.0, 0.0, -1))
    lo, hi = model.lambda_lower, model.lambda_upper
    tol = 1e-12
    for i, xi in enumerate(sample_measures):
        probs = xi.probs
        for z in range(z_max + 1):
            r = model.forward(z, probs)
            low, high = lo / (z + 1), hi / (z + 1)
            if not (low - tol <= r <= high + tol):
                return A2Report(False, (z, "forward", r, low, high, i))
            if z >= 1:
                r = model.backward(z, probs)
                if not (lo - tol <= r <= hi + tol):
                    return A2Report(False, (z, "reset", r, lo, hi, i))
    return A2Report(True, None)


def random_distribution(rng: np.random.Generator, z_max: int,
                        concentration: float = 1.0) -> StateDistribution:
    """Dirichlet-distributed point of the simplex on {0..z_max}."""
    w = rng.dirichlet(np.full(z_max + 1, concentration))
    return StateDistribution(w, z_max)


def lipschitz_estimate(model: RateModel, trials: int, rng_seed: int,
                       z_max: int = 30) -> float:
    """Empirical lower estimate of the uniform Lipschitz constant.

    Samples random pairs (xi, zeta) and maximises
    |(z+1)(fwd(z,xi) - fwd(z,zeta))| / d(xi,zeta) over forward edges,
    together with the reset-edge analogue.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(rng_seed)
    best = 0.0
    for _ in range(trials):
        a = random_distribution(rng, z_max)
        b = random_distribution(rng, z_max)
        d = tv_distance(a, b)
        if d < 1e-9:
            continue
        for z in range(0, min(z_max, 20) + 1):
            gap = abs((z + 1) * (model.forward(z, a.probs) - model.forward(z, b.probs)))
            best = max(best, gap / d)
            if z >= 1:
                gap = abs(model.backward(z, a.probs) - model.backward(z, b.probs))
                best = max(best, gap / d)
    return best


def factorial_decay_bound(model: RateModel, pi: StateDistribution) -> bool:
    """Whether pi(z) <= pi(0) * (ub/lb)^z / z! holds at every window state."""
    ub, lb = model.lambda_upper, model.lambda_lower
    bound = pi[0]
    ok = True
    for z in range(1, pi.z_max + 1):
        bound *= (ub / lb) / z
        if pi[z] > bound * (1.0 + 1e-9) + 1e-15:
            ok = False
            break
    return ok
