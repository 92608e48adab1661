"""Exact stochastic simulation of the N-particle empirical-measure chain.

One particle at state z jumps along edge (z, z') at rate
lambda_{z,z'}(xi) where xi is the current empirical measure, so the
occupancy-count vector jumps with total rate
sum_z counts[z] * sum_{z'} lambda_{z,z'}(counts/N).  The jump chain is
simulated exactly (exponential holding times, categorical edge choice).

Randomness comes from counter-based Philox streams keyed by
(seed, replica_index): replicas are reproducible bitwise regardless of
how they are scheduled, and aggregation is a commutative sum by
replica index.  Occupation-measure estimators weight events by holding
times at jump epochs, which is exact; thinning only affects path
exports.

For non-interacting models the stationary law of the empirical measure
is the law of N i.i.d. draws from the single-particle stationary law,
so exact stationary sampling is a single multinomial draw.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .measures import StateDistribution, theta_values, tv_distance
from .models import RateModel, single_particle_stationary

RNG_ALGORITHM = "philox4x64"

# two-sided 97.5% t quantiles for small batch counts (df 10..30)
_T975 = {10: 2.228, 12: 2.179, 15: 2.131, 19: 2.093, 20: 2.086,
         24: 2.064, 29: 2.045, 30: 2.042}


def _t975(df: int) -> float:
    keys = sorted(_T975)
    for k in keys:
        if df <= k:
            return _T975[k]
    return 1.96


class AbsorbingStateError(RuntimeError):
    """Total jump rate vanished (cannot occur under the decay envelope)."""


class TruncationOverflowError(RuntimeError):
    """A particle reached the truncation boundary in interacting mode."""


def substream(seed: int, replica: int) -> np.random.Generator:
    """Philox generator for one replica; key = (seed, replica)."""
    return np.random.Generator(np.random.Philox(key=[seed, replica]))


# ---------------------------------------------------------------------------
# State types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParticleSystemState:
    """Occupancy counts of N particles on {0..z_max}."""

    counts: np.ndarray
    N: int

    def __post_init__(self) -> None:
        c = np.asarray(self.counts, dtype=np.int64)
        object.__setattr__(self, "counts", c)
        if np.any(c < 0):
            raise ValueError("negative occupancy count")
        if int(c.sum()) != self.N:
            raise ValueError("counts must sum to N")

    @property
    def z_max(self) -> int:
        return self.counts.shape[0] - 1

    def empirical(self) -> StateDistribution:
        return StateDistribution(self.counts / self.N, self.z_max)

    @staticmethod
    def all_at_zero(N: int, z_max: int) -> "ParticleSystemState":
        c = np.zeros(z_max + 1, dtype=np.int64)
        c[0] = N
        return ParticleSystemState(c, N)


@dataclass(frozen=True)
class SimConfig:
    N: int
    seed: int
    horizon: float
    burn_in: float | None = None
    z_max: int = 30
    thinning: float = 0.5

    def __post_init__(self) -> None:
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.burn_in is not None and not self.burn_in < self.horizon:
            raise ValueError("burn_in must be below horizon")

    def resolved_burn_in(self, model: RateModel) -> float:
        if self.burn_in is not None:
            return self.burn_in
        return 20.0 / model.lambda_lower


@dataclass(frozen=True)
class RateEstimate:
    """Monte Carlo estimate of a stationary probability and its LDP rate."""

    event: str
    p_hat: float
    ci_low: float
    ci_high: float
    rate: float
    N: int
    seed: int
    algorithm: str = RNG_ALGORITHM
    lower_bound_only: bool = False

    def __post_init__(self) -> None:
        if not (0.0 <= self.p_hat <= 1.0):
            raise ValueError("p_hat outside [0,1]")
        if not (self.ci_low <= self.p_hat <= self.ci_high):
            raise ValueError("CI must bracket p_hat")


# ---------------------------------------------------------------------------
# Events
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BallEvent:
    """{ xi : tv(xi, center) <= radius }."""

    center: StateDistribution
    radius: float

    def __call__(self, dist: StateDistribution) -> bool:
        return tv_distance(dist, self.center.retruncate(dist.z_max)) <= self.radius

    def batch(self, probs: np.ndarray) -> np.ndarray:
        c = self.center.probs
        d = 0.5 * np.abs(probs - c[None, :]).sum(axis=1) \
            + 0.5 * self.center.tail_mass
        return d <= self.radius

    def describe(self) -> str:
        return f"ball(radius={self.radius:g})"


@dataclass(frozen=True)
class NotInKMEvent:
    """{ xi : <xi, theta> > M } (complement of the compact class)."""

    M: float
    z_max: int
    theta: np.ndarray = field(init=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "theta", theta_values(self.z_max))

    def __call__(self, dist: StateDistribution) -> bool:
        return float(dist.probs @ self.theta) > self.M

    def batch(self, probs: np.ndarray) -> np.ndarray:
        return probs @ self.theta > self.M

    def describe(self) -> str:
        return f"not_in_KM(M={self.M:g})"


@dataclass(frozen=True)
class WholeSpaceEvent:
    def __call__(self, dist: StateDistribution) -> bool:
        return True

    def batch(self, probs: np.ndarray) -> np.ndarray:
        return np.ones(probs.shape[0], dtype=bool)

    def describe(self) -> str:
        return "whole_space"


# ---------------------------------------------------------------------------
# Gillespie core
# ---------------------------------------------------------------------------

def _edge_rates(model: RateModel, counts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-state aggregate forward and backward jump rates N*xi(z)*lambda."""
    z_max = counts.shape[0] - 1
    xi = counts / counts.sum()
    fwd = model.forward_rates(z_max, xi) * counts
    back = model.backward_rates(z_max, xi) * counts
    return fwd, back


def gillespie_step(model: RateModel, state: ParticleSystemState,
                   rng: np.random.Generator) -> tuple[ParticleSystemState, float]:
    """One exact jump: exponential holding time at the total rate, then
    one particle moves along an edge chosen proportionally to its rate."""
    counts = state.counts
    if model.interacting and counts[state.z_max] > 0:
        raise TruncationOverflowError(
            "particle reached z_max; enlarge the window")
    fwd, back = _edge_rates(model, counts)
    total = float(fwd.sum() + back.sum())
    if total <= 0.0:
        raise AbsorbingStateError("total jump rate is zero")
    dt = rng.exponential(1.0 / total)
    u = rng.uniform(0.0, total)
    cum = np.concatenate([np.cumsum(fwd), fwd.sum() + np.cumsum(back)])
    idx = int(np.searchsorted(cum, u, side="right"))
    n = counts.shape[0]
    new = counts.copy()
    if idx < n:
        z, zp = idx, idx + 1
    else:
        z = idx - n
        zp = model.backward_target(z)
    new[z] -= 1
    new[zp] += 1
    return ParticleSystemState(new, state.N), dt


def simulate_path(model: RateModel, config: SimConfig,
                  initial: ParticleSystemState | None = None
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Jump-chain realisation sampled every ``thinning`` time units by
    holding the last jump state.  Deterministic in (model, config)."""
    rng = substream(config.seed, 0)
    state = initial or ParticleSystemState.all_at_zero(config.N, config.z_max)
    t = 0.0
    sample_times = np.arange(0.0, config.horizon + 1e-12, config.thinning)
    out = np.zeros((sample_times.shape[0], config.z_max + 1), dtype=np.int64)
    k = 0
    while k < sample_times.shape[0]:
        next_state, dt = gillespie_step(model, state, rng)
        while k < sample_times.shape[0] and sample_times[k] <= t + dt:
            out[k] = state.counts
            k += 1
        t += dt
        state = next_state
    return sample_times, out


def _occupation(model: RateModel, config: SimConfig,
                events: Sequence[Callable[[StateDistribution], bool]],
                replica: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Time-weighted occupation of several events along one run.

    Returns (occupied_time[e], batch_lengths[b], batch_fractions[e, b])
    over 20 equal post-burn-in batches."""
    rng = substream(config.seed, replica)
    state = ParticleSystemState.all_at_zero(config.N, config.z_max)
    burn = config.resolved_burn_in(model)
    n_batches = 20
    batch_len = (config.horizon - burn) / n_batches
    n_ev = len(events)
    occupied = np.zeros((n_ev, n_batches))
    lengths = np.zeros(n_batches)
    t = 0.0
    while t < config.horizon:
        nxt, dt = gillespie_step(model, state, rng)
        a, b = t, min(t + dt, config.horizon)
        if b > burn:
            lo = max(a, burn)
            emp = state.empirical()
            hits = np.array([1.0 if ev(emp) else 0.0 for ev in events])
            # spread the holding interval across the batch grid
            j0 = int((lo - burn) / batch_len)
            j1 = int((b - burn) / batch_len)
            for j in range(j0, min(j1, n_batches - 1) + 1):
                seg_lo = burn + j * batch_len
                seg_hi = seg_lo + batch_len
                w = max(0.0, min(b, seg_hi) - max(lo, seg_lo))
                occupied[:, j] += w * hits
                lengths[j] += w
        t += dt
        state = nxt
    fractions = occupied / np.maximum(lengths, 1e-300)[None, :]
    return occupied.sum(axis=1), lengths, fractions


def _estimate_from_batches(name: str, occ: float, fractions: np.ndarray,
                           total: float, N: int, seed: int) -> RateEstimate:
    n_b = fractions.shape[0]
    if occ <= 0.0:
        p_ub = min(1.0, 3.0 / n_b)
        rate = -math.log(p_ub) / N
        return RateEstimate(name, 0.0, 0.0, p_ub, rate, N, seed,
                            lower_bound_only=True)
    p_hat = occ / total
    half = _t975(n_b - 1) * float(fractions.std(ddof=1)) / math.sqrt(n_b)
    lo = max(0.0, p_hat - half)
    hi = min(1.0, p_hat + half)
    return RateEstimate(name, p_hat, lo, hi, -math.log(p_hat) / N, N, seed)


def estimate_invariant_multi(model: RateModel, config: SimConfig,
                             events: Sequence, names: Sequence[str] | None = None
                             ) -> list[RateEstimate]:
    """Occupation estimates for several events sharing one long run."""
    names = names or [getattr(ev, "describe", lambda: "event")()
                      for ev in events]
    occ, lengths, fractions = _occupation(model, config, events, replica=0)
    total = float(lengths.sum())
    return [_estimate_from_batches(nm, float(o), fr, total, config.N,
                                   config.seed)
            for nm, o, fr in zip(names, occ, fractions)]


def estimate_invariant(model: RateModel, config: SimConfig,
                       event: Callable[[StateDistribution], bool],
                       event_name: str | None = None) -> RateEstimate:
    """Occupation estimate of the stationary probability of an event.

    Events are evaluated at jump epochs weighted by holding times
    (exact for occupation measures).  The confidence interval is a
    batch-means interval over 20 post-burn-in batches; zero observed
    occupancy falls back to a one-sided rule-of-three bound over the
    batch count, and the rate is then reported as a lower bound.
    """
    name = event_name or getattr(event, "describe", lambda: "event")()
    return estimate_invariant_multi(model, config, [event], [name])[0]


def burn_in_diagnostic(model: RateModel, config: SimConfig,
                       event: Callable[[StateDistribution], bool]) -> float:
    """|first-half - second-half| occupation gap (post burn-in)."""
    _, _, fractions = _occupation(model, config, [event], replica=0)
    h = fractions.shape[1] // 2
    return abs(float(fractions[0, :h].mean()) - float(fractions[0, h:].mean()))


# ---------------------------------------------------------------------------
# Exact i.i.d. stationary sampling (non-interacting models)
# ---------------------------------------------------------------------------

def sample_iid_stationary(model: RateModel, N: int, rng: np.random.Generator,
                          z_max: int = 30) -> ParticleSystemState:
    """Exact draw from the stationary empirical-measure law: N i.i.d.
    single-particle stationary states, binned."""
    if model.interacting:
        raise ValueError("exact i.i.d. sampling needs a non-interacting model")
    pi = single_particle_stationary(model, z_max)
    counts = rng.multinomial(N, pi.probs)
    return ParticleSystemState(counts.astype(np.int64), N)


def _wilson(hits: int, n: int) -> tuple[float, float]:
    z = 1.959963984540054
    if n == 0:
        return 0.0, 1.0
    p = hits / n
    denom = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    lo = 0.0 if hits == 0 else max(0.0, centre - half)
    hi = 1.0 if hits == n else min(1.0, centre + half)
    return lo, hi


def estimate_rate_curve(model: RateModel, event, N_list: Sequence[int],
                        samples_per_N: int, seed: int, z_max: int = 30,
                        threads: int | None = None,
                        sim_horizon: float = 200.0) -> list[RateEstimate]:
    """Monte Carlo decay-rate curve -(1/N) log p_hat over N.

    Non-interacting models use exact i.i.d. stationary sampling with a
    Wilson interval; interacting models fall back to long-run
    occupation estimates.  All-zero hit counts are reported as
    lower-bound-only through the rule of three.
    """
    results: list[RateEstimate] = []
    name = getattr(event, "describe", lambda: "event")()
    if model.interacting:
        for i, N in enumerate(N_list):
            cfg = SimConfig(N=N, seed=seed + i, horizon=sim_horizon, z_max=z_max)
            results.append(estimate_invariant(model, cfg, event, name))
        return results
    pi = single_particle_stationary(model, z_max)

    def one(i_N: tuple[int, int]) -> RateEstimate:
        i, N = i_N
        rng = substream(seed, i)
        hits = 0
        remaining = samples_per_N
        chunk = max(1, min(200_000, samples_per_N))
        while remaining > 0:
            m = min(chunk, remaining)
            draws = rng.multinomial(N, pi.probs, size=m) / N
            if hasattr(event, "batch"):
                hits += int(event.batch(draws).sum())
            else:
                for row in draws:
                    if event(StateDistribution(row, z_max)):
                        hits += 1
            remaining -= m
        if hits == 0:
            p_ub = min(1.0, 3.0 / samples_per_N)
            rate = -math.log(p_ub) / N
            return RateEstimate(name, 0.0, 0.0, p_ub, rate, N, seed,
                                lower_bound_only=True)
        p_hat = hits / samples_per_N
        lo, hi = _wilson(hits, samples_per_N)
        return RateEstimate(name, p_hat, lo, hi, -math.log(p_hat) / N, N, seed)

    work = list(enumerate(N_list))
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(one, work))
    else:
        results = [one(w) for w in work]
    return results


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------

def save_rate_estimates(rows: Iterable[RateEstimate], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["N", "event", "p_hat", "ci_low", "ci_high", "rate",
                    "seed", "algorithm"])
        for r in rows:
            w.writerow([r.N, r.event, format(r.p_hat, ".17g"),
                        format(r.ci_low, ".17g"), format(r.ci_high, ".17g"),
                        format(r.rate, ".17g"), r.seed, r.algorithm])


def save_counts_path(times: np.ndarray, counts: np.ndarray, N: int,
                     path: str | Path, replica: int = 0) -> None:
    """Path dump in the long t,z,prob format with a replica column."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "z", "prob", "replica"])
        for t, row in zip(times, counts):
            for z, c in enumerate(row):
                w.writerow([format(float(t), ".17g"), z,
                            format(c / N, ".17g"), replica])
