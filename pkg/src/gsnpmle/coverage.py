"""Empirical Bayes marginal coverage sets.

A rule thresholds the fitted posterior density at one global level ``k``:
``I(x) = {theta : pi(theta | x) >= k}``. The level is the lower
``beta``-quantile of ``pi(theta_b | X_b)`` over draws ``(theta_b, X_b)`` from
the fitted hierarchical model, which makes the rule's model-based marginal
coverage ``1 - beta``. Garwood intervals are provided as the frequentist
baseline.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import gammainc, gammaincinv

from .mixture import (
    GammaMixtureModel,
    log_kernel_matrix,
    posterior_density,
    posterior_log_density,
    tail_cutoff,
)
from .rng import Rng
from .special import chi_square_quantile

__all__ = [
    "PreconditionError",
    "IntervalUnion",
    "CoverageRule",
    "estimate_threshold",
    "level_set",
    "build_rule",
    "contains",
    "exact_coverage",
    "garwood_interval",
    "rule_to_json",
    "rule_from_json",
]

GRID_POINTS = 2048
ATOM_POINTS = 64
_UPPER_TAIL = 1e-10
_BISECT_RTOL = 1e-10
MC_DRAWS = 200_000


class PreconditionError(ValueError):
    """The model is outside the class the coverage construction supports."""


def _require_finite_support(model: GammaMixtureModel) -> None:
    if model.mass_at_infinity > 0.0:
        raise PreconditionError(
            "coverage sets need a mixing measure without mass at infinity "
            f"(got {model.mass_at_infinity:.3g}); refit with allow_infinity_atom=False"
        )


@dataclass(frozen=True)
class IntervalUnion:
    """Sorted, pairwise disjoint intervals [lo, hi] on [0, inf)."""

    intervals: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        ivs = tuple((float(lo), float(hi)) for lo, hi in self.intervals)
        prev_hi = -math.inf
        for lo, hi in ivs:
            if not (0.0 <= lo < hi < math.inf):
                raise ValueError(f"bad interval ({lo}, {hi})")
            if not lo > prev_hi:
                raise ValueError("intervals must be sorted with positive gaps")
            prev_hi = hi
        object.__setattr__(self, "intervals", ivs)

    def __iter__(self):
        return iter(self.intervals)

    def __len__(self):
        return len(self.intervals)

    @property
    def total_length(self) -> float:
        return math.fsum(hi - lo for lo, hi in self.intervals)

    def contains(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        inside = np.zeros(theta.shape, dtype=bool)
        for lo, hi in self.intervals:
            inside |= (theta >= lo) & (theta <= hi)
        return inside

    def issubset(self, other: IntervalUnion, rtol: float = 0.0) -> bool:
        for lo, hi in self.intervals:
            ok = False
            for olo, ohi in other.intervals:
                slack = rtol * max(abs(ohi), 1.0)
                if olo - slack <= lo and hi <= ohi + slack:
                    ok = True
                    break
            if not ok:
                return False
        return True


@dataclass(frozen=True)
class CoverageRule:
    threshold: float
    beta: float
    sets: dict[int, IntervalUnion]
    x_max: int
    mc_draws: int
    model_ref: str | None = field(default=None, compare=False)

    def interval(self, x: int) -> IntervalUnion:
        return self.sets.get(int(x), IntervalUnion())

    def length(self, x: int) -> float:
        return self.interval(x).total_length

    def lengths(self, xs) -> np.ndarray:
        table = {x: s.total_length for x, s in self.sets.items()}
        return np.array([table.get(int(x), 0.0) for x in np.asarray(xs).reshape(-1)])


def _check_beta(beta: float) -> None:
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta!r}")


def simulate_posterior_densities(model: GammaMixtureModel, mc_draws: int, rng: Rng):
    """Draw (theta, X) from the model and return pi(theta | X) for each draw."""
    idx = rng.choice(model.weights, mc_draws)
    lam = model.atoms[idx]
    theta = rng.gamma(model.kappa, lam)
    x = rng.poisson(theta)
    with np.errstate(divide="ignore"):
        return np.exp(posterior_log_density(model, theta, x))


def estimate_threshold(model: GammaMixtureModel, beta: float, mc_draws: int, rng: Rng) -> float:
    """Lower beta-quantile (order statistic ceil(beta * B)) of simulated posterior densities."""
    _require_finite_support(model)
    _check_beta(beta)
    if mc_draws < 1:
        raise ValueError("mc_draws must be positive")
    dens = simulate_posterior_densities(model, mc_draws, rng)
    rank = max(1, math.ceil(beta * mc_draws))
    return float(np.partition(dens, rank - 1)[rank - 1])


def _theta_grid(model: GammaMixtureModel, x: int) -> tuple[np.ndarray, float]:
    shape = x + model.kappa
    probs = np.arange(1, GRID_POINTS + 1) / GRID_POINTS * (1.0 - _UPPER_TAIL)
    theta_hi = float(gammaincinv(shape, 1.0 - _UPPER_TAIL) / (model.lam_min + 1.0))
    pieces = [gammaincinv(shape, probs) / (model.lam_min + 1.0)]
    # extra cdf-spaced points per atom so components far above lam_min are resolved
    atom_probs = np.arange(1, ATOM_POINTS + 1) / (ATOM_POINTS + 1)
    base = gammaincinv(shape, atom_probs)
    for lam in model._rates[1:]:
        pieces.append(base / (lam + 1.0))
    grid = np.unique(np.concatenate(pieces))
    grid = grid[(grid > 0.0) & (grid <= theta_hi)]
    return np.concatenate([[0.0], grid]), theta_hi


def _density(model, theta, x):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.exp(posterior_log_density(model, theta, x))


def level_set(model: GammaMixtureModel, x: int, k: float) -> IntervalUnion:
    """``{theta : pi(theta | x) >= k}`` as a union of closed intervals."""
    _require_finite_support(model)
    if not k > 0.0:
        raise ValueError("level_set needs k > 0; k = 0 is the whole half line")
    x = int(x)
    grid, theta_hi = _theta_grid(model, x)
    inside = _density(model, grid, x) >= k
    if not inside.any():
        return IntervalUnion()
    flips = np.flatnonzero(inside[1:] != inside[:-1])
    lo_b = grid[flips].copy()
    hi_b = grid[flips + 1].copy()
    rising = ~inside[flips]
    # bisection on all crossings at once; the bracket keeps inside-ness at its ends
    for _ in range(200):
        width = hi_b - lo_b
        if not width.size or np.all(width <= _BISECT_RTOL * hi_b):
            break
        mid = 0.5 * (lo_b + hi_b)
        mid_in = _density(model, mid, x) >= k
        go_right = np.where(rising, ~mid_in, mid_in)
        lo_b = np.where(go_right, mid, lo_b)
        hi_b = np.where(go_right, hi_b, mid)
    crossings = np.where(rising, hi_b, lo_b)

    edges = [0.0] if inside[0] else []
    edges.extend(float(c) for c in crossings)
    if inside[-1]:
        edges.append(theta_hi)
    intervals = []
    for lo, hi in zip(edges[0::2], edges[1::2]):
        if hi > lo:
            if intervals and lo <= intervals[-1][1]:
                intervals[-1] = (intervals[-1][0], hi)
            else:
                intervals.append((lo, hi))
    return IntervalUnion(tuple(intervals))


def build_rule(
    model: GammaMixtureModel,
    beta: float,
    mc_draws: int = MC_DRAWS,
    rng: Rng | None = None,
    x_max: int | None = None,
    threshold: float | None = None,
) -> CoverageRule:
    """Calibrate the threshold by simulation and tabulate sets for x = 0..x_max.

    ``x_max`` defaults to the point where the fitted marginal has mass
    ``1 - 1e-8`` below it; a larger value may be passed to cover observed
    counts. ``threshold`` skips the simulation.
    """
    _require_finite_support(model)
    _check_beta(beta)
    if threshold is None:
        if rng is None:
            raise ValueError("build_rule needs an Rng to calibrate the threshold")
        threshold = estimate_threshold(model, beta, mc_draws, rng)
    tail = tail_cutoff(model, 1e-8)
    x_max = tail if x_max is None else max(int(x_max), tail)
    sets = {x: level_set(model, x, threshold) for x in range(x_max + 1)}
    return CoverageRule(threshold, beta, sets, x_max, mc_draws, model.fingerprint())


def contains(model: GammaMixtureModel, k: float, x, theta):
    """Membership ``pi(theta | x) >= k`` without building intervals; broadcasts."""
    if k <= 0.0:
        return np.ones(np.broadcast(np.asarray(x), np.asarray(theta)).shape, dtype=bool)
    return _density(model, theta, x) >= k


def exact_coverage(rule: CoverageRule, truth: GammaMixtureModel) -> float:
    """Marginal coverage of ``rule`` when (theta, X) follow ``truth``.

    For a Gamma-mixture truth, ``p_theta(x) g(theta)`` is a weighted sum of
    Gamma(x + kappa, lam_j + 1) densities, so each interval contributes a
    difference of regularized incomplete gamma functions; counts beyond
    ``rule.x_max`` contribute nothing.
    """
    _require_finite_support(truth)
    live = truth.weights > 0.0
    lam = truth.atoms[live]
    logw = np.log(truth.weights[live])
    xs = np.arange(rule.x_max + 1)
    mass = np.exp(log_kernel_matrix(truth.kappa, lam, xs) + logw[None, :])
    total = 0.0
    for x in xs:
        ivs = rule.interval(int(x)).intervals
        if not ivs:
            continue
        shape = x + truth.kappa
        bounds = np.asarray(ivs)
        upper = gammainc(shape, np.outer(bounds[:, 1], lam + 1.0))
        lower = gammainc(shape, np.outer(bounds[:, 0], lam + 1.0))
        total += float(((upper - lower) * mass[x][None, :]).sum())
    return min(1.0, max(0.0, total))


@lru_cache(maxsize=4096)
def garwood_interval(x: int, beta: float) -> tuple[float, float]:
    """Exact (Garwood) Poisson confidence interval at level 1 - beta."""
    _check_beta(beta)
    x = int(x)
    if x < 0:
        raise ValueError("x must be nonnegative")
    lo = 0.0 if x == 0 else 0.5 * chi_square_quantile(beta / 2.0, 2.0 * x)
    hi = 0.5 * chi_square_quantile(1.0 - beta / 2.0, 2.0 * x + 2.0)
    return lo, hi


def rule_to_json(rule: CoverageRule) -> str:
    payload = {
        "beta": rule.beta,
        "threshold": rule.threshold,
        "mc_draws": int(rule.mc_draws),
        "sets": {str(x): [[lo, hi] for lo, hi in rule.sets[x]] for x in sorted(rule.sets)},
    }
    return json.dumps(payload, indent=2) + "\n"


def rule_from_json(text: str) -> CoverageRule:
    data = json.loads(text)
    missing = {"beta", "threshold", "mc_draws", "sets"} - data.keys()
    if missing:
        raise ValueError(f"rule JSON missing fields: {sorted(missing)}")
    sets = {
        int(x): IntervalUnion(tuple((float(lo), float(hi)) for lo, hi in ivs))
        for x, ivs in data["sets"].items()
    }
    x_max = max(sets) if sets else -1
    return CoverageRule(float(data["threshold"]), float(data["beta"]), sets, x_max, int(data["mc_draws"]))
