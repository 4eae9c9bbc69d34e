"""Estimating the minimal Gamma shape by the Kolmogorov-Smirnov neighborhood rule.

For each candidate shape the smallest KS distance between the empirical cdf
and any NB-mixture cdf on a fixed rate grid is a Chebyshev-type linear
program in ``(t, w)``. The class of Gamma mixtures grows with the shape, so
this distance is nonincreasing along the shape grid and the estimate is the
first grid value whose distance falls within the radius ``eta``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .mixture import CountSample, log_kernel_matrix, log_marginal_pmf
from .npmle import SolverConfig, fit_npmle
from .rng import Rng
from .simplex import solve_lp

__all__ = [
    "KappaConfig",
    "KSFit",
    "KappaResult",
    "ks_distance",
    "nb_cdf_matrix",
    "lp_atom_grid",
    "solve_min_ks",
    "min_ks_fit",
    "DeltaProfile",
    "estimate_kappa",
    "dkw_eta",
    "cv_select_eta",
    "select_kappa",
]

log = logging.getLogger(__name__)

_LOG_FLOOR = math.log(1e-300)
MONOTONE_SLACK = 1e-9


def _default_kappa_grid():
    return [round(0.1 * i, 1) for i in range(1, 61)]


def _default_eta_grid():
    return [0.005, 0.01, 0.015, 0.02, 0.03, 0.04, 0.05, 0.075, 0.1]


@dataclass
class KappaConfig:
    kappa_grid: list[float] = field(default_factory=_default_kappa_grid)
    atom_grid_size: int = 150
    eta: float | str = "cv"
    cv_folds: int = 5
    cv_eta_grid: list[float] = field(default_factory=_default_eta_grid)

    def __post_init__(self):
        grid = np.asarray(self.kappa_grid, dtype=np.float64)
        if grid.size == 0 or np.any(grid <= 0.0) or np.any(np.diff(grid) <= 0.0):
            raise ValueError("kappa_grid must be a strictly increasing list of positive values")
        if self.cv_folds < 2:
            raise ValueError("cv_folds must be at least 2")
        if self.atom_grid_size < 1:
            raise ValueError("atom_grid_size must be positive")
        if not self.cv_eta_grid or any(e <= 0.0 for e in self.cv_eta_grid):
            raise ValueError("cv_eta_grid must hold positive radii")


@dataclass
class KSFit:
    weights: np.ndarray
    delta: float
    active: np.ndarray
    dual_residual: float
    primal_residual: float


@dataclass
class KappaResult:
    kappa_hat: float
    eta: float
    eta_rule: str
    profile: list[tuple[float, float]]
    within_radius: bool = True

    def to_dict(self) -> dict:
        return {
            "kappa_hat": self.kappa_hat,
            "eta": self.eta,
            "eta_rule": self.eta_rule,
            "profile": [[k, d] for k, d in self.profile],
        }


def ks_distance(F1, F2) -> float:
    """Sup-norm distance between two cdfs tabulated on the same support 0..m."""
    F1 = np.asarray(F1, dtype=np.float64)
    F2 = np.asarray(F2, dtype=np.float64)
    if F1.shape != F2.shape:
        raise ValueError("cdfs must share the same support")
    return float(np.max(np.abs(F1 - F2))) if F1.size else 0.0


def nb_cdf_matrix(kappa: float, atoms, max_count: int) -> np.ndarray:
    """C[m, j] = P(X <= m) under NB(kappa, lam_j / (lam_j + 1)), m = 0..max_count."""
    pmf = np.exp(log_kernel_matrix(kappa, atoms, np.arange(max_count + 1)))
    return np.minimum(np.cumsum(pmf, axis=0), 1.0)


def lp_atom_grid(sample: CountSample, kappa: float, size: int = 150) -> np.ndarray:
    lo = kappa / sample.max_count if sample.max_count > 0 else kappa
    hi = min(10.0 * kappa * sample.n, 1e6)
    if hi <= lo:
        hi = 10.0 * lo
    return np.geomspace(lo, hi, size) if size > 1 else np.array([lo])


def solve_min_ks(sample: CountSample, kappa: float, atoms) -> KSFit:
    """Minimize t subject to |F_w(m) - F_n(m)| <= t, m = 0..X_(n), w in the simplex."""
    atoms = np.asarray(atoms, dtype=np.float64)
    if atoms.size == 0:
        raise ValueError("min_ks_fit needs at least one atom")
    C = nb_cdf_matrix(kappa, atoms, sample.max_count)
    Fn = sample.empirical_cdf
    M = atoms.size
    rows = C.shape[0]
    ones = np.ones((rows, 1))
    # variables (t, w_1..w_M)
    A_ub = np.vstack([np.hstack([-ones, C]), np.hstack([-ones, -C])])
    b_ub = np.concatenate([Fn, -Fn])
    A_eq = np.hstack([[[0.0]], np.ones((1, M))])
    c = np.zeros(M + 1)
    c[0] = 1.0
    res = solve_lp(c, A_ub, b_ub, A_eq, [1.0])
    w = np.clip(res.x[1:], 0.0, None)
    w /= w.sum()
    gaps = np.abs(C @ w - Fn)
    delta = float(gaps.max())
    active = np.flatnonzero(gaps >= delta - 1e-8)
    return KSFit(w, delta, active, res.dual_residual, res.primal_residual)


def min_ks_fit(sample: CountSample, kappa: float, atoms) -> tuple[np.ndarray, float]:
    fit = solve_min_ks(sample, kappa, atoms)
    return fit.weights, fit.delta


class DeltaProfile:
    """Lazily evaluated, memoized ``kappa -> delta`` for one sample."""

    def __init__(self, sample: CountSample, config: KappaConfig):
        self.sample = sample
        self.config = config
        self.grid = [float(k) for k in config.kappa_grid]
        self._cache: dict[int, float] = {}

    def __call__(self, index: int) -> float:
        if index not in self._cache:
            kappa = self.grid[index]
            atoms = lp_atom_grid(self.sample, kappa, self.config.atom_grid_size)
            self._cache[index] = solve_min_ks(self.sample, kappa, atoms).delta
        return self._cache[index]

    def full(self) -> list[tuple[float, float]]:
        values = [(k, self(i)) for i, k in enumerate(self.grid)]
        self.check_monotone(values)
        return values

    @staticmethod
    def check_monotone(values) -> bool:
        ok = True
        for (k0, d0), (k1, d1) in zip(values, values[1:]):
            if d1 > d0 + MONOTONE_SLACK:
                ok = False
                log.warning("delta increases from %.6g at kappa=%g to %.6g at kappa=%g", d0, k0, d1, k1)
        return ok

    def smallest_within(self, eta: float) -> tuple[int, bool]:
        """Index of the first grid value with delta <= eta, by bisection.

        Falls back to the last index (flagged False) when no value qualifies.
        """
        last = len(self.grid) - 1
        if self(last) > eta:
            log.warning("no shape on the grid reaches radius %.4g; using the largest", eta)
            return last, False
        lo, hi = 0, last
        while lo < hi:
            mid = (lo + hi) // 2
            if self(mid) <= eta:
                hi = mid
            else:
                lo = mid + 1
        # verify against the predecessor; walk down if bisection skipped a dip
        while lo > 0 and self(lo - 1) <= eta:
            lo -= 1
        return lo, True


def estimate_kappa(sample: CountSample, eta: float, config: KappaConfig | None = None,
                   profile: DeltaProfile | None = None) -> float:
    """Smallest grid shape whose minimal KS distance is within ``eta``."""
    if not eta > 0.0:
        raise ValueError("eta must be positive")
    config = config or KappaConfig()
    profile = profile or DeltaProfile(sample, config)
    index, _ = profile.smallest_within(eta)
    return profile.grid[index]


def dkw_eta(n: float, C: float) -> float:
    """Radius ``C * sqrt(log(n) / n)``; needs ``C > 1/sqrt(2)`` for the a.s. DKW event."""
    if not C > 1.0 / math.sqrt(2.0):
        raise ValueError("C must exceed 1/sqrt(2)")
    if not n > 1.0:
        raise ValueError("n must exceed 1")
    return C * math.sqrt(math.log(n) / n)


def _fold_indices(n: int, folds: int, rng: Rng) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [np.sort(perm[f::folds]) for f in range(folds)]


def cv_select_eta(sample: CountSample, config: KappaConfig | None = None,
                  rng: Rng | None = None) -> float:
    """Radius maximizing the mean held-out log marginal likelihood across folds."""
    config = config or KappaConfig()
    rng = rng or Rng(0)
    etas = sorted(float(e) for e in config.cv_eta_grid)
    if len(etas) == 1:
        return etas[0]
    if sample.n < config.cv_folds:
        raise ValueError("need at least cv_folds observations")
    scores = np.zeros(len(etas))
    for held in _fold_indices(sample.n, config.cv_folds, rng):
        mask = np.ones(sample.n, dtype=bool)
        mask[held] = False
        train = sample.subset(mask)
        valid = sample.counts[held]
        profile = DeltaProfile(train, config)
        fits = {}
        for e, eta in enumerate(etas):
            kappa = estimate_kappa(train, eta, config, profile)
            if kappa not in fits:
                fits[kappa] = fit_npmle(train, kappa, SolverConfig())[0]
            log_f = np.maximum(log_marginal_pmf(fits[kappa], valid), _LOG_FLOOR)
            scores[e] += float(np.mean(log_f)) / config.cv_folds
    best = scores.max()
    # ties go to the larger radius
    return etas[int(np.flatnonzero(scores >= best)[-1])]


def select_kappa(sample: CountSample, eta, config: KappaConfig | None = None,
                 rng: Rng | None = None, full_profile: bool = True) -> KappaResult:
    """Resolve the radius rule (number, ``"dkw:C"`` or ``"cv"``) and estimate the shape."""
    config = config or KappaConfig()
    if isinstance(eta, str):
        spec = eta.strip().lower()
        if spec == "cv":
            value, rule = cv_select_eta(sample, config, rng), "cv"
        elif spec.startswith("dkw:"):
            value, rule = dkw_eta(sample.n, float(spec[4:])), "dkw"
        else:
            value, rule = float(spec), "fixed"
    else:
        value, rule = float(eta), "fixed"
    profile = DeltaProfile(sample, config)
    index, within = profile.smallest_within(value)
    points = profile.full() if full_profile else sorted(
        (profile.grid[i], d) for i, d in profile._cache.items()
    )
    return KappaResult(profile.grid[index], value, rule, points, within)
