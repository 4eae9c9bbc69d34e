"""Grid NPMLE of the mixing measure under the negative binomial kernel.

The log-likelihood ``sum_i m_i log f_w(x_i)`` is maximized over the simplex of
weights on a fixed log-spaced grid of rates (optionally with an atom at
infinity). Two monotone update rules are available:

``em``
    the multiplicative fixed point ``w_j <- w_j * D_j(w)`` where
    ``D_j(w) = (1/n) sum_i m_i r(x_i | lam_j) / f_w(x_i)`` is the mixture
    gradient;
``cnm``
    a short EM warm start followed by constrained Newton steps: the quadratic
    model of the log-likelihood is maximized over the simplex by nonnegative
    least squares and the step is accepted by an Armijo backtracking search,
    falling back to an EM step when the search fails.

Optimality is certified by ``max_j D_j(w) - 1 <= tol``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import lsq_linear

from .mixture import (
    CountSample,
    GammaMixtureModel,
    MixingMeasure,
    log_kernel_matrix,
    log_marginal_pmf,
)

__all__ = [
    "SolverConfig",
    "FitDiagnostics",
    "NonConvergenceError",
    "build_grid",
    "fit_npmle",
    "optimality_gap",
    "gradient_ratios",
]

log = logging.getLogger(__name__)

_GRID_CAP = 1e6


@dataclass
class SolverConfig:
    grid_size: int = 300
    grid_min: float | None = None
    grid_max: float | None = None
    allow_infinity_atom: bool | None = None
    tol_gradient: float = 1e-8
    max_iters: int = 50000
    prune_weight: float = 1e-12
    support_bounds: tuple[float, float] | None = None
    method: str = "cnm"
    atoms: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.grid_size < 1:
            raise ValueError("grid_size must be positive")
        if self.tol_gradient <= 0.0:
            raise ValueError("tol_gradient must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if self.grid_min is not None and self.grid_min <= 0.0:
            raise ValueError("grid_min must be positive")
        if (
            self.grid_min is not None
            and self.grid_max is not None
            and not self.grid_min < self.grid_max
        ):
            raise ValueError("grid_min must be below grid_max")
        if self.support_bounds is not None:
            lo, hi = self.support_bounds
            if not 0.0 < lo < hi < math.inf:
                raise ValueError("support_bounds must satisfy 0 < L < U < inf")
        if self.atoms is not None:
            atoms = np.asarray(self.atoms, dtype=np.float64)
            if atoms.size == 0 or not np.all(np.isfinite(atoms)) or np.any(atoms <= 0.0):
                raise ValueError("explicit atoms must be finite and positive")
            if np.any(np.diff(atoms) <= 0.0):
                raise ValueError("explicit atoms must be strictly increasing")
            self.atoms = tuple(float(a) for a in atoms)
        if self.method not in ("cnm", "em"):
            raise ValueError(f"unknown method {self.method!r}")


@dataclass
class FitDiagnostics:
    iterations: int
    final_gradient_gap: float
    loglik_trace_tail: list[float]
    support_size: int
    converged: bool = True
    method: str = "cnm"
    support_bound_exceeded: bool = False
    grid: np.ndarray = field(default=None, repr=False)
    infinity_atom: bool = False

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "final_gradient_gap": self.final_gradient_gap,
            "loglik_trace_tail": list(self.loglik_trace_tail),
            "support_size": self.support_size,
            "converged": self.converged,
            "method": self.method,
            "support_bound_exceeded": self.support_bound_exceeded,
        }


class NonConvergenceError(RuntimeError):
    def __init__(self, message, diagnostics: FitDiagnostics, model: GammaMixtureModel):
        super().__init__(message)
        self.diagnostics = diagnostics
        self.model = model


def _auto_bounds(sample: CountSample, kappa: float) -> tuple[float, float]:
    lo = kappa / sample.max_count if sample.max_count > 0 else kappa
    hi = min(max(50.0, 10.0 * kappa * sample.n), _GRID_CAP)
    if hi <= lo:
        hi = 10.0 * lo
    return lo, hi


def build_grid(sample: CountSample, kappa: float, config: SolverConfig | None = None) -> np.ndarray:
    """Log-spaced rate grid; [L, U] replaces the automatic range when constrained.

    ``config.atoms`` bypasses the construction and is used verbatim.
    """
    if sample is None or len(sample) == 0:
        raise ValueError("cannot build a grid for an empty sample")
    config = config or SolverConfig()
    if config.atoms is not None:
        return np.array(config.atoms)
    if config.support_bounds is not None:
        lo, hi = config.support_bounds
    else:
        auto_lo, auto_hi = _auto_bounds(sample, kappa)
        lo = config.grid_min if config.grid_min is not None else auto_lo
        hi = config.grid_max if config.grid_max is not None else auto_hi
        if not lo < hi:
            raise ValueError(f"empty grid range [{lo}, {hi}]")
    if config.grid_size == 1:
        return np.array([lo])
    return np.geomspace(lo, hi, config.grid_size)


def _use_infinity(sample: CountSample, config: SolverConfig) -> bool:
    if config.support_bounds is not None:
        return False
    if config.allow_infinity_atom is not None:
        return bool(config.allow_infinity_atom)
    return bool(sample.values[0] == 0) and config.grid_max is None and config.atoms is None


class _Problem:
    """Row-scaled kernel matrix over distinct counts; columns are atoms (+ infinity)."""

    def __init__(self, sample: CountSample, kappa: float, grid: np.ndarray, infinity: bool):
        logk = log_kernel_matrix(kappa, grid, sample.values)
        if infinity:
            inf_col = np.where(sample.values == 0, 0.0, -np.inf)[:, None]
            logk = np.hstack([logk, inf_col])
        self.shift = logk.max(axis=1)
        self.A = np.exp(logk - self.shift[:, None])
        self.m = sample.multiplicity.astype(np.float64)
        self.n = float(sample.n)
        self.n_grid = grid.size
        self.infinity = infinity

    def evaluate(self, w):
        f = self.A @ w
        with np.errstate(divide="ignore"):
            ll = float(np.dot(self.m, np.log(f) + self.shift))
        return f, ll

    def gradient(self, f):
        return (self.m / f) @ self.A / self.n


def _cnm_step(prob: _Problem, w, f, ll, D):
    # quadratic model of the log-likelihood around w, solved over the simplex by
    # bounded least squares with a heavily weighted sum-to-one row
    root_m = np.sqrt(prob.m)
    S = prob.A / f[:, None] * root_m[:, None]
    penalty = math.sqrt(1e3 * prob.n)
    S = np.vstack([S, np.full(S.shape[1], penalty)])
    target = np.append(2.0 * root_m, penalty)
    try:
        v = lsq_linear(S, target, bounds=(0.0, np.inf), method="bvls").x
    except (ValueError, np.linalg.LinAlgError):
        return None
    # the current point is feasible, so a worse model value means the solve failed
    if np.sum((S @ v - target) ** 2) > np.sum((S @ w - target) ** 2):
        return None
    v = np.clip(v, 0.0, None)
    total = v.sum()
    if not total > 0.0:
        return None
    v /= total
    slope = prob.n * (float(np.dot(v, D)) - 1.0)
    if not slope > 0.0:
        return None
    alpha = 1.0
    for _ in range(40):
        trial = w + alpha * (v - w)
        trial[trial < 0.0] = 0.0
        trial /= trial.sum()
        f_new, ll_new = prob.evaluate(trial)
        if ll_new >= ll + alpha * slope / 3.0:
            return trial, f_new, ll_new
        alpha *= 0.5
    return None


def fit_npmle(
    sample: CountSample,
    kappa: float,
    config: SolverConfig | None = None,
    callback=None,
) -> tuple[GammaMixtureModel, FitDiagnostics]:
    """Maximize the NB-mixture likelihood over the rate grid.

    ``callback(iteration, weights, mass_at_infinity, loglik)`` is invoked after
    every accepted update; ``loglik`` is the total log-likelihood.
    """
    config = config or SolverConfig()
    if not kappa > 0.0:
        raise ValueError("kappa must be positive")
    grid = build_grid(sample, kappa, config)
    infinity = _use_infinity(sample, config)

    if infinity and sample.max_count == 0:
        model = GammaMixtureModel(kappa, MixingMeasure.point_mass(math.inf), n_fit=sample.n, loglik=0.0)
        log.warning("all counts are zero: the NPMLE is the point mass at infinity")
        diag = FitDiagnostics(0, 0.0, [0.0], 1, True, config.method, False, grid, True)
        return model, diag

    prob = _Problem(sample, kappa, grid, infinity)
    n_cols = prob.A.shape[1]
    w = np.full(n_cols, 1.0 / n_cols)
    f, ll = prob.evaluate(w)
    trace = [ll]
    tol = config.tol_gradient
    iteration = 0
    gap = math.inf
    warm = 10 if config.method == "cnm" else config.max_iters

    while iteration < config.max_iters:
        D = prob.gradient(f)
        gap = float(D.max() - 1.0)
        if gap <= tol:
            break
        iteration += 1
        step = None
        if iteration > warm:
            step = _cnm_step(prob, w, f, ll, D)
        if step is None:
            w = w * D
            w /= w.sum()
            f, ll_new = prob.evaluate(w)
        else:
            w, f, ll_new = step
        ll = ll_new
        trace.append(ll)
        if callback is not None:
            callback(iteration, w[: prob.n_grid].copy(), float(w[-1]) if infinity else 0.0, ll)

    # prune negligible atoms and renormalize
    w = np.where(w < config.prune_weight, 0.0, w)
    w /= w.sum()
    f, ll = prob.evaluate(w)
    gap = float(prob.gradient(f).max() - 1.0)
    mass_inf = float(w[-1]) if infinity else 0.0
    grid_w = w[: prob.n_grid]
    keep = grid_w > 0.0
    mixing = MixingMeasure(grid[keep], grid_w[keep], mass_inf)
    model = GammaMixtureModel(kappa, mixing, n_fit=sample.n, loglik=ll)
    support = mixing.support_size
    diag = FitDiagnostics(
        iterations=iteration,
        final_gradient_gap=gap,
        loglik_trace_tail=[float(v) for v in trace[-10:]],
        support_size=support,
        converged=gap <= tol,
        method=config.method,
        support_bound_exceeded=support > sample.values.size + 1,
        grid=grid,
        infinity_atom=infinity,
    )
    if diag.support_bound_exceeded:
        log.info("support size %d exceeds distinct counts + 1 (%d)", support, sample.values.size + 1)
    if gap > 100.0 * tol:
        raise NonConvergenceError(
            f"NPMLE did not converge in {iteration} iterations (gap {gap:.3g})", diag, model
        )
    if gap > tol:
        log.warning("NPMLE stopped with gap %.3g above tolerance %.3g", gap, tol)
    return model, diag


def gradient_ratios(model: GammaMixtureModel, sample: CountSample, atoms, infinity: bool = False):
    """D(lam) = (1/n) sum_i r(X_i | lam) / f(X_i) for each lam in ``atoms`` (then infinity)."""
    atoms = np.asarray(atoms, dtype=np.float64)
    log_f = log_marginal_pmf(model, sample.values)
    logk = log_kernel_matrix(model.kappa, atoms, sample.values)
    m = sample.multiplicity.astype(np.float64)
    D = (m[:, None] * np.exp(logk - log_f[:, None])).sum(axis=0) / sample.n
    if infinity:
        zero = sample.values == 0
        d_inf = float(m[zero].sum() / math.exp(log_f[zero][0]) / sample.n) if zero.any() else 0.0
        D = np.append(D, d_inf)
    return D


def optimality_gap(
    model: GammaMixtureModel,
    sample: CountSample,
    grid=None,
    infinity: bool | None = None,
) -> float:
    """Lindsay gap ``max_lam D(lam) - 1`` over ``grid`` (default: the model's own atoms).

    ``infinity`` adds the atom at infinity; by default it is included when the
    model carries mass there.
    """
    atoms = model.atoms if grid is None else np.asarray(grid, dtype=np.float64)
    if infinity is None:
        infinity = model.mass_at_infinity > 0.0
    if model.is_degenerate and not infinity and atoms.size == 0:
        return 0.0
    D = gradient_ratios(model, sample, atoms, infinity)
    return float(D.max() - 1.0)
