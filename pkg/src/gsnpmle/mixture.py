"""Gamma-mixture model for Poisson rates.

The hierarchy is ``lambda ~ H``, ``theta | lambda ~ Gamma(kappa, lambda)``
(shape-rate) and ``X | theta ~ Poisson(theta)``. Integrating out ``theta``
gives a negative binomial kernel in ``lambda``, so every quantity below is a
finite sum over the atoms of ``H``. All accumulation happens in log space.

An atom of ``H`` at infinity is a point mass of the prior at ``theta = 0``;
it contributes to the count pmf at ``x = 0`` only and is excluded from the
prior and posterior densities, which describe the absolutely continuous part.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable

import numpy as np
from scipy.special import gammaln, logsumexp

from ._backend import core

__all__ = [
    "MixingMeasure",
    "GammaMixtureModel",
    "CountSample",
    "EvaluationError",
    "nb_log_kernel",
    "log_kernel_matrix",
    "log_marginal_pmf",
    "marginal_pmf",
    "tail_cutoff",
    "prior_density",
    "posterior_log_density",
    "posterior_density",
    "posterior_mean",
    "alpha_star",
    "model_to_json",
    "model_from_json",
    "save_model",
    "load_model",
]

_SUM_TOL = 1e-12


class EvaluationError(ValueError):
    """A density or mean was requested at a count with zero marginal mass."""


@dataclass(frozen=True, eq=False)
class MixingMeasure:
    """Discrete probability measure on (0, inf] over Gamma rate parameters."""

    atoms: np.ndarray
    weights: np.ndarray
    mass_at_infinity: float = 0.0

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=np.float64).reshape(-1)
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        mass_inf = float(self.mass_at_infinity)
        if atoms.shape != weights.shape:
            raise ValueError("atoms and weights must have the same length")
        if not np.all(np.isfinite(atoms)) or np.any(atoms <= 0.0):
            raise ValueError("atoms must be finite and positive")
        if atoms.size > 1 and np.any(np.diff(atoms) <= 0.0):
            raise ValueError("atoms must be strictly increasing")
        if np.any(weights < 0.0) or not np.all(np.isfinite(weights)) or mass_inf < 0.0:
            raise ValueError("weights must be nonnegative")
        total = math.fsum(weights) + mass_inf
        if abs(total - 1.0) > _SUM_TOL:
            raise ValueError(f"weights sum to {total!r}, not 1")
        atoms.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "mass_at_infinity", mass_inf)

    @classmethod
    def point_mass(cls, lam: float) -> MixingMeasure:
        if math.isinf(lam):
            return cls(np.empty(0), np.empty(0), 1.0)
        return cls(np.array([lam]), np.array([1.0]))

    @classmethod
    def normalized(cls, atoms, weights, mass_at_infinity=0.0) -> MixingMeasure:
        """Sort atoms, merge duplicates, drop zero weights and renormalize."""
        atoms = np.asarray(atoms, dtype=np.float64)
        weights = np.asarray(weights, dtype=np.float64)
        keep = weights > 0.0
        atoms, weights = atoms[keep], weights[keep]
        uniq, inverse = np.unique(atoms, return_inverse=True)
        merged = np.zeros(uniq.size)
        np.add.at(merged, inverse, weights)
        total = merged.sum() + mass_at_infinity
        return cls(uniq, merged / total, mass_at_infinity / total)

    @property
    def support_size(self) -> int:
        return int(np.count_nonzero(self.weights)) + int(self.mass_at_infinity > 0.0)


@dataclass(frozen=True, eq=False)
class GammaMixtureModel:
    """Shape ``kappa`` plus a mixing measure over Gamma rates."""

    kappa: float
    mixing: MixingMeasure
    n_fit: int = 0
    loglik: float | None = None
    # log of w_j * lam_j**kappa / Gamma(kappa) over the positive-weight atoms
    _logc: np.ndarray = field(init=False, repr=False)
    _rates: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        kappa = float(self.kappa)
        if not kappa > 0.0 or not math.isfinite(kappa):
            raise ValueError(f"kappa must be positive, got {kappa!r}")
        object.__setattr__(self, "kappa", kappa)
        live = self.mixing.weights > 0.0
        lam = self.mixing.atoms[live]
        logc = np.log(self.mixing.weights[live]) + kappa * np.log(lam) - gammaln(kappa)
        object.__setattr__(self, "_logc", np.ascontiguousarray(logc))
        object.__setattr__(self, "_rates", np.ascontiguousarray(lam))

    @classmethod
    def single(cls, kappa: float, lam: float) -> GammaMixtureModel:
        return cls(kappa, MixingMeasure.point_mass(lam))

    @classmethod
    def from_components(cls, kappa, atoms, weights, mass_at_infinity=0.0):
        return cls(kappa, MixingMeasure.normalized(atoms, weights, mass_at_infinity))

    @property
    def atoms(self) -> np.ndarray:
        return self.mixing.atoms

    @property
    def weights(self) -> np.ndarray:
        return self.mixing.weights

    @property
    def mass_at_infinity(self) -> float:
        return self.mixing.mass_at_infinity

    @property
    def is_degenerate(self) -> bool:
        """True when all prior mass sits at theta = 0."""
        return self._rates.size == 0

    @property
    def lam_min(self) -> float:
        return float(self._rates[0]) if self._rates.size else math.inf

    def fingerprint(self) -> str:
        return hashlib.sha256(model_to_json(self).encode()).hexdigest()[:16]


class CountSample:
    """Observed counts with cached distinct values and empirical pmf/cdf."""

    def __init__(self, counts: Iterable[int]):
        arr = np.asarray(list(counts) if not isinstance(counts, np.ndarray) else counts)
        if arr.size == 0:
            raise ValueError("a count sample needs at least one observation")
        if arr.dtype.kind == "f":
            if not np.all(np.isfinite(arr)) or np.any(arr != np.floor(arr)):
                raise ValueError("counts must be integers")
        elif arr.dtype.kind not in "iu":
            raise ValueError("counts must be integers")
        arr = arr.astype(np.int64).reshape(-1)
        if np.any(arr < 0):
            raise ValueError("counts must be nonnegative")
        self.counts = arr
        self.counts.setflags(write=False)
        self.n = int(arr.size)
        self.max_count = int(arr.max())
        self.values, mult = np.unique(arr, return_counts=True)
        self.multiplicity = mult.astype(np.int64)
        self._freq = np.bincount(arr, minlength=self.max_count + 1)

    def __len__(self):
        return self.n

    def __repr__(self):
        return f"CountSample(n={self.n}, max_count={self.max_count})"

    @property
    def empirical_pmf(self) -> dict[int, Fraction]:
        return {int(v): Fraction(int(m), self.n) for v, m in zip(self.values, self.multiplicity)}

    @property
    def empirical_cdf(self) -> np.ndarray:
        """Empirical cdf on 0..max_count; integer cumsum keeps the last entry exactly 1."""
        return np.cumsum(self._freq) / self.n

    def subset(self, index) -> CountSample:
        return CountSample(self.counts[index])


def nb_log_kernel(kappa, lam, x):
    """log r(x | kappa, lam) of the negative binomial kernel, broadcasting.

    ``lam = inf`` gives the point mass at zero: 0 at x = 0 and -inf elsewhere.
    """
    kappa = np.asarray(kappa, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    finite = np.isfinite(lam)
    safe = np.where(finite, lam, 1.0)
    with np.errstate(invalid="ignore"):
        out = (
            gammaln(x + kappa)
            - gammaln(x + 1.0)
            - gammaln(kappa)
            - x * np.log1p(safe)
            - kappa * np.log1p(1.0 / safe)
        )
        out = np.where(finite, out, np.where(x == 0, 0.0, -np.inf))
    return out[()] if out.ndim == 0 else out


def log_kernel_matrix(kappa: float, atoms, xs) -> np.ndarray:
    """Matrix of log r(x_i | kappa, lam_j), rows over counts, columns over atoms."""
    xs = np.asarray(xs, dtype=np.float64)[:, None]
    atoms = np.asarray(atoms, dtype=np.float64)[None, :]
    return np.asarray(nb_log_kernel(kappa, atoms, xs))


def log_marginal_pmf(model: GammaMixtureModel, x, finite_only: bool = False):
    """log f(x) for an integer or array of counts."""
    xs = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if model._rates.size:
        logk = log_kernel_matrix(model.kappa, model._rates, xs)
        out = logsumexp(logk + np.log(model.weights[model.weights > 0.0])[None, :], axis=1)
    else:
        out = np.full(xs.shape, -np.inf)
    if not finite_only and model.mass_at_infinity > 0.0:
        zero = xs == 0
        out[zero] = np.logaddexp(out[zero], math.log(model.mass_at_infinity))
    return out if np.ndim(x) else float(out[0])


def marginal_pmf(model: GammaMixtureModel, x):
    """Marginal count pmf f(x) = sum_j w_j r(x | lam_j) + mass_at_infinity * 1(x = 0)."""
    return np.exp(log_marginal_pmf(model, x))


def tail_cutoff(model: GammaMixtureModel, eps: float = 1e-12) -> int:
    """Smallest X with sum_{x <= X} f(x) >= 1 - eps, located by doubling."""
    upper = 64
    while True:
        cum = np.cumsum(marginal_pmf(model, np.arange(upper + 1)))
        hit = np.flatnonzero(cum >= 1.0 - eps)
        if hit.size:
            return int(hit[0])
        if upper > 1 << 26:
            raise RuntimeError("marginal tail does not reach 1 - eps")
        upper *= 2


def _log_mixture_part(model, theta):
    return core.mixture_logsumexp(theta, model._logc, model._rates)


def prior_density(model: GammaMixtureModel, theta):
    """Smooth prior density g(theta) = sum_j w_j Gamma(theta; kappa, lam_j)."""
    th = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    if model.is_degenerate:
        out = np.zeros(th.shape)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            power = np.where(th > 0.0, (model.kappa - 1.0) * np.log(th), 0.0)
            if model.kappa < 1.0:
                power = np.where(th > 0.0, power, np.inf)
            elif model.kappa > 1.0:
                power = np.where(th > 0.0, power, -np.inf)
            out = np.exp(power + _log_mixture_part(model, np.ascontiguousarray(th)))
    return out if np.ndim(theta) else float(out[0])


def posterior_log_density(model: GammaMixtureModel, theta, x):
    """log pi(theta | x), normalized against the finite-atom part of f(x).

    ``theta`` and ``x`` broadcast against each other. Raises EvaluationError
    when the finite-atom marginal vanishes at some requested x.
    """
    th, xs = np.broadcast_arrays(
        np.asarray(theta, dtype=np.float64), np.asarray(x, dtype=np.float64)
    )
    shape = th.shape
    th = np.ascontiguousarray(th.reshape(-1))
    xs = xs.reshape(-1)
    uniq, inverse = np.unique(xs, return_inverse=True)
    log_f = log_marginal_pmf(model, uniq, finite_only=True)
    if np.any(~np.isfinite(log_f)):
        bad = uniq[~np.isfinite(log_f)]
        raise EvaluationError(f"marginal pmf is zero at x = {int(bad[0])}")
    a = xs + model.kappa - 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        power = np.where(a == 0.0, 0.0, a * np.log(th))
    out = (
        power
        + _log_mixture_part(model, th)
        - th
        - gammaln(xs + 1.0)
        - log_f[inverse]
    )
    out = out.reshape(shape)
    return out[()] if out.ndim == 0 else out


def posterior_density(model: GammaMixtureModel, theta, x):
    return np.exp(posterior_log_density(model, theta, x))


def posterior_mean(model: GammaMixtureModel, x):
    """Posterior mean of theta by the Robbins ratio (x + 1) f(x + 1) / f(x)."""
    xs = np.atleast_1d(np.asarray(x, dtype=np.int64))
    if model.is_degenerate:
        out = np.zeros(xs.shape)
    else:
        lf = log_marginal_pmf(model, xs)
        if np.any(~np.isfinite(lf)):
            raise EvaluationError(f"marginal pmf is zero at x = {int(xs[~np.isfinite(lf)][0])}")
        out = (xs + 1.0) * np.exp(log_marginal_pmf(model, xs + 1) - lf)
    return out if np.ndim(x) else float(out[0])


def alpha_star(L: float, U: float) -> float:
    """Rate exponent of the smooth-NPMLE total-variation bound on [L, U]."""
    if not (0.0 < L < U and math.isfinite(U)):
        raise ValueError("alpha_star requires 0 < L < U < inf")
    tau = min(0.25, math.e * L * (1.0 + L) / (4.0 * (U - L) * (1.0 + L + U)))
    log_inv_rho = tau * math.log(2.0)
    log_b = (4.0 + 3.0 * L + 3.0 * U + 2.0 * L * U) / (U - L)
    return log_inv_rho / (2.0 * (log_b + log_inv_rho))


def model_to_json(model: GammaMixtureModel) -> str:
    payload = {
        "kappa": model.kappa,
        "atoms": [float(a) for a in model.atoms],
        "weights": [float(w) for w in model.weights],
        "mass_at_infinity": model.mass_at_infinity,
        "loglik": None if model.loglik is None else float(model.loglik),
        "n_fit": int(model.n_fit),
    }
    return json.dumps(payload, indent=2) + "\n"


def model_from_json(text: str) -> GammaMixtureModel:
    data = json.loads(text)
    required = {"kappa", "atoms", "weights", "mass_at_infinity", "loglik", "n_fit"}
    missing = required - data.keys()
    if missing:
        raise ValueError(f"model JSON missing fields: {sorted(missing)}")
    mixing = MixingMeasure(
        np.asarray(data["atoms"], dtype=np.float64),
        np.asarray(data["weights"], dtype=np.float64),
        float(data["mass_at_infinity"]),
    )
    loglik = data["loglik"]
    return GammaMixtureModel(
        float(data["kappa"]),
        mixing,
        n_fit=int(data["n_fit"]),
        loglik=None if loglik is None else float(loglik),
    )


def save_model(model: GammaMixtureModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(model_to_json(model))


def load_model(path) -> GammaMixtureModel:
    with open(path, encoding="utf-8") as fh:
        return model_from_json(fh.read())
