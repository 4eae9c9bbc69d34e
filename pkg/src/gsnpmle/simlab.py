"""Simulation priors, the coverage replication engine, distances and rate studies.

Priors here are data generators only: a Gamma mixture with per-component
shapes, a lognormal and an inverse-Gaussian mixture. Each exposes ``sample``,
``density``, ``marginal`` (count pmf) and ``upper(eps)`` (a point beyond which
the prior has mass below ``eps``).
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate, optimize
from scipy.special import gammainc, gammaincinv, gammaln
from scipy.stats import invgauss, lognorm

from .coverage import build_rule, contains, garwood_interval
from .mixture import (
    CountSample,
    GammaMixtureModel,
    log_kernel_matrix,
    marginal_pmf,
    nb_log_kernel,
    posterior_density,
    posterior_mean,
    prior_density,
    tail_cutoff,
)
from .npmle import SolverConfig, fit_npmle
from .rng import Rng
from .shape import KappaConfig, select_kappa

__all__ = [
    "SpecError",
    "GammaMixturePrior",
    "LognormalPrior",
    "IGMixturePrior",
    "prior_from_dict",
    "ScenarioSpec",
    "ReplicationResult",
    "StudyResult",
    "RateResult",
    "sample_scenario",
    "tv_prior",
    "wtv",
    "hellinger_sq",
    "run_replication",
    "run_coverage_study",
    "rate_experiment",
    "prediction_rmse",
    "write_replications_csv",
    "write_aggregate_csv",
    "write_rates_csv",
    "worker_count",
]

log = logging.getLogger(__name__)

_TAIL = 1e-8
_MC_STREAM = 1 << 32
_CV_STREAM = 2 << 32


class SpecError(ValueError):
    """Invalid scenario description; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def _gamma_mix_cdf(weights, shapes, rates):
    """Vectorized cdf of sum_j w_j Gamma(shape_j, rate_j)."""
    w, a, b = (np.asarray(v, dtype=np.float64) for v in (weights, shapes, rates))

    def cdf(theta):
        th = np.asarray(theta, dtype=np.float64)
        out = np.sum(w * gammainc(a, b * np.maximum(th, 0.0)[..., None]), axis=-1)
        return np.clip(out, 0.0, 1.0)

    return cdf


def _check_weights(weights, name):
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0 or np.any(w < 0.0) or abs(w.sum() - 1.0) > 1e-12:
        raise SpecError(name, "component weights must be nonnegative and sum to 1")
    return w


def _quad_marginal(density, upper, x):
    """f(x) = int Poi(x | theta) g(theta) dtheta in log-theta coordinates."""
    center = math.log(max(x, 0.5))

    def integrand(u):
        th = math.exp(u)
        return math.exp(x * u - th - math.lgamma(x + 1.0) + u) * density(th)

    lo, hi = -40.0, math.log(upper(1e-14))
    pts = [p for p in (center - 1.0, center, center + 1.0) if lo < p < hi]
    val, _ = integrate.quad(integrand, lo, hi, points=pts or None, limit=400, epsabs=1e-15, epsrel=1e-10)
    return val


@dataclass(frozen=True)
class GammaMixturePrior:
    components: tuple[tuple[float, float, float], ...]  # (weight, shape, rate)

    kind = "gamma_mixture"

    def __post_init__(self):
        comps = tuple((float(w), float(a), float(b)) for w, a, b in self.components)
        _check_weights([c[0] for c in comps], "prior.components")
        if any(a <= 0.0 or b <= 0.0 for _, a, b in comps):
            raise SpecError("prior.components", "shape and rate must be positive")
        object.__setattr__(self, "components", comps)

    def sample(self, n: int, rng: Rng) -> np.ndarray:
        idx = rng.choice([c[0] for c in self.components], n)
        shape = np.array([c[1] for c in self.components])[idx]
        rate = np.array([c[2] for c in self.components])[idx]
        return rng.gamma(shape, rate)

    def density(self, theta):
        th = np.asarray(theta, dtype=np.float64)
        out = np.zeros(th.shape)
        with np.errstate(divide="ignore", invalid="ignore"):
            for w, a, b in self.components:
                if w == 0.0:
                    continue
                logd = a * math.log(b) - math.lgamma(a) + (a - 1.0) * np.log(th) - b * th
                out = out + w * np.where(th > 0.0, np.exp(logd), 0.0)
        return out if out.ndim else float(out)

    def marginal(self, x):
        xs = np.asarray(x, dtype=np.float64)
        out = np.zeros(xs.shape)
        for w, a, b in self.components:
            if w > 0.0:
                out = out + w * np.exp(nb_log_kernel(a, b, xs))
        return out

    def upper(self, eps: float) -> float:
        return max(float(gammaincinv(a, 1.0 - eps) / b) for w, a, b in self.components if w > 0.0)

    def cdf(self, theta):
        w, a, b = (np.array(c) for c in zip(*self.components))
        return _gamma_mix_cdf(w, a, b)(theta)

    def mean(self) -> float:
        return math.fsum(w * a / b for w, a, b in self.components)

    def as_model(self) -> GammaMixtureModel:
        """The equivalent smooth-prior model; needs one common shape."""
        shapes = {a for w, a, b in self.components if w > 0.0}
        if len(shapes) != 1:
            raise ValueError("components do not share a shape")
        live = sorted((b, w) for w, a, b in self.components if w > 0.0)
        rates = np.array([b for b, _ in live])
        weights = np.array([w for _, w in live])
        return GammaMixtureModel.from_components(shapes.pop(), rates, weights)

    def to_dict(self) -> dict:
        return {"gamma_mixture": {"components": [list(c) for c in self.components]}}


@dataclass(frozen=True)
class LognormalPrior:
    mu: float
    sigma: float

    kind = "lognormal"

    def __post_init__(self):
        if not (math.isfinite(self.mu) and self.sigma > 0.0):
            raise SpecError("prior.sigma", "sigma must be positive and mu finite")

    def sample(self, n: int, rng: Rng) -> np.ndarray:
        return rng.lognormal(self.mu, self.sigma, size=n)

    def density(self, theta):
        return lognorm.pdf(theta, self.sigma, scale=math.exp(self.mu))

    def marginal(self, x):
        xs = np.asarray(x, dtype=np.int64)
        return np.vectorize(self._marginal_one, otypes=[float])(xs)

    @lru_cache(maxsize=None)
    def _marginal_one(self, x):
        return _quad_marginal(self.density, self.upper, int(x))

    def upper(self, eps: float) -> float:
        return float(lognorm.isf(eps, self.sigma, scale=math.exp(self.mu)))

    def cdf(self, theta):
        return lognorm.cdf(theta, self.sigma, scale=math.exp(self.mu))

    def mean(self) -> float:
        return math.exp(self.mu + 0.5 * self.sigma**2)

    def to_dict(self) -> dict:
        return {"lognormal": {"mu": self.mu, "sigma": self.sigma}}


@dataclass(frozen=True)
class IGMixturePrior:
    components: tuple[tuple[float, float, float], ...]  # (weight, mu, lam)

    kind = "ig_mixture"

    def __post_init__(self):
        comps = tuple((float(w), float(m), float(l)) for w, m, l in self.components)
        _check_weights([c[0] for c in comps], "prior.components")
        if any(m <= 0.0 or l <= 0.0 for _, m, l in comps):
            raise SpecError("prior.components", "mu and lam must be positive")
        object.__setattr__(self, "components", comps)

    def sample(self, n: int, rng: Rng) -> np.ndarray:
        idx = rng.choice([c[0] for c in self.components], n)
        mu = np.array([c[1] for c in self.components])[idx]
        lam = np.array([c[2] for c in self.components])[idx]
        return rng.inverse_gaussian(mu, lam)

    def density(self, theta):
        th = np.asarray(theta, dtype=np.float64)
        out = np.zeros(th.shape)
        for w, m, l in self.components:
            # IG(mu, lam) is invgauss(mu / lam) scaled by lam
            out = out + w * invgauss.pdf(th, m / l, scale=l)
        return out if out.ndim else float(out)

    def marginal(self, x):
        xs = np.asarray(x, dtype=np.int64)
        return np.vectorize(self._marginal_one, otypes=[float])(xs)

    @lru_cache(maxsize=None)
    def _marginal_one(self, x):
        return _quad_marginal(self.density, self.upper, int(x))

    def upper(self, eps: float) -> float:
        return max(float(invgauss.isf(eps, m / l, scale=l)) for w, m, l in self.components if w > 0.0)

    def cdf(self, theta):
        th = np.asarray(theta, dtype=np.float64)
        return sum(w * invgauss.cdf(th, m / l, scale=l) for w, m, l in self.components)

    def mean(self) -> float:
        return math.fsum(w * m for w, m, _ in self.components)

    def to_dict(self) -> dict:
        return {"ig_mixture": {"components": [list(c) for c in self.components]}}


def prior_from_dict(data) -> GammaMixturePrior | LognormalPrior | IGMixturePrior:
    if not isinstance(data, dict) or len(data) != 1:
        raise SpecError("prior", "expected exactly one of gamma_mixture, lognormal, ig_mixture")
    (kind, body), = data.items()
    try:
        if kind == "gamma_mixture":
            return GammaMixturePrior(tuple(tuple(c) for c in body["components"]))
        if kind == "ig_mixture":
            return IGMixturePrior(tuple(tuple(c) for c in body["components"]))
        if kind == "lognormal":
            return LognormalPrior(float(body["mu"]), float(body["sigma"]))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, SpecError):
            raise
        raise SpecError(f"prior.{kind}", f"malformed parameters ({exc})") from None
    raise SpecError("prior", f"unknown prior kind {kind!r}")


@dataclass
class ScenarioSpec:
    """One simulation setting.

    ``kappa_rule`` is ``("fixed", kappa)`` or ``("neighborhood", KappaConfig)``.
    ``metrics`` may request ``"hellinger"`` and ``"tv"`` per replication.
    """

    prior: object
    n: int
    beta: float = 0.05
    reps: int = 100
    kappa_rule: tuple = ("fixed", 2.0)
    base_seed: int = 0
    mc_draws: int = 200_000
    metrics: tuple[str, ...] = ()

    def __post_init__(self):
        if not isinstance(self.n, (int, np.integer)) or self.n < 1:
            raise SpecError("n", "must be a positive integer")
        if not 0.0 < self.beta < 1.0:
            raise SpecError("beta", "must lie in (0, 1)")
        if not isinstance(self.reps, (int, np.integer)) or self.reps < 1:
            raise SpecError("reps", "must be a positive integer")
        if not isinstance(self.mc_draws, (int, np.integer)) or self.mc_draws < 1:
            raise SpecError("mc_draws", "must be a positive integer")
        if not isinstance(self.base_seed, (int, np.integer)) or not 0 <= self.base_seed < 1 << 64:
            raise SpecError("base_seed", "must be an unsigned 64-bit integer")
        mode, value = self.kappa_rule
        if mode == "fixed":
            if not (isinstance(value, (int, float)) and value > 0.0):
                raise SpecError("kappa_rule.fixed", "must be a positive number")
        elif mode == "neighborhood":
            if not isinstance(value, KappaConfig):
                raise SpecError("kappa_rule.neighborhood", "must be a KappaConfig")
        else:
            raise SpecError("kappa_rule", f"unknown mode {mode!r}")
        bad = set(self.metrics) - {"hellinger", "tv"}
        if bad:
            raise SpecError("metrics", f"unknown metrics {sorted(bad)}")

    @classmethod
    def from_dict(cls, data: dict) -> ScenarioSpec:
        if not isinstance(data, dict):
            raise SpecError("spec", "expected a JSON object")
        known = {"prior", "n", "beta", "reps", "kappa_rule", "base_seed", "mc_draws", "metrics"}
        unknown = set(data) - known
        if unknown:
            raise SpecError(sorted(unknown)[0], "unknown field")
        for name in ("prior", "n"):
            if name not in data:
                raise SpecError(name, "missing required field")
        kwargs = {k: data[k] for k in ("n", "beta", "reps", "base_seed", "mc_draws") if k in data}
        kwargs["prior"] = prior_from_dict(data["prior"])
        kwargs["metrics"] = tuple(data.get("metrics", ()))
        rule = data.get("kappa_rule", {"fixed": 2.0})
        if not isinstance(rule, dict) or len(rule) != 1:
            raise SpecError("kappa_rule", "expected {'fixed': k} or {'neighborhood': {...}}")
        (mode, body), = rule.items()
        if mode == "neighborhood":
            try:
                body = KappaConfig(**(body or {}))
            except (TypeError, ValueError) as exc:
                raise SpecError("kappa_rule.neighborhood", str(exc)) from None
        kwargs["kappa_rule"] = (mode, body)
        return cls(**kwargs)

    @classmethod
    def from_json(cls, text: str) -> ScenarioSpec:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SpecError("spec", f"invalid JSON ({exc})") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        mode, value = self.kappa_rule
        rule = {"fixed": value} if mode == "fixed" else {"neighborhood": asdict(value)}
        return {
            "prior": self.prior.to_dict(),
            "n": int(self.n),
            "beta": self.beta,
            "reps": int(self.reps),
            "kappa_rule": rule,
            "base_seed": int(self.base_seed),
            "mc_draws": int(self.mc_draws),
            "metrics": list(self.metrics),
        }


@dataclass
class ReplicationResult:
    rep_id: int
    coverage_opt: float
    length_opt: float
    coverage_garwood: float
    length_garwood: float
    kappa_hat: float
    hellinger_sq: float | None = None
    tv_prior: float | None = None


@dataclass
class StudyResult:
    replications: list[ReplicationResult]
    failures: list[tuple[int, str]] = field(default_factory=list)

    COLUMNS = ("coverage_opt", "length_opt", "coverage_garwood", "length_garwood", "kappa_hat")

    @property
    def n_failed(self) -> int:
        return len(self.failures)

    def column(self, name) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.replications], dtype=np.float64)

    def aggregate(self) -> dict[str, dict[str, float]]:
        out = {}
        names = list(self.COLUMNS)
        for extra in ("hellinger_sq", "tv_prior"):
            if self.replications and getattr(self.replications[0], extra) is not None:
                names.append(extra)
        for name in names:
            col = self.column(name)
            out[name] = {
                "mean": float(col.mean()) if col.size else math.nan,
                "sd": float(col.std(ddof=1)) if col.size > 1 else math.nan,
            }
        return out


def sample_scenario(spec: ScenarioSpec, rng: Rng) -> tuple[np.ndarray, CountSample]:
    thetas = spec.prior.sample(spec.n, rng)
    return thetas, CountSample(rng.poisson(thetas))


def _finite_part(model: GammaMixtureModel):
    keep = model.weights > 0.0
    w = model.weights[keep]
    return w / w.sum(), model.atoms[keep]


def _model_cdf(model: GammaMixtureModel):
    w, lam = _finite_part(model)
    return _gamma_mix_cdf(w, np.full(lam.size, model.kappa), lam)


def _posterior_cdf(model: GammaMixtureModel, x: int):
    # the posterior given x mixes Gamma(x + kappa, lam_j + 1) with weights w_j r(x | lam_j)
    w, lam = _finite_part(model)
    logw = np.log(w) + log_kernel_matrix(model.kappa, lam, np.array([x]))[0]
    post = np.exp(logw - logw.max())
    return _gamma_mix_cdf(post / post.sum(), np.full(lam.size, x + model.kappa), lam + 1.0)


def _density_and_upper(obj):
    """(density, upper(eps) or None, cdf or None) for a model, prior or callable."""
    if isinstance(obj, GammaMixtureModel):
        if obj.mass_at_infinity > 0.0:
            raise ValueError("prior density needs a model without mass at infinity")
        kappa, rate = obj.kappa, obj.lam_min
        return (
            (lambda t: prior_density(obj, t)),
            (lambda eps: float(gammaincinv(kappa, 1.0 - eps) / rate)),
            _model_cdf(obj),
        )
    if hasattr(obj, "density") and hasattr(obj, "upper"):
        return obj.density, obj.upper, getattr(obj, "cdf", None)
    if callable(obj):
        return obj, None, None
    raise TypeError("expected a model, a prior or a density callable")


def _search_upper(density) -> float:
    upper = 1.0
    while integrate.quad(density, upper, math.inf, limit=200)[0] > _TAIL and upper < 1e12:
        upper *= 2.0
    return upper


def _sign_cuts(g1, g2, lower, upper, grid_points):
    """Grid endpoints plus the sign changes of g1 - g2 located by root finding."""
    if lower > 0.0:
        grid = np.geomspace(lower, upper, grid_points)
    else:
        grid = np.concatenate([[0.0], np.geomspace(upper * 1e-12, upper, grid_points)])
    with np.errstate(all="ignore"):
        diff = np.asarray(g1(grid), dtype=np.float64) - np.asarray(g2(grid), dtype=np.float64)
    diff = np.nan_to_num(diff, nan=0.0, posinf=1e300, neginf=-1e300)
    sign = np.sign(diff)
    cuts = [grid[0]]
    h = lambda t: float(g1(t)) - float(g2(t))
    for i in np.flatnonzero(sign[1:] * sign[:-1] < 0.0):
        try:
            cuts.append(optimize.brentq(h, grid[i], grid[i + 1], xtol=1e-14, rtol=1e-12))
        except ValueError:
            cuts.append(0.5 * (grid[i] + grid[i + 1]))
    cuts.append(grid[-1])
    return grid, cuts


def _l1_pieces(g1, g2, lower, upper, cdf1=None, cdf2=None, grid_points=4000):
    """int |g1 - g2| over [lower, upper], splitting at sign changes of g1 - g2.

    With both cdfs supplied each piece is a difference of cdf increments, and
    the outermost pieces extend to 0 and infinity; otherwise quadrature.
    """
    grid, cuts = _sign_cuts(g1, g2, lower, upper, grid_points)
    if cdf1 is not None and cdf2 is not None:
        inner = np.asarray(cuts[1:-1], dtype=np.float64)
        F1 = np.concatenate([[0.0], cdf1(inner), [1.0]])
        F2 = np.concatenate([[0.0], cdf2(inner), [1.0]])
        return float(np.sum(np.abs(np.diff(F1) - np.diff(F2))))
    total = 0.0
    for a, b in zip(cuts[:-1], cuts[1:]):
        if b <= a:
            continue
        inner = grid[(grid > a) & (grid < b)]
        # coarse breakpoints keep quad from missing narrow components
        pts = inner[:: max(1, inner.size // 40)][:48] if inner.size else None
        val, _ = integrate.quad(
            lambda t: float(g1(t)) - float(g2(t)), a, b, points=pts, limit=500, epsabs=1e-9, epsrel=1e-9
        )
        total += abs(val)
    return total


def tv_prior(g1, g2, upper: float | None = None) -> float:
    """Half the L1 distance between two prior densities on (0, inf).

    ``g1`` and ``g2`` are GammaMixtureModel objects, simulation priors or
    plain density callables. Sign changes of the difference are searched up
    to a point where both tails are below 1e-8; when both sides have a cdf
    the pieces are exact cdf increments, otherwise they are integrated.
    """
    d1, u1, c1 = _density_and_upper(g1)
    d2, u2, c2 = _density_and_upper(g2)
    if upper is None:
        ends = [u(_TAIL) if u is not None else _search_upper(d) for d, u in ((d1, u1), (d2, u2))]
        upper = max(ends)
    value = 0.5 * _l1_pieces(d1, d2, 0.0, upper, c1, c2)
    return min(1.0, max(0.0, value))


def _posterior_upper(model: GammaMixtureModel, x: int) -> float:
    return float(gammaincinv(x + model.kappa, 1.0 - _TAIL) / (model.lam_min + 1.0))


def wtv(model_hat: GammaMixtureModel, model_true: GammaMixtureModel) -> float:
    """sum_x TV(posterior_hat(.|x), posterior_true(.|x)) f_true(x) up to the f_true tail."""
    for m in (model_hat, model_true):
        if m.mass_at_infinity > 0.0:
            raise ValueError("wtv needs models without mass at infinity")
    x_max = tail_cutoff(model_true, _TAIL)
    weights = marginal_pmf(model_true, np.arange(x_max + 1))
    total = 0.0
    for x in range(x_max + 1):
        upper = max(_posterior_upper(model_hat, x), _posterior_upper(model_true, x))
        tv = 0.5 * _l1_pieces(
            lambda t: posterior_density(model_hat, t, x),
            lambda t: posterior_density(model_true, t, x),
            0.0,
            upper,
            _posterior_cdf(model_hat, x),
            _posterior_cdf(model_true, x),
        )
        total += min(1.0, tv) * weights[x]
    return float(total)


def _pmf_callable(obj):
    if isinstance(obj, GammaMixtureModel):
        return lambda xs: marginal_pmf(obj, xs)
    if hasattr(obj, "marginal"):
        return obj.marginal
    if callable(obj):
        return obj
    raise TypeError("expected a model, a prior or a pmf callable")


def hellinger_sq(f1, f2, tail: float = 1e-12, max_terms: int = 1 << 22) -> float:
    """Squared Hellinger distance 0.5 * sum_x (sqrt f1(x) - sqrt f2(x))^2.

    Terms are added in blocks until both pmfs have accumulated mass 1 - tail.
    """
    p1, p2 = _pmf_callable(f1), _pmf_callable(f2)
    total = mass1 = mass2 = 0.0
    start, block = 0, 256
    while start < max_terms:
        xs = np.arange(start, start + block)
        a = np.clip(np.asarray(p1(xs), dtype=np.float64), 0.0, None)
        b = np.clip(np.asarray(p2(xs), dtype=np.float64), 0.0, None)
        total += 0.5 * float(np.sum((np.sqrt(a) - np.sqrt(b)) ** 2))
        mass1 += float(a.sum())
        mass2 += float(b.sum())
        start += block
        if mass1 >= 1.0 - tail and mass2 >= 1.0 - tail:
            break
        block = min(block * 2, 1 << 16)
    return min(1.0, max(0.0, total))


def _resolve_kappa(spec: ScenarioSpec, counts: CountSample, rep_id: int) -> float:
    mode, value = spec.kappa_rule
    if mode == "fixed":
        return float(value)
    rng = Rng(spec.base_seed, _CV_STREAM + rep_id)
    return select_kappa(counts, value.eta, value, rng, full_profile=False).kappa_hat


def _garwood_columns(counts: np.ndarray, thetas: np.ndarray, beta: float):
    uniq, inverse = np.unique(counts, return_inverse=True)
    bounds = np.array([garwood_interval(int(x), beta) for x in uniq])
    lo, hi = bounds[inverse, 0], bounds[inverse, 1]
    covered = (thetas >= lo) & (thetas <= hi)
    return float(covered.mean()), float((hi - lo).mean())


def run_replication(spec: ScenarioSpec, rep_id: int) -> ReplicationResult:
    """One seeded replication; data, threshold draws and CV folds use disjoint streams."""
    thetas, counts = sample_scenario(spec, Rng(spec.base_seed, rep_id))
    kappa = _resolve_kappa(spec, counts, rep_id)
    model, _ = fit_npmle(counts, kappa, SolverConfig(allow_infinity_atom=False))
    rule = build_rule(
        model, spec.beta, spec.mc_draws, Rng(spec.base_seed, _MC_STREAM + rep_id), x_max=counts.max_count
    )
    x = counts.counts
    coverage_opt = float(contains(model, rule.threshold, x, thetas).mean())
    length_opt = float(rule.lengths(x).mean())
    coverage_g, length_g = _garwood_columns(x, thetas, spec.beta)
    result = ReplicationResult(rep_id, coverage_opt, length_opt, coverage_g, length_g, kappa)
    if "hellinger" in spec.metrics:
        result.hellinger_sq = hellinger_sq(model, spec.prior)
    if "tv" in spec.metrics:
        result.tv_prior = tv_prior(model, spec.prior)
    return result


def _safe_replication(args):
    spec, rep_id = args
    try:
        return run_replication(spec, rep_id)
    except Exception as exc:  # recorded and reported, never silently dropped
        return (rep_id, f"{type(exc).__name__}: {exc}")


def worker_count(workers: int | None = None) -> int:
    """Workers from the argument or GSNPMLE_THREADS (0 means one per CPU)."""
    if workers is None:
        raw = os.environ.get("GSNPMLE_THREADS", "1")
        try:
            workers = int(raw)
        except ValueError:
            raise ValueError(f"GSNPMLE_THREADS must be an integer, got {raw!r}") from None
    if workers < 0:
        raise ValueError("worker count must be nonnegative")
    return workers or (os.cpu_count() or 1)


def _map_ordered(fn, items, workers):
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def run_coverage_study(spec: ScenarioSpec, workers: int | None = None, rep_ids=None) -> StudyResult:
    """Run all replications and fold them in rep_id order."""
    ids = list(range(spec.reps)) if rep_ids is None else sorted(int(r) for r in rep_ids)
    outcomes = _map_ordered(_safe_replication, [(spec, r) for r in ids], worker_count(workers))
    study = StudyResult([])
    for out in outcomes:
        if isinstance(out, ReplicationResult):
            study.replications.append(out)
        else:
            log.warning("replication %d failed: %s", out[0], out[1])
            study.failures.append(out)
    return study


@dataclass
class RateResult:
    slope: float
    intercept: float
    n_list: list[int]
    mean_tv: list[float]
    records: list[tuple[int, int, float]]  # (n, rep, tv)


def _rate_point(args):
    prior, kappa, n, rep, seed, stream = args
    rng = Rng(seed, stream)
    thetas = prior.sample(n, rng)
    counts = CountSample(rng.poisson(thetas))
    model, _ = fit_npmle(counts, kappa, SolverConfig(allow_infinity_atom=False))
    return n, rep, tv_prior(model, prior)


def rate_experiment(prior, kappa: float, n_list, reps: int, rng: Rng, workers: int | None = None) -> RateResult:
    """TV(g_hat, g*) across sample sizes and the least-squares slope of log TV on log n.

    Replication ``(i, rep)`` draws from stream ``rng.stream_id + i * reps + rep``
    under ``rng.seed``; fits use the plain grid without support bounds.
    """
    if not isinstance(prior, GammaMixturePrior):
        raise TypeError("rate_experiment needs a Gamma-mixture prior")
    n_list = [int(n) for n in n_list]
    if len(n_list) < 2 or reps < 1:
        raise ValueError("need at least two sample sizes and one replication")
    jobs = [
        (prior, float(kappa), n, rep, rng.seed, rng.stream_id + i * reps + rep)
        for i, n in enumerate(n_list)
        for rep in range(reps)
    ]
    records = _map_ordered(_rate_point, jobs, worker_count(workers))
    ln_n = np.log([r[0] for r in records])
    ln_tv = np.log(np.maximum([r[2] for r in records], 1e-300))
    slope, intercept = np.polyfit(ln_n, ln_tv, 1)
    means = [float(np.mean([r[2] for r in records if r[0] == n])) for n in n_list]
    return RateResult(float(slope), float(intercept), n_list, means, records)


def prediction_rmse(train: CountSample, future, model: GammaMixtureModel) -> float:
    """Root mean squared error of posterior-mean predictions of the future counts."""
    future = np.asarray(future, dtype=np.float64).reshape(-1)
    if future.size != train.n:
        raise ValueError("train and future must have the same length")
    pred = posterior_mean(model, train.counts)
    return float(np.sqrt(np.mean((pred - future) ** 2)))


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_replications_csv(path, study: StudyResult) -> None:
    cols = ["rep_id", *StudyResult.COLUMNS]
    extras = [c for c in ("hellinger_sq", "tv_prior")
              if study.replications and getattr(study.replications[0], c) is not None]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols + extras + ["status"])
        rows = [(r.rep_id, [getattr(r, c) for c in cols] + [getattr(r, c) for c in extras], "ok")
                for r in study.replications]
        rows += [(rep, [rep] + [None] * (len(cols) - 1 + len(extras)), msg) for rep, msg in study.failures]
        for _, values, status in sorted(rows, key=lambda t: t[0]):
            writer.writerow([_fmt(v) for v in values] + [status])


def write_aggregate_csv(path, study: StudyResult) -> None:
    agg = study.aggregate()
    names = list(agg)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["statistic", *names, "n_ok", "n_failed"])
        for stat in ("mean", "sd"):
            writer.writerow([stat, *(_fmt(agg[c][stat]) for c in names),
                             len(study.replications), study.n_failed])


def write_rates_csv(path, result: RateResult) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["n", "rep", "tv_prior"])
        for n, rep, tv in result.records:
            writer.writerow([n, rep, _fmt(tv)])
        writer.writerow([])
        writer.writerow(["n", "mean_tv_prior"])
        for n, m in zip(result.n_list, result.mean_tv):
            writer.writerow([n, _fmt(m)])
        writer.writerow([])
        writer.writerow(["slope", "intercept"])
        writer.writerow([_fmt(result.slope), _fmt(result.intercept)])
