"""Special functions: log-gamma, regularized lower incomplete gamma, chi-square quantile."""

import math

__all__ = ["log_gamma", "reg_lower_gamma", "chi_square_quantile"]

_EPS = 1e-16
_MAX_ITER = 100000
_TINY = 1e-300


def log_gamma(x):
    """Natural log of the gamma function for x > 0.

    Thin wrapper over the C library ``lgamma``; raises ValueError outside the
    domain instead of returning a pole value.
    """
    x = float(x)
    if not x > 0.0 or not math.isfinite(x):
        raise ValueError(f"log_gamma requires a finite x > 0, got {x!r}")
    return math.lgamma(x)


def _series(s, x):
    # P(s, x) by the power series, valid for x < s + 1
    term = 1.0 / s
    total = term
    ap = s
    for _ in range(_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + s * math.log(x) - math.lgamma(s))


def _continued_fraction(s, x):
    # Q(s, x) by the modified Lentz continued fraction, valid for x >= s + 1
    b = x + 1.0 - s
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - s)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return math.exp(-x + s * math.log(x) - math.lgamma(s)) * h


def reg_lower_gamma(s, x):
    """Regularized lower incomplete gamma P(s, x) = gamma(s, x) / Gamma(s)."""
    s = float(s)
    x = float(x)
    if not s > 0.0 or not math.isfinite(s):
        raise ValueError(f"reg_lower_gamma requires s > 0, got {s!r}")
    if not x >= 0.0:
        raise ValueError(f"reg_lower_gamma requires x >= 0, got {x!r}")
    if x == 0.0:
        return 0.0
    if math.isinf(x):
        return 1.0
    if x < s + 1.0:
        return min(1.0, _series(s, x))
    return max(0.0, 1.0 - _continued_fraction(s, x))


def _chi_square_pdf(q, df):
    k = 0.5 * df
    if q <= 0.0:
        return math.inf if k < 1.0 else (0.5 if k == 1.0 else 0.0)
    return 0.5 * math.exp((k - 1.0) * math.log(0.5 * q) - 0.5 * q - math.lgamma(k))


def chi_square_quantile(p, df):
    """Quantile of the chi-square law with ``df`` degrees of freedom.

    Safeguarded Newton iteration on ``reg_lower_gamma(df/2, q/2) = p``: the
    root is kept bracketed and any Newton step leaving the bracket is replaced
    by bisection.
    """
    p = float(p)
    df = float(df)
    if not df > 0.0 or not math.isfinite(df):
        raise ValueError(f"df must be positive, got {df!r}")
    if not 0.0 <= p < 1.0:
        raise ValueError(f"p must lie in [0, 1), got {p!r}")
    if p == 0.0:
        return 0.0
    k = 0.5 * df

    def cdf(q):
        return reg_lower_gamma(k, 0.5 * q)

    lo, hi = 0.0, max(df, 1.0)
    while cdf(hi) < p:
        lo, hi = hi, 2.0 * hi
    # small-q series P(k, x) ~ x^k / Gamma(k + 1) gives a start for tiny quantiles
    guess = 2.0 * math.exp((math.log(p) + math.lgamma(k + 1.0)) / k)
    q = guess if lo < guess < hi else 0.5 * (lo + hi)
    for _ in range(500):
        err = cdf(q) - p
        if abs(err) <= 1e-15:
            break
        if err > 0.0:
            hi = q
        else:
            lo = q
        dens = _chi_square_pdf(q, df)
        step = err / dens if dens > 0.0 and math.isfinite(dens) else math.inf
        candidate = q - step
        if not lo < candidate < hi:
            candidate = 0.5 * (lo + hi)
        if hi - lo <= 1e-15 * hi:
            q = candidate
            break
        q = candidate
    return q
