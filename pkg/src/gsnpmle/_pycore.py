"""Numpy fallback for the compiled kernels in ``_core.pyx``.

Each function consumes the per-slot uniform sequence in the same order as its
compiled twin. Rejection loops are vectorized by keeping the set of draws that
are still pending and the index of the next uniform each of them will read.
"""

import math

import numpy as np
from scipy.special import gammaln

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = 0x9E3779B9
_W1 = 0xBB67AE85
_MASK32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)
_INV_2_53 = 1.0 / 9007199254740992.0
_TWO_PI = 6.283185307179586


def philox4x32(ctr, key):
    """Philox4x32-10 on a (4, n) uint64 array of 32-bit counter words."""
    c0, c1, c2, c3 = (np.asarray(w, dtype=np.uint64) for w in ctr)
    k0, k1 = int(key[0]) & 0xFFFFFFFF, int(key[1]) & 0xFFFFFFFF
    for r in range(10):
        if r > 0:
            k0 = (k0 + _W0) & 0xFFFFFFFF
            k1 = (k1 + _W1) & 0xFFFFFFFF
        p0 = _M0 * c0
        p1 = _M1 * c2
        c0, c1, c2, c3 = (
            (p1 >> _SHIFT32) ^ c1 ^ np.uint64(k0),
            p1 & _MASK32,
            (p0 >> _SHIFT32) ^ c3 ^ np.uint64(k1),
            p0 & _MASK32,
        )
    return c0, c1, c2, c3


def _uniform(seed, stream, slots, k):
    slots = np.asarray(slots, dtype=np.uint64)
    k = np.broadcast_to(np.asarray(k, dtype=np.uint64), slots.shape)
    n = slots.shape[0]
    ctr = (
        k >> np.uint64(1),
        slots & _MASK32,
        np.full(n, stream & 0xFFFFFFFF, dtype=np.uint64),
        np.full(n, stream >> 32, dtype=np.uint64),
    )
    w0, w1, w2, w3 = philox4x32(ctr, (seed & 0xFFFFFFFF, seed >> 32))
    odd = (k & np.uint64(1)).astype(bool)
    a = np.where(odd, w2, w0)
    b = np.where(odd, w3, w1)
    hi = (a >> np.uint64(5)).astype(np.float64)
    lo = (b >> np.uint64(6)).astype(np.float64)
    return (hi * 67108864.0 + lo + 0.5) * _INV_2_53


def _normal(seed, stream, slots, k):
    u0 = _uniform(seed, stream, slots, k)
    u1 = _uniform(seed, stream, slots, np.asarray(k, dtype=np.uint64) + np.uint64(1))
    return np.sqrt(-2.0 * np.log(u0)) * np.cos(_TWO_PI * u1)


def _slots(start, n):
    return np.uint64(start) + np.arange(n, dtype=np.uint64)


def uniforms(seed, stream, start, n):
    return _uniform(seed, stream, _slots(start, n), 0)


def gamma(seed, stream, start, shape, rate):
    shape = np.asarray(shape, dtype=np.float64)
    rate = np.asarray(rate, dtype=np.float64)
    n = shape.shape[0]
    slots = _slots(start, n)
    boost = np.ones(n)
    a = shape.copy()
    k = np.zeros(n, dtype=np.uint64)
    small = shape < 1.0
    if small.any():
        u = _uniform(seed, stream, slots[small], 0)
        boost[small] = np.power(u, 1.0 / shape[small])
        k[small] = 1
        a[small] = shape[small] + 1.0
    d = a - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)
    out = np.empty(n)
    pending = np.arange(n)
    while pending.size:
        s, kp = slots[pending], k[pending]
        dp, cp = d[pending], c[pending]
        z = _normal(seed, stream, s, kp)
        v = 1.0 + cp * z
        positive = v > 0.0
        u = _uniform(seed, stream, s, kp + np.uint64(2))
        v3 = np.where(positive, v * v * v, 1.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            accept = positive & (
                np.log(u) < 0.5 * z * z + dp - dp * v3 + dp * np.log(v3)
            )
        done = pending[accept]
        out[done] = dp[accept] * v3[accept] * boost[done]
        # a nonpositive v consumes only the two normal uniforms
        k[pending] = kp + np.where(positive, 3, 2).astype(np.uint64)
        pending = pending[~accept]
    return out / rate


def poisson(seed, stream, start, mean):
    mean = np.asarray(mean, dtype=np.float64)
    n = mean.shape[0]
    slots = _slots(start, n)
    out = np.zeros(n, dtype=np.int64)

    low = np.flatnonzero((mean > 0.0) & (mean < 10.0))
    if low.size:
        u = _uniform(seed, stream, slots[low], 0)
        lam = mean[low]
        x = np.zeros(low.size, dtype=np.int64)
        p = np.exp(-lam)
        cdf = p.copy()
        active = u > cdf
        while active.any():
            idx = np.flatnonzero(active)
            x[idx] += 1
            p[idx] = p[idx] * lam[idx] / x[idx]
            cdf[idx] = cdf[idx] + p[idx]
            active = (u > cdf) & (x < 1000)
        out[low] = x

    high = np.flatnonzero(mean >= 10.0)
    if high.size:
        lam = mean[high]
        slam = np.sqrt(lam)
        loglam = np.log(lam)
        b = 0.931 + 2.53 * slam
        a = -0.059 + 0.02483 * b
        invalpha = 1.1239 + 1.1328 / (b - 3.4)
        vr = 0.9277 - 3.6224 / (b - 2.0)
        k = np.zeros(high.size, dtype=np.uint64)
        pending = np.arange(high.size)
        while pending.size:
            s = slots[high[pending]]
            kp = k[pending]
            u = _uniform(seed, stream, s, kp) - 0.5
            v = _uniform(seed, stream, s, kp + np.uint64(1))
            k[pending] = kp + np.uint64(2)
            ap, bp = a[pending], b[pending]
            us = 0.5 - np.abs(u)
            kk = np.floor((2.0 * ap / us + bp) * u + lam[pending] + 0.43)
            fast = (us >= 0.07) & (v <= vr[pending])
            skip = (kk < 0) | ((us < 0.013) & (v > us))
            with np.errstate(invalid="ignore", divide="ignore"):
                lhs = np.log(v) + np.log(invalpha[pending]) - np.log(ap / (us * us) + bp)
                rhs = -lam[pending] + kk * loglam[pending] - gammaln(np.maximum(kk, 0.0) + 1.0)
            accept = fast | (~skip & (lhs <= rhs))
            out[high[pending[accept]]] = kk[accept].astype(np.int64)
            pending = pending[~accept]
    return out


def lognormal(seed, stream, start, mu, sigma):
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    z = _normal(seed, stream, _slots(start, mu.shape[0]), 0)
    return np.exp(mu + sigma * z)


def inverse_gaussian(seed, stream, start, mu, lam):
    mu = np.asarray(mu, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    slots = _slots(start, mu.shape[0])
    z = _normal(seed, stream, slots, 0)
    y = z * z
    x = mu + mu * mu * y / (2.0 * lam) - (mu / (2.0 * lam)) * np.sqrt(
        4.0 * mu * lam * y + mu * mu * y * y
    )
    u = _uniform(seed, stream, slots, 2)
    return np.where(u <= mu / (mu + x), x, mu * mu / x)


def mixture_logsumexp(theta, logc, rate, chunk=8192):
    """out[b] = log sum_j exp(logc[j] - rate[j] * theta[b])."""
    theta = np.asarray(theta, dtype=np.float64)
    out = np.empty(theta.shape[0])
    if logc.shape[0] == 0:
        out.fill(-math.inf)
        return out
    for lo in range(0, theta.shape[0], chunk):
        t = theta[lo:lo + chunk, None]
        e = logc[None, :] - rate[None, :] * t
        m = e.max(axis=1)
        out[lo:lo + chunk] = m + np.log(np.exp(e - m[:, None]).sum(axis=1))
    return out
