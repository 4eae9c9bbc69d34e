# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: Philox4x32-10 uniforms, rejection samplers, mixture log-sum-exp.

Every routine mirrors a function of the same name in ``_pycore`` and consumes
uniforms in exactly the same order, so both backends produce the same draws.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport log, exp, sqrt, cos, floor, fabs, lgamma, pow, INFINITY
from libc.stdint cimport uint32_t, uint64_t, int64_t

cnp.import_array()

cdef uint32_t PHILOX_M0 = 0xD2511F53U
cdef uint32_t PHILOX_M1 = 0xCD9E8D57U
cdef uint32_t PHILOX_W0 = 0x9E3779B9U
cdef uint32_t PHILOX_W1 = 0xBB67AE85U
cdef double TWO_PI = 6.283185307179586
cdef double INV_2_53 = 1.0 / 9007199254740992.0


cdef inline void _philox(uint32_t* ctr, uint32_t k0, uint32_t k1) noexcept nogil:
    cdef uint64_t p0, p1
    cdef uint32_t c0, c1, c2, c3
    cdef int r
    c0 = ctr[0]
    c1 = ctr[1]
    c2 = ctr[2]
    c3 = ctr[3]
    for r in range(10):
        if r > 0:
            k0 = k0 + PHILOX_W0
            k1 = k1 + PHILOX_W1
        p0 = <uint64_t>PHILOX_M0 * <uint64_t>c0
        p1 = <uint64_t>PHILOX_M1 * <uint64_t>c2
        c0 = (<uint32_t>(p1 >> 32)) ^ c1 ^ k0
        c1 = <uint32_t>p1
        c2 = (<uint32_t>(p0 >> 32)) ^ c3 ^ k1
        c3 = <uint32_t>p0
    ctr[0] = c0
    ctr[1] = c1
    ctr[2] = c2
    ctr[3] = c3


cdef struct Key:
    uint32_t k0
    uint32_t k1
    uint32_t s0
    uint32_t s1


cdef inline Key _make_key(uint64_t seed, uint64_t stream) noexcept nogil:
    cdef Key key
    key.k0 = <uint32_t>(seed & 0xFFFFFFFFU)
    key.k1 = <uint32_t>(seed >> 32)
    key.s0 = <uint32_t>(stream & 0xFFFFFFFFU)
    key.s1 = <uint32_t>(stream >> 32)
    return key


cdef inline double _uniform(Key key, uint64_t slot, uint64_t k) noexcept nogil:
    # uniform number k of draw slot `slot`, strictly inside (0, 1)
    cdef uint32_t ctr[4]
    ctr[0] = <uint32_t>(k >> 1)
    ctr[1] = <uint32_t>slot
    ctr[2] = key.s0
    ctr[3] = key.s1
    _philox(ctr, key.k0, key.k1)
    cdef uint32_t a, b
    if k & 1:
        a = ctr[2]
        b = ctr[3]
    else:
        a = ctr[0]
        b = ctr[1]
    return ((<double>(a >> 5)) * 67108864.0 + <double>(b >> 6) + 0.5) * INV_2_53


cdef inline double _normal(Key key, uint64_t slot, uint64_t k) noexcept nogil:
    cdef double u0 = _uniform(key, slot, k)
    cdef double u1 = _uniform(key, slot, k + 1)
    return sqrt(-2.0 * log(u0)) * cos(TWO_PI * u1)


cdef double _gamma_one(Key key, uint64_t slot, double shape) noexcept nogil:
    cdef uint64_t k = 0
    cdef double boost = 1.0
    cdef double a = shape
    cdef double d, c, z, v, u
    if a < 1.0:
        boost = pow(_uniform(key, slot, 0), 1.0 / shape)
        k = 1
        a = shape + 1.0
    d = a - 1.0 / 3.0
    c = 1.0 / sqrt(9.0 * d)
    while True:
        z = _normal(key, slot, k)
        k += 2
        v = 1.0 + c * z
        if v <= 0.0:
            continue
        v = v * v * v
        u = _uniform(key, slot, k)
        k += 1
        if log(u) < 0.5 * z * z + d - d * v + d * log(v):
            return d * v * boost


cdef int64_t _poisson_one(Key key, uint64_t slot, double mean) noexcept nogil:
    cdef double u, p, cdf, us, v, slam, loglam, b, a, invalpha, vr
    cdef int64_t x, kk
    cdef uint64_t k = 0
    if mean <= 0.0:
        return 0
    if mean < 10.0:
        u = _uniform(key, slot, 0)
        x = 0
        p = exp(-mean)
        cdf = p
        while u > cdf and x < 1000:
            x += 1
            p = p * mean / <double>x
            cdf = cdf + p
        return x
    slam = sqrt(mean)
    loglam = log(mean)
    b = 0.931 + 2.53 * slam
    a = -0.059 + 0.02483 * b
    invalpha = 1.1239 + 1.1328 / (b - 3.4)
    vr = 0.9277 - 3.6224 / (b - 2.0)
    while True:
        u = _uniform(key, slot, k) - 0.5
        v = _uniform(key, slot, k + 1)
        k += 2
        us = 0.5 - fabs(u)
        kk = <int64_t>floor((2.0 * a / us + b) * u + mean + 0.43)
        if us >= 0.07 and v <= vr:
            return kk
        if kk < 0 or (us < 0.013 and v > us):
            continue
        if (log(v) + log(invalpha) - log(a / (us * us) + b)
                <= -mean + kk * loglam - lgamma(kk + 1.0)):
            return kk


def uniforms(uint64_t seed, uint64_t stream, uint64_t start, Py_ssize_t n):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef Key key = _make_key(seed, stream)
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            out[i] = _uniform(key, start + i, 0)
    return out


def gamma(uint64_t seed, uint64_t stream, uint64_t start,
          const double[::1] shape, const double[::1] rate):
    cdef Py_ssize_t n = shape.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef Key key = _make_key(seed, stream)
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            out[i] = _gamma_one(key, start + i, shape[i]) / rate[i]
    return out


def poisson(uint64_t seed, uint64_t stream, uint64_t start, const double[::1] mean):
    cdef Py_ssize_t n = mean.shape[0]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] out = np.empty(n, dtype=np.int64)
    cdef Key key = _make_key(seed, stream)
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            out[i] = _poisson_one(key, start + i, mean[i])
    return out


def lognormal(uint64_t seed, uint64_t stream, uint64_t start,
              const double[::1] mu, const double[::1] sigma):
    cdef Py_ssize_t n = mu.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef Key key = _make_key(seed, stream)
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            out[i] = exp(mu[i] + sigma[i] * _normal(key, start + i, 0))
    return out


def inverse_gaussian(uint64_t seed, uint64_t stream, uint64_t start,
                     const double[::1] mu, const double[::1] lam):
    cdef Py_ssize_t n = mu.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef Key key = _make_key(seed, stream)
    cdef Py_ssize_t i
    cdef double z, y, m, l, x, u
    with nogil:
        for i in range(n):
            m = mu[i]
            l = lam[i]
            z = _normal(key, start + i, 0)
            y = z * z
            x = m + m * m * y / (2.0 * l) - (m / (2.0 * l)) * sqrt(4.0 * m * l * y + m * m * y * y)
            u = _uniform(key, start + i, 2)
            if u <= m / (m + x):
                out[i] = x
            else:
                out[i] = m * m / x
    return out


def mixture_logsumexp(const double[::1] theta, const double[::1] logc, const double[::1] rate):
    """out[b] = log sum_j exp(logc[j] - rate[j] * theta[b])."""
    cdef Py_ssize_t nb = theta.shape[0]
    cdef Py_ssize_t nj = logc.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(nb, dtype=np.float64)
    cdef Py_ssize_t b, j
    cdef double t, m, s, e
    with nogil:
        for b in range(nb):
            t = theta[b]
            m = -INFINITY
            for j in range(nj):
                e = logc[j] - rate[j] * t
                if e > m:
                    m = e
            if m == -INFINITY:
                out[b] = m
                continue
            s = 0.0
            for j in range(nj):
                s = s + exp(logc[j] - rate[j] * t - m)
            out[b] = m + log(s)
    return out
