"""Brute-force reference computations shared by the tests."""

import numpy as np
from scipy import stats


def simplex_grid(k, step):
    """All weight vectors on the k-simplex with coordinates on a step lattice."""
    m = int(round(1.0 / step))
    if k == 1:
        return np.ones((1, 1))
    if k == 2:
        i = np.arange(m + 1)
        return np.stack([i, m - i], axis=1) / m
    if k == 3:
        i, j = np.meshgrid(np.arange(m + 1), np.arange(m + 1), indexing="ij")
        keep = i + j <= m
        i, j = i[keep], j[keep]
        return np.stack([i, j, m - i - j], axis=1) / m
    raise ValueError("only k <= 3 is supported")


def nb_pmf(kappa, lam, x):
    return stats.nbinom.pmf(x, kappa, lam / (lam + 1.0))


def nb_cdf(kappa, lam, x):
    return stats.nbinom.cdf(x, kappa, lam / (lam + 1.0))


def brute_force_npmle(counts, kappa, atoms, step=1e-3):
    counts = np.asarray(counts)
    K = np.stack([nb_pmf(kappa, a, counts) for a in atoms], axis=1)
    W = simplex_grid(len(atoms), step)
    with np.errstate(divide="ignore"):
        ll = np.log(K @ W.T).sum(axis=0)
    best = int(np.argmax(ll))
    return W[best], float(ll[best])


def brute_force_min_ks(counts, kappa, atoms, step=1e-3):
    counts = np.asarray(counts)
    m = np.arange(counts.max() + 1)
    Fn = np.array([np.mean(counts <= v) for v in m])
    C = np.stack([nb_cdf(kappa, a, m) for a in atoms], axis=1)
    W = simplex_grid(len(atoms), step)
    dist = np.abs(W @ C.T - Fn[None, :]).max(axis=1)
    best = int(np.argmin(dist))
    return W[best], float(dist[best])
