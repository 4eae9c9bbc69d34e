"""Seeded, stream-split random number generation.

The generator is Philox4x32-10 used in counter mode. A draw is addressed by
``(seed, stream_id, slot, k)``: the 64-bit seed is the Philox key, the
64-bit stream id and the 32-bit slot index occupy three counter words and the
fourth counts blocks of two uniforms. Each variate owns one slot and reads
uniforms ``k = 0, 1, 2, ...`` of that slot until its sampler accepts, so a
variate never depends on how many uniforms its neighbours rejected, and two
stream ids never share a counter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._backend import core

__all__ = [
    "Rng",
    "sample_gamma",
    "sample_poisson",
    "sample_lognormal",
    "sample_inverse_gaussian",
]

_U64 = (1 << 64) - 1
_MAX_SLOTS = 1 << 32


def _params(*values, size):
    arrays = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in values))
    if size is not None:
        arrays = [np.broadcast_to(a, (size,)) for a in arrays]
    shape = arrays[0].shape
    flat = [np.ascontiguousarray(a.reshape(-1), dtype=np.float64) for a in arrays]
    for a in flat:
        if not np.all(np.isfinite(a)):
            raise ValueError("sampler parameters must be finite")
    return flat, shape


@dataclass
class Rng:
    """Stateful handle on one stream; ``position`` is the next unused slot.

    >>> Rng(1, 0).uniform(2).tolist() == Rng(1, 0).uniform(2).tolist()
    True
    """

    seed: int
    stream_id: int = 0
    position: int = field(default=0)

    def __post_init__(self):
        if not (0 <= int(self.seed) <= _U64 and 0 <= int(self.stream_id) <= _U64):
            raise ValueError("seed and stream_id must be unsigned 64-bit integers")
        self.seed = int(self.seed)
        self.stream_id = int(self.stream_id)

    def copy(self) -> Rng:
        return Rng(self.seed, self.stream_id, self.position)

    def spawn(self, stream_id: int) -> Rng:
        """Fresh generator on another stream under the same seed."""
        return Rng(self.seed, stream_id)

    def _take(self, n: int) -> int:
        start = self.position
        if start + n > _MAX_SLOTS:
            raise OverflowError("stream exhausted: more than 2**32 variates drawn")
        self.position = start + n
        return start

    def uniform(self, size: int) -> np.ndarray:
        return core.uniforms(self.seed, self.stream_id, self._take(size), size)

    def gamma(self, shape, rate, size=None):
        (shape, rate), out_shape = _params(shape, rate, size=size)
        if np.any(shape <= 0.0) or np.any(rate <= 0.0):
            raise ValueError("gamma shape and rate must be positive")
        start = self._take(shape.size)
        return core.gamma(self.seed, self.stream_id, start, shape, rate).reshape(out_shape)

    def poisson(self, mean, size=None):
        (mean,), out_shape = _params(mean, size=size)
        if np.any(mean < 0.0):
            raise ValueError("poisson mean must be nonnegative")
        start = self._take(mean.size)
        return core.poisson(self.seed, self.stream_id, start, mean).reshape(out_shape)

    def lognormal(self, mu, sigma, size=None):
        (mu, sigma), out_shape = _params(mu, sigma, size=size)
        if np.any(sigma <= 0.0):
            raise ValueError("lognormal sigma must be positive")
        start = self._take(mu.size)
        return core.lognormal(self.seed, self.stream_id, start, mu, sigma).reshape(out_shape)

    def inverse_gaussian(self, mu, lam, size=None):
        (mu, lam), out_shape = _params(mu, lam, size=size)
        if np.any(mu <= 0.0) or np.any(lam <= 0.0):
            raise ValueError("inverse Gaussian mu and lam must be positive")
        start = self._take(mu.size)
        return core.inverse_gaussian(self.seed, self.stream_id, start, mu, lam).reshape(out_shape)

    def choice(self, probabilities, size: int) -> np.ndarray:
        """Indices drawn by inversion of the cumulative ``probabilities``."""
        cum = np.cumsum(np.asarray(probabilities, dtype=np.float64))
        u = self.uniform(size) * cum[-1]
        return np.minimum(np.searchsorted(cum, u, side="left"), cum.size - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")


def _scalar(x):
    return float(np.asarray(x).reshape(-1)[0])


def sample_gamma(shape: float, rate: float, rng: Rng) -> float:
    """One Gamma(shape, rate) variate (shape-rate parametrization, mean shape/rate)."""
    if not (math.isfinite(shape) and math.isfinite(rate)):
        raise ValueError("non-finite gamma parameters")
    return _scalar(rng.gamma(shape, rate, size=1))


def sample_poisson(mean: float, rng: Rng) -> int:
    if not math.isfinite(mean):
        raise ValueError("non-finite poisson mean")
    return int(rng.poisson(mean, size=1)[0])


def sample_lognormal(mu: float, sigma: float, rng: Rng) -> float:
    return _scalar(rng.lognormal(mu, sigma, size=1))


def sample_inverse_gaussian(mu: float, lam: float, rng: Rng) -> float:
    """One IG(mu, lam) variate; mean mu, shape lam."""
    return _scalar(rng.inverse_gaussian(mu, lam, size=1))
