"""Compare the compiled kernels with the numpy fallback.

Run ``python3 benchmarks/bench_core.py``. Both backends are loaded side by
side, checked for agreement and timed on the same inputs.
"""

import argparse
import timeit

import numpy as np

from gsnpmle import _pycore

try:
    from gsnpmle import _core
except ImportError:
    _core = None


def cases(n):
    rng = np.random.default_rng(0)
    shape = np.full(n, 2.0)
    rate = rng.uniform(1.0, 5.0, n)
    mean = rng.uniform(0.0, 30.0, n)
    theta = rng.uniform(0.0, 10.0, n)
    logc = rng.normal(size=300)
    rates = np.geomspace(0.1, 1e3, 300)
    return {
        "uniforms": lambda m: m.uniforms(1, 0, 0, n),
        "gamma": lambda m: m.gamma(1, 0, 0, shape, rate),
        "poisson": lambda m: m.poisson(1, 0, 0, mean),
        "lognormal": lambda m: m.lognormal(1, 0, 0, np.zeros(n), np.ones(n)),
        "inverse_gaussian": lambda m: m.inverse_gaussian(1, 0, 0, np.ones(n), np.ones(n)),
        "mixture_logsumexp": lambda m: m.mixture_logsumexp(theta[: n // 10], logc, rates),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("-n", type=int, default=200_000)
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args()
    if _core is None:
        print("compiled core not built; only the fallback is available")
    print(f"{'kernel':<20}{'python [s]':>12}{'compiled [s]':>14}{'speedup':>10}  agree")
    for name, fn in cases(args.n).items():
        t_py = min(timeit.repeat(lambda: fn(_pycore), number=1, repeat=args.repeat))
        if _core is None:
            print(f"{name:<20}{t_py:12.4f}")
            continue
        t_c = min(timeit.repeat(lambda: fn(_core), number=1, repeat=args.repeat))
        agree = np.allclose(fn(_pycore), fn(_core), rtol=1e-12, atol=0.0)
        print(f"{name:<20}{t_py:12.4f}{t_c:14.4f}{t_py / t_c:10.1f}  {agree}")


if __name__ == "__main__":
    main()
