import numpy as np
import pytest

from gsnpmle.mixture import CountSample, GammaMixtureModel
from gsnpmle.npmle import SolverConfig, fit_npmle
from gsnpmle.rng import Rng


def setting_i_counts(n, seed, stream=0):
    """Counts from the half-and-half Gamma(2, 2) / Gamma(2, 4) prior."""
    rng = Rng(seed, stream)
    comp = rng.choice([0.5, 0.5], n)
    theta = rng.gamma(2.0, np.where(comp == 0, 2.0, 4.0))
    return theta, CountSample(rng.poisson(theta))


@pytest.fixture(scope="session")
def setting_i_sample():
    return setting_i_counts(1000, 2024)[1]


@pytest.fixture(scope="session")
def setting_i_truth():
    return GammaMixtureModel.from_components(2.0, [2.0, 4.0], [0.5, 0.5])


@pytest.fixture(scope="session")
def setting_i_fit(setting_i_sample):
    return fit_npmle(setting_i_sample, 2.0, SolverConfig(allow_infinity_atom=False))


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
