import numpy as np
import pytest

from feederid import assemble_bus_admittance, default_dynamics, equilibrium, load_feeder, simulate


@pytest.fixture(scope="session")
def net4():
    return load_feeder("feeder4")


@pytest.fixture(scope="session")
def net13():
    return load_feeder("feeder13")


@pytest.fixture(scope="session")
def ybus4(net4):
    return assemble_bus_admittance(net4)


@pytest.fixture(scope="session")
def dyn4(net4):
    return default_dynamics(net4, seed=1)


@pytest.fixture(scope="session")
def op4(net4, dyn4):
    return equilibrium(net4, dyn4)


@pytest.fixture(scope="session")
def series4(net4, dyn4, op4):
    """Noiseless 3600-sample series on the 4-bus feeder."""
    return simulate(net4, dyn4, op4, 0.02, 3600, seed=3)


def random_stable(rng, m):
    """Random real matrix with eigenvalues in the open left half plane."""
    M = rng.standard_normal((m, m)) / np.sqrt(m)
    shift = np.max(np.linalg.eigvals(M).real) + rng.uniform(0.2, 2.0)
    return M - shift * np.eye(m)
