import numpy as np
import pytest


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    """Compile the leverage-filter kernel once so timed tests measure the
    algorithms, not numba compilation."""
    from bellmanfilter.svleverage import SvLeverageParams, sv_filter, sv_simulate

    p = SvLeverageParams(mu=0.0, c=-0.2, phi=0.9, sigma_eta=0.3, rho=[-0.3, 0.1])
    y, _ = sv_simulate(p, 60, seed=0)
    sv_filter(p, y)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
