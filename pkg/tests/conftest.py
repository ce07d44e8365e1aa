import numpy as np
import pytest

from reflecta import (BarrierPair, CoefficientField, Driver, Grid, MeasureData,
                      ProblemSpec, SpaceTimeDomain)

HEAT_RATE = np.pi**2 / 2  # decay rate of the sin(pi x) mode under u_t + u''/2 = 0


@pytest.fixture(scope="session")
def unit_domain():
    return SpaceTimeDomain(1, (1.0,), 1.0)


@pytest.fixture(scope="session")
def identity_coeffs():
    return CoefficientField.constant(1.0)


@pytest.fixture(scope="session")
def heat_spec(unit_domain, identity_coeffs):
    return ProblemSpec(unit_domain, identity_coeffs, Driver.zero(),
                       lambda x: np.sin(np.pi * x), name="heat")


@pytest.fixture(scope="session")
def pinned_mode_spec(unit_domain, identity_coeffs):
    """Lower-barrier problem with a closed-form solution.

    With f(y) = -y, phi = sin(pi x) and h1 = alpha sin(pi x) the exact
    solution is u(t, x) = max(alpha, exp(-(pi^2/2 + 1)(T - t))) sin(pi x)
    and the reaction density on the contact set is
    alpha (pi^2/2 + 1) sin(pi x).
    """
    alpha = 0.25
    return ProblemSpec(unit_domain, identity_coeffs, Driver.linear(-1.0),
                       lambda x: np.sin(np.pi * x), MeasureData(),
                       BarrierPair(h1=lambda t, x: alpha * np.sin(np.pi * x)),
                       name="pinned_mode")


def pinned_mode_exact(grid, alpha=0.25):
    lam = HEAT_RATE + 1.0
    x = grid.axes[0]
    out = np.empty((grid.nt + 1,) + grid.shape_full)
    for k in range(grid.nt + 1):
        m = max(alpha, np.exp(-lam * (grid.domain.horizon - grid.times[k])))
        out[k] = m * np.sin(np.pi * x)
    return out


@pytest.fixture(scope="session")
def grid_64(unit_domain):
    return Grid(unit_domain, nx=64, nt=128)
