import numpy as np
import pytest

from openlat import DomainSpec, build_domain_lattice


@pytest.fixture(scope="session")
def square():
    return DomainSpec.polygon([(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)])


@pytest.fixture(scope="session")
def lat4(square):
    """Unit square at eps = 1/4: 9 sites, 8 on the inner boundary."""
    return build_domain_lattice(square, 0.25)


@pytest.fixture(scope="session")
def lat8(square):
    return build_domain_lattice(square, 0.125)


@pytest.fixture(scope="session")
def lat16(square):
    return build_domain_lattice(square, 1.0 / 16.0)


def site_at(lat, point):
    i = lat.index_of(np.asarray(point, dtype=float))
    assert i >= 0, f"no site at {point}"
    return i
