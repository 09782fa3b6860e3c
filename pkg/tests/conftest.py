import math

import pytest

from orbigeo.geodesic import closed_from_parallel
from orbigeo.surface import football, load_surface, round_sphere


@pytest.fixture(scope="session")
def sphere():
    return round_sphere()


@pytest.fixture(scope="session")
def fb31():
    return football(3, 1)


@pytest.fixture(scope="session")
def neck():
    return load_surface("neck")


@pytest.fixture(scope="session")
def bumped():
    return load_surface("bumped_spindle")


@pytest.fixture(scope="session")
def equator(sphere):
    return closed_from_parallel(sphere, 0.5 * math.pi)


@pytest.fixture(scope="session")
def waist(fb31):
    return closed_from_parallel(fb31, fb31.waist()[0])


@pytest.fixture(scope="session")
def neck_geodesic(neck):
    r = min((r for r, sgn in neck.critical_radii()), key=lambda r: abs(r - 0.5 * neck.L))
    return closed_from_parallel(neck, r)


@pytest.fixture(scope="session")
def bumped_geodesic(bumped):
    from orbigeo.search import sweep_separating_geodesic
    return sweep_separating_geodesic(bumped)["geodesic"]
