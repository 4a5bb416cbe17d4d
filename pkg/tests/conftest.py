"""Shared fixtures: the desk-scale demonstration setup.

One mesh of about 2,000 elements, 16 electrodes, the default voltage
pattern, the three-circle demonstration model, and a 500-sample collection.
Everything heavy is session scoped and treated as immutable by the tests.
"""

import numpy as np
import pytest

from eitrecon.cli import DEFAULT_BASE_PATTERN, DEMO_REGIONS
from eitrecon.fem import ExcitationScheme, add_noise, simulate_measurements
from eitrecon.field import make_true_model
from eitrecon.geometry import build_disc_mesh, place_electrodes
from eitrecon.opt import precompute_collection, seed_streams

SEED = 42
RADIUS = 0.1
SIGMA_C = 0.4
SIGMA_H = 0.2


@pytest.fixture(scope="session")
def mesh():
    return build_disc_mesh(RADIUS, 2000)


@pytest.fixture(scope="session")
def mesh_small():
    # still resolves 16 electrodes (1-2 boundary edges each)
    return build_disc_mesh(RADIUS, 300)


@pytest.fixture(scope="session")
def layout(mesh):
    return place_electrodes(mesh, 16, 0.12, 0.1)


@pytest.fixture(scope="session")
def layout_small(mesh_small):
    return place_electrodes(mesh_small, 16, 0.12, 0.1)


@pytest.fixture(scope="session")
def scheme():
    return ExcitationScheme(np.array(DEFAULT_BASE_PATTERN))


@pytest.fixture(scope="session")
def sigma_true(mesh):
    return make_true_model(mesh, DEMO_REGIONS, SIGMA_C, SIGMA_H)


@pytest.fixture(scope="session")
def d_star(mesh, layout, scheme, sigma_true):
    return simulate_measurements(mesh, layout, sigma_true, scheme)


@pytest.fixture(scope="session")
def d_star_noisy(d_star):
    return add_noise(d_star, 0.005, seed_streams(SEED)["noise"])


@pytest.fixture(scope="session")
def collection(mesh, layout, scheme):
    rng = seed_streams(SEED)["collection"]
    return precompute_collection(mesh, layout, scheme, 500, rng,
                                 sigma_pair=(SIGMA_C, SIGMA_H))
