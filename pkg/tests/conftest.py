import numpy as np
import pytest

from vmbkit.collision import CollisionKernel
from vmbkit.grids import SpatialGrid, VelocityGrid


@pytest.fixture(scope="session")
def grid24():
    return VelocityGrid(24, 7.5)


@pytest.fixture(scope="session")
def grid16():
    return VelocityGrid(16, 7.5)


@pytest.fixture(scope="session")
def grid12():
    return VelocityGrid(12, 7.5)


@pytest.fixture(scope="session")
def sgrid():
    return SpatialGrid(64)


@pytest.fixture(scope="session")
def fast24(grid24):
    return CollisionKernel(grid24, "fast")


@pytest.fixture(scope="session")
def fast16(grid16):
    return CollisionKernel(grid16, "fast")


@pytest.fixture(scope="session")
def direct16(grid16):
    return CollisionKernel(grid16, "direct")


@pytest.fixture(scope="session")
def direct12(grid12):
    return CollisionKernel(grid12, "direct")


def smooth_random_f(grid, rng, n_bumps=3):
    """Positive smooth distribution: a sum of random Maxwellian-like bumps."""
    V = grid.nodes
    F = np.zeros(grid.size)
    for _ in range(n_bumps):
        c = rng.uniform(-0.8, 0.8, 3)
        s2 = rng.uniform(0.8, 1.6)
        F += rng.uniform(0.3, 1.0) * np.exp(-np.sum((V - c) ** 2, axis=1) / (2 * s2)) / (2 * np.pi * s2) ** 1.5
    return F
