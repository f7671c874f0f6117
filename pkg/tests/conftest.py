import numpy as np
import pytest

from fewspect.geometry import (
    AngleEntry,
    AngleSet,
    GeometryConfig,
    build_geometry,
    build_system_matrix,
)

# Tiny grid used by operator-level tests: fast to build, still 3D.
TINY_GRID = (12, 12, 8)
TINY_VOXEL = (4.0, 4.0, 4.0)
TINY_GEOMETRY = GeometryConfig(n_modules=7, nu=8, nv=8, pitch_mm=4.0)


@pytest.fixture(scope="session")
def tiny_geometry():
    return build_geometry(TINY_GEOMETRY)


@pytest.fixture(scope="session")
def tiny_matrix(tiny_geometry):
    return build_system_matrix(tiny_geometry, AngleSet.stationary(), TINY_GRID, TINY_VOXEL)


@pytest.fixture(scope="session")
def tiny_matrix_4(tiny_geometry):
    angles = AngleSet(tuple(AngleEntry(k * 6.5) for k in range(4)))
    return build_system_matrix(tiny_geometry, angles, TINY_GRID, TINY_VOXEL)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
