import numpy as np
import pytest

from fabtrack.camera import Intrinsics
from fabtrack.mesh import build_template
from fabtrack.synth import make_grid_mesh, make_smooth_texture


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def flat_texture():
    tex = np.zeros((16, 16, 3))
    tex[:] = (255, 0, 0)
    return tex


@pytest.fixture
def quad_mesh(flat_texture):
    V = [[0, 0, 5], [1, 0, 5], [1, 1, 5], [0, 1, 5]]
    F = [[0, 1, 2], [0, 2, 3]]
    U = [[0, 0], [16, 0], [16, 16], [0, 16]]
    return build_template(V, F, U, flat_texture)


@pytest.fixture
def small_grid():
    """6x6 smooth-textured plane, 36 vertices, mm-scale at 3 m."""
    tex = make_smooth_texture(64, seed=3)
    return make_grid_mesh(6, 6, 800.0, 800.0, 3000.0, tex)


@pytest.fixture
def K_small():
    return Intrinsics(300.0, 300.0, 80.0, 80.0)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
