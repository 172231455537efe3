import numpy as np
import pytest

from services.fem_service import FeSpace, apply_dirichlet, assemble_mass, assemble_stiffness
from services.mesh_service import unit_square_mesh

FIRST_EIGENVALUE = 2.0 * np.pi ** 2


def reduced_pencil(space: FeSpace):
    A = apply_dirichlet(assemble_stiffness(space), space)
    B = apply_dirichlet(assemble_mass(space), space)
    return A, B


@pytest.fixture(scope="session")
def square8():
    return unit_square_mesh(8)


@pytest.fixture(scope="session")
def p1_space8(square8):
    return FeSpace(square8, 1)


@pytest.fixture(scope="session")
def p1_pencil8(p1_space8):
    return reduced_pencil(p1_space8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_spd(rng, n: int, shift: float = 1.0) -> np.ndarray:
    M = rng.standard_normal((n, n))
    return M @ M.T + shift * n * np.eye(n)


def exact_mode(x, y):
    return 2.0 * np.sin(np.pi * x) * np.sin(np.pi * y)


def exact_mode_gradient(x, y):
    return (2.0 * np.pi * np.cos(np.pi * x) * np.sin(np.pi * y),
            2.0 * np.pi * np.sin(np.pi * x) * np.cos(np.pi * y))
