from math import factorial

import numpy as np
import pytest
import scipy.linalg
from numpy.testing import assert_allclose

from conftest import exact_mode, exact_mode_gradient
from services.exceptions import CoefficientError, DegenerateVectorError, NestingViolationError
from services.fem_service import (
    CoefficientField,
    FeSpace,
    apply_dirichlet,
    assemble_mass,
    assemble_stiffness,
    energy_error,
    integrate,
    interpolate,
    l2_error,
    prolongation,
    rayleigh_quotient,
    reduce_prolongation,
    reference_nodes,
    triangle_quadrature,
)
from services.mesh_service import TriMesh, refine_regular, unit_square_mesh
from utils import estimate_rate

REFERENCE_TRIANGLE = TriMesh.from_arrays([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], [[0, 1, 2]])


def test_reference_stiffness_p1():
    A = assemble_stiffness(FeSpace(REFERENCE_TRIANGLE, 1)).toarray()
    expected = 0.5 * np.array([[2.0, -1.0, -1.0], [-1.0, 1.0, 0.0], [-1.0, 0.0, 1.0]])
    assert_allclose(A, expected, atol=1e-13)


def test_reference_mass_p1():
    B = assemble_mass(FeSpace(REFERENCE_TRIANGLE, 1)).toarray()
    expected = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 24.0
    assert_allclose(B, expected, atol=1e-13)
    assert np.linalg.eigvalsh(B).min() > 0.0


def test_reference_mass_p2():
    space = FeSpace(REFERENCE_TRIANGLE, 2)
    dofs = space.cell_dofs[0]
    # vertices, then the midpoints of edges 01, 12, 20
    assert_allclose(space.dof_coords[dofs[3:]], [[0.5, 0.0], [0.5, 0.5], [0.0, 0.5]], atol=1e-15)
    B = assemble_mass(space).toarray()[np.ix_(dofs, dofs)]
    expected = np.array([
        [6.0, -1.0, -1.0, 0.0, -4.0, 0.0],
        [-1.0, 6.0, -1.0, 0.0, 0.0, -4.0],
        [-1.0, -1.0, 6.0, -4.0, 0.0, 0.0],
        [0.0, 0.0, -4.0, 32.0, 16.0, 16.0],
        [-4.0, 0.0, 0.0, 16.0, 32.0, 16.0],
        [0.0, -4.0, 0.0, 16.0, 16.0, 32.0],
    ]) / 360.0
    assert_allclose(B, expected, atol=1e-13)
    assert B.sum() == pytest.approx(0.5, abs=1e-13)


@pytest.mark.parametrize("degree", [0, 1, 2, 3, 4, 5, 6, 8])
def test_quadrature_exact_on_monomials(degree):
    points, weights = triangle_quadrature(degree)
    assert weights.sum() == pytest.approx(0.5, abs=1e-15)
    for a in range(degree + 1):
        b = degree - a
        # integral of x^a y^b over the reference triangle is a! b! / (a + b + 2)!
        exact = factorial(a) * factorial(b) / factorial(a + b + 2)
        assert np.sum(weights * points[:, 0] ** a * points[:, 1] ** b) == pytest.approx(exact, abs=1e-14)


@pytest.mark.parametrize("order", [1, 2, 3])
def test_integrate_degree_2p_polynomial(order):
    mesh = unit_square_mesh(2)
    a, b = order, order
    value = integrate(mesh, lambda x, y: x ** a * y ** b, degree=2 * order)
    assert value == pytest.approx(1.0 / ((a + 1) * (b + 1)), abs=1e-13)


@pytest.mark.parametrize("order", [1, 2, 3])
def test_dof_counts(order):
    mesh = unit_square_mesh(3)
    space = FeSpace(mesh, order)
    expected = {
        1: mesh.n_vertices,
        2: mesh.n_vertices + mesh.n_edges,
        3: mesh.n_vertices + 2 * mesh.n_edges + mesh.n_triangles,
    }[order]
    assert space.n_dofs == expected
    assert space.cell_dofs.shape == (mesh.n_triangles, (order + 1) * (order + 2) // 2)


@pytest.mark.parametrize("order", [1, 2, 3])
def test_cell_dofs_are_conforming(order):
    mesh = refine_regular(unit_square_mesh(2))
    space = FeSpace(mesh, order)
    corners = mesh.vertices[mesh.triangles]
    local_nodes = np.einsum("na,eak->enk", reference_nodes(order), corners)
    assert_allclose(space.dof_coords[space.cell_dofs], local_nodes, atol=1e-14)
    # every dof is used
    assert np.unique(space.cell_dofs).size == space.n_dofs


@pytest.mark.parametrize("order", [1, 2, 3])
def test_dirichlet_mask_matches_boundary_nodes(order):
    space = FeSpace(unit_square_mesh(3), order)
    coords = space.dof_coords
    on_boundary = np.any((np.abs(coords) < 1e-14) | (np.abs(coords - 1.0) < 1e-14), axis=1)
    np.testing.assert_array_equal(space.dirichlet_mask, on_boundary)


@pytest.mark.parametrize("order", [1, 2, 3])
def test_stiffness_kernel_and_symmetry(order):
    space = FeSpace(unit_square_mesh(3), order)
    A = assemble_stiffness(space)
    assert_allclose(np.asarray(A.sum(axis=1)).ravel(), 0.0, atol=1e-12)
    assert abs(A - A.T).max() == 0.0


@pytest.mark.parametrize("order", [1, 2, 3])
def test_mass_total_and_symmetry(order):
    space = FeSpace(unit_square_mesh(3), order)
    B = assemble_mass(space)
    assert B.sum() == pytest.approx(1.0, abs=1e-12)
    assert abs(B - B.T).max() == 0.0


def test_variable_weight_total():
    linear = CoefficientField(func=lambda x, y: 1.0 + x + y, degree=1, name="linear")
    B = assemble_mass(FeSpace(unit_square_mesh(4), 2), linear)
    assert B.sum() == pytest.approx(2.0, abs=1e-12)


def test_non_positive_coefficient_rejected():
    with pytest.raises(CoefficientError):
        CoefficientField.constant(-1.0)
    negative = CoefficientField(func=lambda x, y: x - 0.5, degree=1, name="signed")
    with pytest.raises(CoefficientError):
        assemble_stiffness(FeSpace(unit_square_mesh(2), 1), negative)


def test_dirichlet_reduction():
    space = FeSpace(unit_square_mesh(2), 1)
    A = apply_dirichlet(assemble_stiffness(space), space)
    B = apply_dirichlet(assemble_mass(space), space)
    assert A.shape == (1, 1)
    assert A[0, 0] == pytest.approx(4.0)
    # reduce twice is reduce once
    assert abs(apply_dirichlet(A, space) - A).max() == 0.0
    assert B[0, 0] > 0.0


def test_reduced_pencil_is_spd(p1_pencil8):
    A, B = p1_pencil8
    scipy.linalg.cholesky(A.toarray())
    scipy.linalg.cholesky(B.toarray())


def test_prolongation_p1_refinement_entries():
    coarse_mesh = unit_square_mesh(2)
    coarse = FeSpace(coarse_mesh, 1)
    fine = FeSpace(refine_regular(coarse_mesh), 1)
    P = prolongation(coarse, fine).toarray()
    n = coarse_mesh.n_vertices
    assert_allclose(P[:n], np.eye(n), atol=1e-15)
    for g, (a, b) in enumerate(coarse_mesh.edges):
        expected = np.zeros(n)
        expected[[a, b]] = 0.5
        assert_allclose(P[n + g], expected, atol=1e-15)


@pytest.mark.parametrize("coarse_order,fine_order,refinements", [
    (1, 1, 1), (2, 2, 1), (3, 3, 2), (1, 2, 0), (2, 3, 0), (1, 3, 1),
])
def test_prolongation_reproduces_constants(coarse_order, fine_order, refinements):
    coarse_mesh = unit_square_mesh(2)
    fine_mesh = coarse_mesh
    for _ in range(refinements):
        fine_mesh = refine_regular(fine_mesh)
    P = prolongation(FeSpace(coarse_mesh, coarse_order), FeSpace(fine_mesh, fine_order))
    assert_allclose(P @ np.ones(P.shape[1]), 1.0, atol=1e-13)


def test_prolongation_interpolates_coarse_functions():
    coarse = FeSpace(unit_square_mesh(2), 2)
    fine = FeSpace(refine_regular(coarse.mesh), 3)
    quadratic = lambda x, y: x * x - 2.0 * x * y + 3.0 * y + 1.0
    P = prolongation(coarse, fine)
    assert_allclose(P @ interpolate(coarse, quadratic), interpolate(fine, quadratic), atol=1e-13)


@pytest.mark.parametrize("order,refine,fine_order", [(1, True, 1), (2, True, 2), (3, True, 3), (1, False, 2), (2, False, 3)])
def test_galerkin_identity(order, refine, fine_order):
    coarse = FeSpace(unit_square_mesh(3), order)
    fine = FeSpace(refine_regular(coarse.mesh) if refine else coarse.mesh, fine_order)
    P = prolongation(coarse, fine)
    for assemble in (assemble_stiffness, assemble_mass):
        assert abs(P.T @ assemble(fine) @ P - assemble(coarse)).max() < 1e-11

    A_c = apply_dirichlet(assemble_stiffness(coarse), coarse)
    A_f = apply_dirichlet(assemble_stiffness(fine), fine)
    P_r = reduce_prolongation(P, coarse, fine)
    assert abs(P_r.T @ A_f @ P_r - A_c).max() < 1e-11


def test_prolongation_rejects_non_nested_spaces():
    coarse = FeSpace(unit_square_mesh(4), 1)
    with pytest.raises(NestingViolationError):
        prolongation(coarse, FeSpace(unit_square_mesh(8), 1))
    with pytest.raises(NestingViolationError):
        prolongation(FeSpace(unit_square_mesh(4), 2), coarse)


def test_error_of_zero_function():
    space = FeSpace(unit_square_mesh(4), 2)
    zeros = np.zeros(space.n_dofs)
    assert l2_error(space, zeros, lambda x, y: 0.0 * x) == 0.0
    assert energy_error(space, zeros, lambda x, y: (0.0 * x, 0.0 * y)) == 0.0


def test_exact_mode_is_normalized(p1_space8):
    norm = l2_error(p1_space8, np.zeros(p1_space8.n_free), exact_mode, degree=14)
    assert norm == pytest.approx(1.0, abs=1e-10)


@pytest.mark.parametrize("order", [1, 2, 3])
def test_interpolation_rates(order):
    sizes, l2, energy = [], [], []
    for m in (8, 16, 32):
        space = FeSpace(unit_square_mesh(m), order)
        coeffs = interpolate(space, exact_mode)
        sizes.append(space.h)
        l2.append(l2_error(space, coeffs, exact_mode))
        energy.append(energy_error(space, coeffs, exact_mode_gradient))
    l2_rates, _ = estimate_rate(l2, sizes)
    energy_rates, _ = estimate_rate(energy, sizes)
    assert l2_rates[-1] == pytest.approx(order + 1, abs=0.2)
    assert energy_rates[-1] == pytest.approx(order, abs=0.2)


def test_rayleigh_quotient():
    A = np.diag([2.0, 1.0])
    B = np.eye(2)
    assert rayleigh_quotient(A, B, np.array([1.0, 0.0])) == 2.0


def test_rayleigh_quotient_scale_invariant(p1_pencil8, rng):
    A, B = p1_pencil8
    x = rng.standard_normal(A.shape[0])
    assert rayleigh_quotient(A, B, 3.0 * x) == pytest.approx(rayleigh_quotient(A, B, x), rel=1e-14)


def test_rayleigh_quotient_of_eigenvector(p1_pencil8):
    A, B = p1_pencil8
    values, vectors = scipy.linalg.eigh(A.toarray(), B.toarray())
    assert rayleigh_quotient(A, B, vectors[:, 0]) == pytest.approx(values[0], rel=1e-12)


def test_rayleigh_quotient_zero_vector(p1_pencil8):
    A, B = p1_pencil8
    with pytest.raises(DegenerateVectorError):
        rayleigh_quotient(A, B, np.zeros(A.shape[0]))
