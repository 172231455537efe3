import numpy as np
import pytest
import scipy.linalg
from numpy.testing import assert_allclose, assert_array_equal

from conftest import FIRST_EIGENVALUE
from services.correction_service import (
    Hierarchy,
    augmented_eigensolve,
    augmented_pencil,
    build_hierarchy,
    multi_level_solve,
    one_correction_step,
    rayleigh_expansion_residual,
    solve_coarse,
    source_correction,
)
from services.exceptions import (
    DegenerateAugmentationError,
    DegenerateVectorError,
    EigenConvergenceError,
    InvalidArgumentError,
    UnsupportedLadderError,
)
from services.fem_service import FeSpace
from services.linalg_service import EigenPair, dense_gen_eig_sym, smallest_eigenpairs
from services.mesh_service import unit_square_mesh
from services.reference_service import eigenfunction_errors, unit_square_reference


@pytest.fixture(scope="module")
def two_level():
    return build_hierarchy("multigrid", m=4, n_levels=2)


@pytest.fixture(scope="module")
def coarse_pair(two_level):
    return solve_coarse(two_level, 1)


def dense_pair(A, B, index=1) -> EigenPair:
    values, vectors = scipy.linalg.eigh(A.toarray(), B.toarray())
    return EigenPair(value=float(values[index - 1]), vector=vectors[:, index - 1])


# --- build_hierarchy ---

def test_multigrid_ladder_squares_mesh_size(two_level):
    assert two_level.n_levels == 2
    fine = two_level.spaces[1]
    assert fine.mesh.n_triangles == 2 * 16 * 16
    assert fine.h == pytest.approx(np.sqrt(2.0) / 16)
    assert fine.order == two_level.coarse.order == 1


def test_multispace_ladder_raises_order():
    hierarchy = build_hierarchy("multispace", m=8, n_levels=3)
    assert [space.order for space in hierarchy.spaces] == [1, 2, 3]
    assert all(space.mesh is hierarchy.coarse.mesh for space in hierarchy.spaces)


def test_single_level_hierarchy():
    hierarchy = build_hierarchy("multigrid", m=3, n_levels=1)
    assert hierarchy.n_levels == 1
    assert hierarchy.prolong_step == []


def test_non_dyadic_multigrid_rejected():
    with pytest.raises(UnsupportedLadderError) as info:
        build_hierarchy("multigrid", m=6, n_levels=2)
    assert 4 in info.value.suggestions
    assert "m=6" in str(info.value)


def test_multispace_capped_at_cubic():
    with pytest.raises(InvalidArgumentError):
        build_hierarchy("multispace", m=4, n_levels=3, order=2)


def test_unknown_way_rejected():
    with pytest.raises(InvalidArgumentError):
        build_hierarchy("bisection", m=4)


@pytest.mark.parametrize("way,m", [("multigrid", 2), ("multispace", 4)])
def test_coarse_prolongation_is_composition(way, m):
    hierarchy = build_hierarchy(way, m=m, n_levels=3)
    composed = hierarchy.prolong_step[1] @ hierarchy.prolong_step[0]
    assert abs(composed - hierarchy.prolong_coarse_to_k[2]).max() < 1e-12
    for level, step in enumerate(hierarchy.prolong_step):
        galerkin = step.T @ hierarchy.stiffness[level + 1] @ step
        assert abs(galerkin - hierarchy.stiffness[level]).max() < 1e-11


def test_imported_mesh_ladder():
    hierarchy = build_hierarchy("multigrid", mesh=unit_square_mesh(3), n_levels=3, refine_step=1)
    assert [space.mesh.generation for space in hierarchy.spaces] == [0, 1, 2]
    assert hierarchy.dofs == sorted(hierarchy.dofs)


# --- solve_coarse ---

def test_solve_coarse(two_level, coarse_pair):
    A, B = two_level.stiffness[0], two_level.mass[0]
    assert coarse_pair.value >= FIRST_EIGENVALUE
    assert coarse_pair.vector @ (B @ coarse_pair.vector) == pytest.approx(1.0, abs=1e-12)
    oracle = scipy.linalg.eigh(A.toarray(), B.toarray(), eigvals_only=True)[0]
    assert coarse_pair.value == pytest.approx(oracle, rel=1e-9)


def test_solve_coarse_index_range(two_level):
    with pytest.raises(InvalidArgumentError):
        solve_coarse(two_level, two_level.coarse.n_free + 1)


# --- source_correction ---

def test_source_correction_fixed_point():
    space = FeSpace(unit_square_mesh(4), 1)
    hierarchy = Hierarchy.from_spaces([space, space])
    pair = dense_pair(hierarchy.stiffness[0], hierarchy.mass[0])
    solved = source_correction(hierarchy, 0, pair)
    assert np.max(np.abs(solved.x - pair.vector)) < 1e-10


def test_source_correction_residual(two_level, coarse_pair):
    solved = source_correction(two_level, 0, coarse_pair)
    rhs = coarse_pair.value * (two_level.mass[1] @ (two_level.prolong_step[0] @ coarse_pair.vector))
    residual = np.linalg.norm(two_level.stiffness[1] @ solved.x - rhs)
    assert residual <= 1e-12 * np.linalg.norm(rhs)


def test_source_correction_improves_energy_error(two_level, coarse_pair):
    reference = unit_square_reference(1)
    fine = two_level.spaces[1]
    B = two_level.mass[1]
    prolonged = two_level.prolong_step[0] @ coarse_pair.vector
    corrected = source_correction(two_level, 0, coarse_pair).x
    corrected = corrected / np.sqrt(corrected @ (B @ corrected))
    prolonged_error, _ = eigenfunction_errors(fine, prolonged, reference)
    corrected_error, _ = eigenfunction_errors(fine, corrected, reference)
    assert corrected_error < prolonged_error


def test_source_correction_needs_finer_level(two_level, coarse_pair):
    with pytest.raises(InvalidArgumentError):
        source_correction(two_level, 1, coarse_pair)


# --- augmented_eigensolve / one_correction_step ---

def test_augmenting_with_coarse_function_adds_nothing(two_level, coarse_pair):
    prolonged = two_level.prolong_coarse_to_k[1] @ coarse_pair.vector
    try:
        pair = augmented_eigensolve(two_level, 1, prolonged)
    except DegenerateAugmentationError:
        return
    assert pair.value == pytest.approx(coarse_pair.value, rel=1e-10)


def test_augmented_sandwich(two_level, coarse_pair):
    corrected = one_correction_step(two_level, 0, coarse_pair)
    direct = smallest_eigenpairs(two_level.stiffness[1], two_level.mass[1], k=1)[0].value
    assert direct <= corrected.value * (1.0 + 1e-12)
    assert corrected.value <= coarse_pair.value * (1.0 + 1e-12)
    assert corrected.value >= FIRST_EIGENVALUE
    B = two_level.mass[1]
    assert corrected.vector @ (B @ corrected.vector) == pytest.approx(1.0, abs=1e-12)
    assert corrected.vector[np.argmax(np.abs(corrected.vector))] > 0.0


def test_one_step_is_the_composition(two_level, coarse_pair):
    step = one_correction_step(two_level, 0, coarse_pair)
    u_tilde = source_correction(two_level, 0, coarse_pair).x
    composed = augmented_eigensolve(two_level, 1, u_tilde)
    assert step.value == composed.value
    assert_array_equal(step.vector, composed.vector)


def test_one_step_error_close_to_direct(two_level, coarse_pair):
    corrected = one_correction_step(two_level, 0, coarse_pair)
    direct = smallest_eigenpairs(two_level.stiffness[1], two_level.mass[1], k=1)[0].value
    assert abs(corrected.value - FIRST_EIGENVALUE) <= 2.0 * abs(direct - FIRST_EIGENVALUE)


def test_closest_selection_tracks_previous_value(two_level, coarse_pair):
    by_index = one_correction_step(two_level, 0, coarse_pair)
    closest = one_correction_step(two_level, 0, coarse_pair, selection="closest")
    assert closest.value == pytest.approx(by_index.value, rel=1e-12)


def test_zero_source_is_degenerate(two_level):
    zero = np.zeros(two_level.spaces[1].n_free)
    with pytest.raises(DegenerateAugmentationError):
        augmented_eigensolve(two_level, 1, zero)
    with pytest.raises(DegenerateAugmentationError):
        augmented_pencil(two_level, 1, zero)


def test_augmented_pencil_shape(two_level, coarse_pair):
    u_tilde = source_correction(two_level, 0, coarse_pair).x
    A_aug, B_aug = augmented_pencil(two_level, 1, u_tilde)
    size = two_level.coarse.n_free + 1
    assert A_aug.shape == B_aug.shape == (size, size)
    assert_allclose(A_aug, A_aug.T, rtol=0.0, atol=1e-12 * np.abs(A_aug).max())
    assert_allclose(B_aug, B_aug.T, rtol=0.0, atol=1e-12 * np.abs(B_aug).max())
    P = two_level.prolong_coarse_to_k[1]
    assert_allclose(A_aug[:-1, :-1], (P.T @ two_level.stiffness[1] @ P).toarray(), rtol=1e-12, atol=1e-12)
    assert_allclose(B_aug[:-1, :-1], (P.T @ two_level.mass[1] @ P).toarray(), rtol=1e-12, atol=1e-14)
    assert B_aug[-1, -1] == pytest.approx(u_tilde @ (two_level.mass[1] @ u_tilde), rel=1e-12)


def test_augmented_eigensolve_uses_the_pencil(two_level, coarse_pair):
    u_tilde = source_correction(two_level, 0, coarse_pair).x
    B = two_level.mass[1]
    pencil = augmented_pencil(two_level, 1, u_tilde / np.sqrt(u_tilde @ (B @ u_tilde)))
    assert augmented_eigensolve(two_level, 1, u_tilde).value == pytest.approx(
        dense_gen_eig_sym(*pencil)[0].value, rel=1e-12
    )


def test_augmented_pencil_needs_a_fine_level(two_level, coarse_pair):
    with pytest.raises(InvalidArgumentError):
        augmented_pencil(two_level, 0, coarse_pair.vector)
    with pytest.raises(InvalidArgumentError):
        augmented_pencil(two_level, 1, coarse_pair.vector)


# --- multi_level_solve ---

def test_single_level_equals_coarse_solve():
    hierarchy = build_hierarchy("multigrid", m=4, n_levels=1)
    pair, trace = multi_level_solve(hierarchy)
    assert pair.value == pytest.approx(solve_coarse(hierarchy, 1).value, rel=1e-10)
    assert len(trace) == 1
    assert trace.records[0].stage == "coarse"


def test_three_level_trace():
    hierarchy = build_hierarchy("multigrid", m=2, n_levels=3)
    pair, trace = multi_level_solve(hierarchy, reference=unit_square_reference(1), verify_bounds=True)
    assert len(trace) == 3
    assert [record.stage for record in trace.records] == ["coarse", "correction", "final"]
    assert [record.dofs for record in trace.records] == hierarchy.dofs
    assert trace.records[1].aug_dim == hierarchy.coarse.n_free + 1
    assert all(value >= FIRST_EIGENVALUE for value in trace.values)
    assert trace.values[1] <= trace.values[0]
    assert trace.values[2] <= trace.values[0]
    for record in trace.records:
        assert record.direct_value <= record.value * (1.0 + 1e-10)
        assert record.err_energy is not None and record.err_l2 is not None
    B = hierarchy.mass[-1]
    assert pair.vector @ (B @ pair.vector) == pytest.approx(1.0, abs=1e-12)


def test_final_level_is_a_rayleigh_quotient(two_level):
    pair, trace = multi_level_solve(two_level)
    A, B = two_level.stiffness[1], two_level.mass[1]
    assert pair.value == pytest.approx((pair.vector @ (A @ pair.vector)) / (pair.vector @ (B @ pair.vector)), rel=1e-13)
    assert trace.records[-1].stage == "final"
    assert trace.records[-1].aug_dim is None


def test_equal_levels_return_coarse_pair():
    space = FeSpace(unit_square_mesh(4), 2)
    hierarchy = Hierarchy.from_spaces([space, space, space])
    coarse = solve_coarse(hierarchy, 1)
    pair, trace = multi_level_solve(hierarchy)
    assert pair.value == pytest.approx(coarse.value, rel=1e-10)
    assert trace.records[1].stage in ("fallback", "correction")
    assert trace.records[1].value == pytest.approx(coarse.value, rel=1e-10)


def test_failure_keeps_partial_trace(two_level):
    with pytest.raises(InvalidArgumentError) as info:
        multi_level_solve(two_level, index=10_000)
    assert len(info.value.trace) == 0


def test_sweep_limit_reaches_the_coarse_solve(two_level):
    with pytest.raises(EigenConvergenceError):
        solve_coarse(two_level, 1, max_iter=1)
    with pytest.raises(EigenConvergenceError) as info:
        multi_level_solve(two_level, max_iter=1)
    assert len(info.value.trace) == 0


def test_sweep_limit_reaches_the_bound_checks():
    hierarchy = build_hierarchy("multigrid", m=2, n_levels=3)
    # one interior coarse dof is solved densely, so only the finer direct checks iterate
    with pytest.raises(EigenConvergenceError) as info:
        multi_level_solve(hierarchy, verify_bounds=True, max_iter=1)
    assert [record.stage for record in info.value.trace.records] == ["coarse"]


# --- rayleigh_expansion_residual ---

@pytest.fixture(scope="module")
def exact_pair8(p1_pencil8):
    A, B = p1_pencil8
    return dense_pair(A, B)


def test_expansion_at_eigenvector(p1_pencil8, exact_pair8):
    A, B = p1_pencil8
    u = exact_pair8.vector
    assert rayleigh_expansion_residual(exact_pair8.value, u, u, A, B) < 1e-11 * exact_pair8.value
    assert rayleigh_expansion_residual(exact_pair8.value, u, 2.0 * u, A, B) < 1e-11 * exact_pair8.value


def test_expansion_identity_random_perturbations(p1_pencil8, exact_pair8, rng):
    A, B = p1_pencil8
    u, value = exact_pair8.vector, exact_pair8.value
    for _ in range(100):
        w = rng.standard_normal(len(u))
        w /= np.sqrt(w @ (B @ w))
        psi = u + 0.1 * w
        assert rayleigh_expansion_residual(value, u, psi, A, B) <= 1e-10 * abs(value)


def test_expansion_rejects_zero_psi(p1_pencil8, exact_pair8):
    A, B = p1_pencil8
    with pytest.raises(DegenerateVectorError):
        rayleigh_expansion_residual(exact_pair8.value, exact_pair8.vector, np.zeros(A.shape[0]), A, B)


def test_dense_pair_matches_library_solver(p1_pencil8, exact_pair8):
    A, B = p1_pencil8
    pairs = dense_gen_eig_sym(A.toarray(), B.toarray())
    assert pairs[0].value == pytest.approx(exact_pair8.value, rel=1e-12)
    assert_allclose(np.abs(pairs[0].vector), np.abs(exact_pair8.vector), atol=1e-10)
