"""
Correction Service Module
Nested space hierarchies and the multilevel correction scheme: a coarse eigensolve,
then per level one fine source solve plus one small eigensolve on the coarse
space augmented by the source solution, and a final source solve with a
Rayleigh quotient on the finest space.
"""
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from services.exceptions import (
    BoundViolationError,
    DegenerateAugmentationError,
    InvalidArgumentError,
    MultilevelEigenError,
    NotSpdError,
    UnsupportedLadderError,
)
from services.fem_service import (
    UNIT_COEFFICIENT,
    CoefficientField,
    FeSpace,
    apply_dirichlet,
    assemble_mass,
    assemble_stiffness,
    prolongation,
    rayleigh_quotient,
    reduce_prolongation,
)
from services.linalg_service import (
    DEFAULT_CG_TOL,
    DEFAULT_EIGEN_MAX_ITER,
    DEFAULT_EIGEN_TOL,
    CgResult,
    EigenPair,
    cg_solve,
    dense_gen_eig_sym,
    fix_sign,
    smallest_eigenpairs,
)
from services.mesh_service import TriMesh, refine_times, unit_square_mesh
from services.reference_service import EigenReference, eigenfunction_errors

logger = logging.getLogger("multilevel_eigen")

WAYS = ("multigrid", "multispace")
SELECTIONS = ("index", "closest")
MAX_ORDER = 3
DYADIC_SUGGESTIONS = [2, 4, 8, 16, 32]

# relative Cholesky pivot below which the source solution counts as lying inside V_H
AUGMENTATION_MIN_PIVOT = 1e-10
BOUND_SLACK = 1e-10


# --- Hierarchy ---

@dataclass
class Hierarchy:
    """
    Nested spaces V_H = V_1 in V_2 in ... in V_n with Dirichlet-reduced pencils.

    Level indices are 0-based: level 0 is the coarse space. `prolong_step[k]`
    maps free coefficients of level k to level k + 1, and
    `prolong_coarse_to_k[k]` maps the coarse free coefficients to level k.
    """
    way: str
    spaces: list[FeSpace]
    stiffness: list[sparse.csr_matrix]
    mass: list[sparse.csr_matrix]
    prolong_step: list[sparse.csr_matrix]
    prolong_coarse_to_k: list[sparse.csr_matrix]
    diffusion: CoefficientField = UNIT_COEFFICIENT
    weight: CoefficientField = UNIT_COEFFICIENT

    @classmethod
    def from_spaces(
        cls,
        spaces: list[FeSpace],
        diffusion: CoefficientField = UNIT_COEFFICIENT,
        weight: CoefficientField = UNIT_COEFFICIENT,
        way: str = "custom",
    ) -> "Hierarchy":
        if not spaces:
            raise InvalidArgumentError("A hierarchy needs at least one space.")
        stiffness = [apply_dirichlet(assemble_stiffness(space, diffusion), space) for space in spaces]
        mass = [apply_dirichlet(assemble_mass(space, weight), space) for space in spaces]
        prolong_step = [
            reduce_prolongation(prolongation(coarse, fine), coarse, fine)
            for coarse, fine in zip(spaces, spaces[1:])
        ]
        coarse = spaces[0]
        prolong_coarse_to_k = [sparse.identity(coarse.n_free, format="csr")] + [
            reduce_prolongation(prolongation(coarse, fine), coarse, fine) for fine in spaces[1:]
        ]
        hierarchy = cls(
            way=way,
            spaces=list(spaces),
            stiffness=stiffness,
            mass=mass,
            prolong_step=prolong_step,
            prolong_coarse_to_k=prolong_coarse_to_k,
            diffusion=diffusion,
            weight=weight,
        )
        logger.debug(f"Built {hierarchy}")
        return hierarchy

    @property
    def n_levels(self) -> int:
        return len(self.spaces)

    @property
    def coarse(self) -> FeSpace:
        return self.spaces[0]

    @property
    def dofs(self) -> list[int]:
        return [space.n_free for space in self.spaces]

    def __repr__(self):
        return f"Hierarchy(way={self.way}, levels={self.n_levels}, dofs={self.dofs})"


def multigrid_refinements(m: int, n_levels: int) -> list[int]:
    """Refinements k log2(m) for 0-based level k, so that level k has mesh size H^(k+1) with H = 1/m."""
    if n_levels == 1:
        return [0]
    if m < 2 or m & (m - 1):
        raise UnsupportedLadderError(m, DYADIC_SUGGESTIONS)
    log2_m = m.bit_length() - 1
    return [k * log2_m for k in range(n_levels)]


def build_hierarchy(
    way: str,
    m: int | None = None,
    n_levels: int = 2,
    order: int = 1,
    diffusion: CoefficientField = UNIT_COEFFICIENT,
    weight: CoefficientField = UNIT_COEFFICIENT,
    mesh: TriMesh | None = None,
    refine_step: int = 1,
) -> Hierarchy:
    """
    Build the space ladder for one of the two ways.

    multigrid: same order on regularly refined meshes. On the unit square the
    coarse mesh has m subdivisions (m a power of two) and level k is refined
    until h_k = H^k. An imported `mesh` is refined `refine_step` times per level.

    multispace: one mesh, orders order, order + 1, ... up to P3.
    """
    if way not in WAYS:
        raise InvalidArgumentError(f"Unknown way '{way}'; expected one of {WAYS}.")
    if n_levels < 1:
        raise InvalidArgumentError(f"Number of levels must be positive, got {n_levels}.")
    if mesh is None:
        if m is None:
            raise InvalidArgumentError("Either a subdivision count m or a mesh is required.")
        base = unit_square_mesh(m)
    else:
        base = mesh

    if way == "multispace":
        top = order + n_levels - 1
        if top > MAX_ORDER:
            raise InvalidArgumentError(
                f"Multispace ladder from P{order} with {n_levels} levels needs P{top}; P{MAX_ORDER} is the maximum."
            )
        spaces = [FeSpace(base, order + k) for k in range(n_levels)]
    else:
        if mesh is None:
            counts = multigrid_refinements(m, n_levels)
        else:
            if refine_step < 1:
                raise InvalidArgumentError(f"refine_step must be positive, got {refine_step}.")
            counts = [k * refine_step for k in range(n_levels)]
        meshes = [base]
        for previous, current in zip(counts, counts[1:]):
            meshes.append(refine_times(meshes[-1], current - previous))
        spaces = [FeSpace(level_mesh, order) for level_mesh in meshes]

    return Hierarchy.from_spaces(spaces, diffusion=diffusion, weight=weight, way=way)


# --- Trace ---

@dataclass
class LevelRecord:
    level: int                  # 1-based
    stage: str                  # coarse | correction | fallback | final
    order: int
    h: float
    dofs: int
    value: float
    err_value: float | None = None
    err_energy: float | None = None
    err_l2: float | None = None
    cg_iterations: int = 0
    eig_iterations: int = 0
    aug_dim: int | None = None
    direct_value: float | None = None
    wall_ms: float = 0.0


@dataclass
class CorrectionTrace:
    way: str
    index: int
    records: list[LevelRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def values(self) -> list[float]:
        return [record.value for record in self.records]


# --- Algorithm steps ---

def solve_coarse(
    hierarchy: Hierarchy,
    index: int = 1,
    tol: float = DEFAULT_EIGEN_TOL,
    cg_tol: float = DEFAULT_CG_TOL,
    max_iter: int = DEFAULT_EIGEN_MAX_ITER,
) -> EigenPair:
    """The index-th smallest eigenpair (1-based) of the reduced coarse pencil."""
    n_free = hierarchy.coarse.n_free
    if not 1 <= index <= n_free:
        raise InvalidArgumentError(f"Eigen index {index} out of range for {n_free} coarse free dofs.")
    pairs = smallest_eigenpairs(
        hierarchy.stiffness[0], hierarchy.mass[0], k=index, tol=tol, max_iter=max_iter, cg_tol=cg_tol
    )
    return pairs[index - 1]


def source_correction(
    hierarchy: Hierarchy,
    level: int,
    pair: EigenPair,
    cg_tol: float = DEFAULT_CG_TOL,
) -> CgResult:
    """
    Solve A_{k+1} x = lambda B_{k+1} P u for the eigenpair (lambda, u) on `level` k.
    The solution in `.x` is left unnormalized.
    """
    if not 0 <= level < hierarchy.n_levels - 1:
        raise InvalidArgumentError(f"No finer level above level {level} in {hierarchy}.")
    prolonged = hierarchy.prolong_step[level] @ pair.vector
    rhs = pair.value * (hierarchy.mass[level + 1] @ prolonged)
    return cg_solve(hierarchy.stiffness[level + 1], rhs, tol=cg_tol, x0=prolonged)


def augmented_pencil(
    hierarchy: Hierarchy,
    level: int,
    u_tilde: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Dense Galerkin projection of the `level` pencil onto the columns of [P, u_tilde].

    Args:
        hierarchy (Hierarchy): Level spaces and operators.
        level (int): Level the source solution lives on, 1 <= level < n_levels.
        u_tilde (np.ndarray): Source solution over the free dofs of `level`.

    Returns:
        tuple[np.ndarray, np.ndarray]: Stiffness and mass blocks, both of size n_H + 1.

    Raises:
        DegenerateAugmentationError: If u_tilde has no positive mass norm.
    """
    if not 1 <= level < hierarchy.n_levels:
        raise InvalidArgumentError(f"Level {level} has no augmented space in {hierarchy}.")
    A = hierarchy.stiffness[level]
    B = hierarchy.mass[level]
    P = hierarchy.prolong_coarse_to_k[level]

    u_tilde = np.asarray(u_tilde, dtype=float)
    if u_tilde.shape != (B.shape[0],):
        raise InvalidArgumentError(f"Source solution has shape {u_tilde.shape}, level {level} has {B.shape[0]} dofs.")
    if not float(u_tilde @ (B @ u_tilde)) > 0.0:
        raise DegenerateAugmentationError("The source solution vanishes; nothing to augment with.")

    pencil = []
    for M in (A, B):
        MP = sparse.csr_matrix(M @ P)
        Mu = M @ u_tilde
        coupling = P.T @ Mu
        pencil.append(np.block([
            [(P.T @ MP).toarray(), coupling[:, None]],
            [coupling[None, :], np.array([[u_tilde @ Mu]])],
        ]))
    return pencil[0], pencil[1]


def augmented_eigensolve(
    hierarchy: Hierarchy,
    level: int,
    u_tilde: np.ndarray,
    index: int = 1,
    selection: str = "index",
    previous: float | None = None,
) -> EigenPair:
    """
    Eigenpair on V_H + span{u_tilde}, returned as coefficients over the free dofs of `level`.

    The (n_H + 1)-dimensional pencil is the Galerkin projection of the level
    pencil onto the columns of [P, u_tilde] with P the coarse-to-level prolongation.

    Raises:
        DegenerateAugmentationError: If u_tilde lies numerically inside V_H.
    """
    if selection not in SELECTIONS:
        raise InvalidArgumentError(f"Unknown selection '{selection}'; expected one of {SELECTIONS}.")
    if selection == "closest" and previous is None:
        raise InvalidArgumentError("Selection 'closest' needs the previous eigenvalue.")
    B = hierarchy.mass[level]
    P = hierarchy.prolong_coarse_to_k[level]
    u_tilde = np.asarray(u_tilde, dtype=float)
    norm = float(u_tilde @ (B @ u_tilde))
    if not norm > 0.0:
        raise DegenerateAugmentationError("The source solution vanishes; nothing to augment with.")
    u_tilde = u_tilde / np.sqrt(norm)
    A_aug, B_aug = augmented_pencil(hierarchy, level, u_tilde)

    try:
        pairs = dense_gen_eig_sym(A_aug, B_aug, min_pivot=AUGMENTATION_MIN_PIVOT)
    except NotSpdError as e:
        raise DegenerateAugmentationError(f"Augmented space is degenerate on level {level}: {e}")

    if selection == "index":
        if index > len(pairs):
            raise InvalidArgumentError(f"Eigen index {index} exceeds the augmented dimension {len(pairs)}.")
        chosen = pairs[index - 1]
    else:
        chosen = min(pairs, key=lambda pair: abs(pair.value - previous))

    coefficients = chosen.vector
    vector = P @ coefficients[:-1] + coefficients[-1] * u_tilde
    vector = fix_sign(vector / np.sqrt(float(vector @ (B @ vector))))
    return EigenPair(value=chosen.value, vector=vector, residual=chosen.residual)


def one_correction_step(
    hierarchy: Hierarchy,
    level: int,
    pair: EigenPair,
    index: int = 1,
    selection: str = "index",
    cg_tol: float = DEFAULT_CG_TOL,
) -> EigenPair:
    """Source correction from `level` to `level + 1`, then the augmented eigensolve there."""
    solved = source_correction(hierarchy, level, pair, cg_tol=cg_tol)
    return augmented_eigensolve(hierarchy, level + 1, solved.x, index=index, selection=selection, previous=pair.value)


def final_rayleigh_step(
    hierarchy: Hierarchy,
    pair: EigenPair,
    cg_tol: float = DEFAULT_CG_TOL,
) -> tuple[EigenPair, CgResult]:
    """Source solve from level n - 1 to the finest level followed by the Rayleigh quotient there."""
    level = hierarchy.n_levels - 2
    solved = source_correction(hierarchy, level, pair, cg_tol=cg_tol)
    A = hierarchy.stiffness[level + 1]
    B = hierarchy.mass[level + 1]
    value = rayleigh_quotient(A, B, solved.x)
    vector = fix_sign(solved.x / np.sqrt(float(solved.x @ (B @ solved.x))))
    Av = A @ vector
    residual = float(np.linalg.norm(Av - value * (B @ vector)) / np.linalg.norm(Av))
    return EigenPair(value=value, vector=vector, residual=residual), solved


def _record(
    hierarchy: Hierarchy,
    level: int,
    stage: str,
    pair: EigenPair,
    started: float,
    reference: EigenReference | None,
    **extra,
) -> LevelRecord:
    space = hierarchy.spaces[level]
    record = LevelRecord(
        level=level + 1,
        stage=stage,
        order=space.order,
        h=space.h,
        dofs=space.n_free,
        value=pair.value,
        wall_ms=1000.0 * (time.perf_counter() - started),
        **extra,
    )
    if reference is not None:
        record.err_value = abs(pair.value - reference.value)
        record.err_energy, record.err_l2 = eigenfunction_errors(space, pair.vector, reference)
    logger.info(
        f"Level {record.level} ({stage}): P{space.order} dofs={space.n_free} lambda={pair.value:.14g}"
        + (f" err={record.err_value:.3e}" if record.err_value is not None else "")
    )
    return record


def _check_bounds(
    hierarchy: Hierarchy,
    level: int,
    value: float,
    upper: float | None,
    index: int,
    verify_bounds: bool,
    tol: float,
    cg_tol: float,
    max_iter: int,
) -> float | None:
    """Assert direct <= value <= upper, computing the direct value on `level` when asked."""
    if upper is not None and value > upper * (1.0 + BOUND_SLACK):
        raise BoundViolationError(
            f"Level {level + 1}: augmented eigenvalue {value:.14g} exceeds the coarse bound {upper:.14g}."
        )
    if not verify_bounds:
        return None
    direct = smallest_eigenpairs(
        hierarchy.stiffness[level], hierarchy.mass[level], k=index, tol=tol, max_iter=max_iter, cg_tol=cg_tol
    )[index - 1].value
    if direct > value * (1.0 + BOUND_SLACK):
        raise BoundViolationError(
            f"Level {level + 1}: eigenvalue {value:.14g} is below the direct eigenvalue {direct:.14g}."
        )
    return direct


def multi_level_solve(
    hierarchy: Hierarchy,
    index: int = 1,
    selection: str = "index",
    reference: EigenReference | None = None,
    verify_bounds: bool = False,
    tol: float = DEFAULT_EIGEN_TOL,
    cg_tol: float = DEFAULT_CG_TOL,
    max_iter: int = DEFAULT_EIGEN_MAX_ITER,
) -> tuple[EigenPair, CorrectionTrace]:
    """
    Run the multilevel correction scheme over every level of the hierarchy.

    Coarse eigensolve on level 0, one correction step for each intermediate
    level, then only a source solve and the Rayleigh quotient on the finest
    level. Errors raised mid-run carry the partial trace as `.trace`.
    `max_iter` caps the sweeps of every sparse eigensolve, bound checks included.

    Raises:
        BoundViolationError: If an augmented eigenvalue exceeds the coarse one
            (index selection), or a value falls below its direct counterpart
            (verify_bounds), or, for index 1 with an exact reference, below
            the exact eigenvalue.
    """
    trace = CorrectionTrace(way=hierarchy.way, index=index)
    try:
        started = time.perf_counter()
        pair = solve_coarse(hierarchy, index, tol=tol, cg_tol=cg_tol, max_iter=max_iter)
        coarse_value = pair.value
        direct = _check_bounds(hierarchy, 0, pair.value, None, index, verify_bounds, tol, cg_tol, max_iter)
        trace.records.append(_record(
            hierarchy, 0, "coarse", pair, started, reference,
            eig_iterations=pair.iterations, direct_value=direct,
        ))

        for level in range(hierarchy.n_levels - 2):
            started = time.perf_counter()
            solved = source_correction(hierarchy, level, pair, cg_tol=cg_tol)
            try:
                corrected = augmented_eigensolve(
                    hierarchy, level + 1, solved.x, index=index, selection=selection, previous=pair.value
                )
                stage = "correction"
                aug_dim = hierarchy.coarse.n_free + 1
            except DegenerateAugmentationError as e:
                logger.warning(f"Falling back to the prolonged eigenpair on level {level + 2}: {e}")
                corrected = EigenPair(
                    value=pair.value,
                    vector=hierarchy.prolong_step[level] @ pair.vector,
                    residual=pair.residual,
                )
                stage = "fallback"
                aug_dim = None
            upper = coarse_value if selection == "index" else None
            direct = _check_bounds(
                hierarchy, level + 1, corrected.value, upper, index, verify_bounds, tol, cg_tol, max_iter
            )
            pair = corrected
            trace.records.append(_record(
                hierarchy, level + 1, stage, pair, started, reference,
                cg_iterations=solved.iterations, aug_dim=aug_dim, direct_value=direct,
            ))

        if hierarchy.n_levels > 1:
            started = time.perf_counter()
            pair, solved = final_rayleigh_step(hierarchy, pair, cg_tol=cg_tol)
            # the Rayleigh quotient bounds the discrete eigenvalue only for the first eigenpair
            direct = _check_bounds(
                hierarchy, hierarchy.n_levels - 1, pair.value, None, index,
                verify_bounds and index == 1, tol, cg_tol, max_iter,
            )
            trace.records.append(_record(
                hierarchy, hierarchy.n_levels - 1, "final", pair, started, reference,
                cg_iterations=solved.iterations, direct_value=direct,
            ))

        if reference is not None and reference.exact and index == 1:
            for record in trace.records:
                if record.value < reference.value * (1.0 - BOUND_SLACK):
                    raise BoundViolationError(
                        f"Level {record.level}: eigenvalue {record.value:.14g} is below "
                        f"the exact first eigenvalue {reference.value:.14g}."
                    )
    except MultilevelEigenError as e:
        e.trace = trace
        raise

    return pair, trace


# --- Diagnostics ---

def rayleigh_expansion_residual(
    value: float,
    u: np.ndarray,
    psi: np.ndarray,
    A: sparse.spmatrix | np.ndarray,
    B: sparse.spmatrix | np.ndarray,
) -> float:
    """
    |(q(psi) - value) - (a(e, e) - value b(e, e)) / b(psi, psi)| with e = u - psi and
    q the Rayleigh quotient. Vanishes up to rounding when (value, u) is an eigenpair of (A, B).
    """
    u = np.asarray(u, dtype=float)
    psi = np.asarray(psi, dtype=float)
    estimate = rayleigh_quotient(A, B, psi)
    error = u - psi
    psi_norm = float(psi @ (B @ psi))
    expansion = float(error @ (A @ error)) / psi_norm - value * float(error @ (B @ error)) / psi_norm
    return abs((estimate - value) - expansion)
