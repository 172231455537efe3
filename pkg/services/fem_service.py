"""
Finite Element Service Module
Lagrange P1/P2/P3 spaces on triangular meshes: degree-of-freedom numbering,
stiffness and mass assembly, nested-space prolongation and error norms.
"""
import logging
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Callable

import numpy as np
from scipy import sparse

from services.exceptions import (
    CoefficientError,
    DegenerateVectorError,
    InvalidArgumentError,
    NestingViolationError,
)
from services.mesh_service import LOCAL_EDGES, TriMesh

logger = logging.getLogger("multilevel_eigen")

SUPPORTED_ORDERS = (1, 2, 3)

# d(barycentric)/d(reference coordinates)
_BARY_TO_REF = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])


# --- Reference element ---

@lru_cache(maxsize=None)
def triangle_quadrature(degree: int) -> tuple[np.ndarray, np.ndarray]:
    """
    Conical-product Gauss rule on the reference triangle (0,0),(1,0),(0,1),
    exact for polynomials up to `degree`. Weights sum to 1/2.
    """
    n = max(1, (int(degree) + 3) // 2)
    x, w = np.polynomial.legendre.leggauss(n)
    s, ws = 0.5 * (x + 1.0), 0.5 * w
    ss, tt = np.meshgrid(s, s, indexing="ij")
    wss, wtt = np.meshgrid(ws, ws, indexing="ij")
    points = np.column_stack((ss.ravel(), ((1.0 - ss) * tt).ravel()))
    weights = (wss * wtt * (1.0 - ss)).ravel()
    points.setflags(write=False)
    weights.setflags(write=False)
    return points, weights


def n_local_dofs(order: int) -> int:
    return (order + 1) * (order + 2) // 2


def to_barycentric(ref_points: np.ndarray) -> np.ndarray:
    ref_points = np.asarray(ref_points, dtype=float)
    return np.concatenate((1.0 - ref_points.sum(axis=-1, keepdims=True), ref_points), axis=-1)


@lru_cache(maxsize=None)
def reference_nodes(order: int) -> np.ndarray:
    """
    Barycentric coordinates of the local Lagrange nodes: the 3 vertices, then
    order-1 nodes per local edge (walking from its first vertex), then the
    cell-interior node for P3.
    """
    nodes = list(np.eye(3))
    for i, j in LOCAL_EDGES:
        for s in range(1, order):
            node = np.zeros(3)
            node[i], node[j] = 1.0 - s / order, s / order
            nodes.append(node)
    if order == 3:
        nodes.append(np.full(3, 1.0 / 3.0))
    nodes = np.array(nodes)
    nodes.setflags(write=False)
    return nodes


def lagrange_basis(order: int, bary: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Evaluate the local Lagrange basis at barycentric points.

    Args:
        order: Polynomial degree 1, 2 or 3.
        bary: Array (..., 3) of barycentric coordinates.

    Returns:
        values (..., n_local) and derivatives with respect to the barycentric
        coordinates (..., n_local, 3).
    """
    L = np.asarray(bary, dtype=float)
    shape = L.shape[:-1]
    n = n_local_dofs(order)
    phi = np.zeros(shape + (n,))
    dphi = np.zeros(shape + (n, 3))

    for a in range(3):
        La = L[..., a]
        if order == 1:
            phi[..., a] = La
            dphi[..., a, a] = 1.0
        elif order == 2:
            phi[..., a] = La * (2.0 * La - 1.0)
            dphi[..., a, a] = 4.0 * La - 1.0
        else:
            phi[..., a] = 0.5 * La * (3.0 * La - 1.0) * (3.0 * La - 2.0)
            dphi[..., a, a] = 0.5 * (27.0 * La * La - 18.0 * La + 2.0)

    if order == 2:
        for k, (i, j) in enumerate(LOCAL_EDGES):
            Li, Lj = L[..., i], L[..., j]
            phi[..., 3 + k] = 4.0 * Li * Lj
            dphi[..., 3 + k, i] = 4.0 * Lj
            dphi[..., 3 + k, j] = 4.0 * Li
    elif order == 3:
        for k, (i, j) in enumerate(LOCAL_EDGES):
            Li, Lj = L[..., i], L[..., j]
            near_i, near_j = 3 + 2 * k, 4 + 2 * k
            phi[..., near_i] = 4.5 * Li * Lj * (3.0 * Li - 1.0)
            dphi[..., near_i, i] = 4.5 * Lj * (6.0 * Li - 1.0)
            dphi[..., near_i, j] = 4.5 * Li * (3.0 * Li - 1.0)
            phi[..., near_j] = 4.5 * Li * Lj * (3.0 * Lj - 1.0)
            dphi[..., near_j, j] = 4.5 * Li * (6.0 * Lj - 1.0)
            dphi[..., near_j, i] = 4.5 * Lj * (3.0 * Lj - 1.0)
        L0, L1, L2 = L[..., 0], L[..., 1], L[..., 2]
        phi[..., 9] = 27.0 * L0 * L1 * L2
        dphi[..., 9, 0] = 27.0 * L1 * L2
        dphi[..., 9, 1] = 27.0 * L0 * L2
        dphi[..., 9, 2] = 27.0 * L0 * L1
    elif order != 1:
        raise InvalidArgumentError(f"Unsupported element order {order}; expected one of {SUPPORTED_ORDERS}.")

    return phi, dphi


# --- Coefficients ---

@dataclass(frozen=True)
class CoefficientField:
    """
    Scalar coefficient c(x, y) > 0. `degree` is the polynomial degree used to
    size quadrature rules (an estimate for non-polynomial fields).
    """
    func: Callable[[np.ndarray, np.ndarray], np.ndarray | float]
    degree: int = 0
    name: str = "custom"

    @classmethod
    def constant(cls, value: float) -> "CoefficientField":
        value = float(value)
        if value <= 0.0:
            raise CoefficientError(f"Coefficient must be positive, got {value}.")
        return cls(func=lambda x, y: value, degree=0, name=f"{value:g}")

    @property
    def is_constant(self) -> bool:
        return self.degree == 0

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        values = np.broadcast_to(np.asarray(self.func(x, y), dtype=float), np.shape(x))
        if not np.all(values > 0.0):
            raise CoefficientError(
                f"Coefficient '{self.name}' is not strictly positive (min {values.min():.3e})."
            )
        return values


UNIT_COEFFICIENT = CoefficientField.constant(1.0)


# --- Spaces ---

class FeSpace:
    """Continuous Lagrange space of degree `order` on `mesh` with Dirichlet dofs on the boundary."""

    def __init__(self, mesh: TriMesh, order: int):
        if order not in SUPPORTED_ORDERS:
            raise InvalidArgumentError(f"Unsupported element order {order}; expected one of {SUPPORTED_ORDERS}.")
        self.mesh: TriMesh = mesh
        self.order: int = int(order)

    @property
    def n_local(self) -> int:
        return n_local_dofs(self.order)

    @property
    def n_dofs(self) -> int:
        mesh, p = self.mesh, self.order
        return mesh.n_vertices + (p - 1) * mesh.n_edges + (mesh.n_triangles if p == 3 else 0)

    @property
    def n_free(self) -> int:
        return len(self.free_dofs)

    @property
    def h(self) -> float:
        return self.mesh.h

    @cached_property
    def cell_dofs(self) -> np.ndarray:
        """(n_triangles, n_local) global dof of each local node."""
        mesh, p = self.mesh, self.order
        tri = mesh.triangles
        columns = [tri]
        for k, (i, j) in enumerate(LOCAL_EDGES):
            edge = mesh.triangle_edges[:, k]
            forward = tri[:, i] < tri[:, j]
            for s in range(p - 1):
                slot = np.where(forward, s, p - 2 - s)
                columns.append((mesh.n_vertices + (p - 1) * edge + slot)[:, None])
        if p == 3:
            columns.append((mesh.n_vertices + 2 * mesh.n_edges + np.arange(mesh.n_triangles))[:, None])
        return np.hstack(columns)

    @cached_property
    def dof_coords(self) -> np.ndarray:
        mesh, p = self.mesh, self.order
        coords = [mesh.vertices]
        if p > 1:
            a = mesh.vertices[mesh.edges[:, 0]]
            b = mesh.vertices[mesh.edges[:, 1]]
            steps = np.arange(1, p) / p
            coords.append((a[:, None, :] + steps[None, :, None] * (b - a)[:, None, :]).reshape(-1, 2))
        if p == 3:
            coords.append(mesh.vertices[mesh.triangles].mean(axis=1))
        return np.vstack(coords)

    @cached_property
    def dirichlet_mask(self) -> np.ndarray:
        mesh, p = self.mesh, self.order
        parts = [mesh.boundary_vertices, np.repeat(mesh.edge_is_boundary, p - 1)]
        if p == 3:
            parts.append(np.zeros(mesh.n_triangles, dtype=bool))
        return np.concatenate(parts)

    @cached_property
    def free_dofs(self) -> np.ndarray:
        return np.flatnonzero(~self.dirichlet_mask)

    def extend(self, free_values: np.ndarray) -> np.ndarray:
        """Coefficients over all dofs from values over the free dofs (zero on the boundary)."""
        full = np.zeros(self.n_dofs)
        full[self.free_dofs] = free_values
        return full

    def restrict(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values)[self.free_dofs]

    def __repr__(self):
        return f"FeSpace(P{self.order}, n_dofs={self.n_dofs}, n_free={self.n_free}, h={self.h:.4g})"


# --- Geometry and quadrature helpers ---

def _element_geometry(mesh: TriMesh) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Affine maps x = v0 + J xi: returns v0, J, det J and J^-1 per triangle."""
    p0, p1, p2 = (mesh.vertices[mesh.triangles[:, k]] for k in range(3))
    J = np.stack((p1 - p0, p2 - p0), axis=2)
    det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    inv = np.empty_like(J)
    inv[:, 0, 0] = J[:, 1, 1] / det
    inv[:, 0, 1] = -J[:, 0, 1] / det
    inv[:, 1, 0] = -J[:, 1, 0] / det
    inv[:, 1, 1] = J[:, 0, 0] / det
    return p0, J, det, inv


def _quadrature_data(mesh: TriMesh, degree: int):
    """Physical quadrature points (T, nq, 2) and scaled weights (T, nq)."""
    points, weights = triangle_quadrature(degree)
    v0, J, det, inv = _element_geometry(mesh)
    xq = v0[:, None, :] + np.einsum("edk,qk->eqd", J, points)
    wq = np.abs(det)[:, None] * weights[None, :]
    return points, xq, wq, inv


def integrate(mesh: TriMesh, f: Callable, degree: int) -> float:
    """Integral of f(x, y) over the mesh with a rule exact to `degree`."""
    _, xq, wq, _ = _quadrature_data(mesh, degree)
    return float(np.sum(wq * np.broadcast_to(f(xq[..., 0], xq[..., 1]), wq.shape)))


def interpolate(space: FeSpace, f: Callable) -> np.ndarray:
    """Nodal interpolant of f over all dofs."""
    x, y = space.dof_coords[:, 0], space.dof_coords[:, 1]
    return np.broadcast_to(np.asarray(f(x, y), dtype=float), x.shape).copy()


def _scatter(space: FeSpace, local: np.ndarray) -> sparse.csr_matrix:
    dofs = space.cell_dofs
    n = space.n_local
    rows = np.broadcast_to(dofs[:, :, None], (len(dofs), n, n)).ravel()
    cols = np.broadcast_to(dofs[:, None, :], (len(dofs), n, n)).ravel()
    matrix = sparse.coo_matrix((local.ravel(), (rows, cols)), shape=(space.n_dofs, space.n_dofs)).tocsr()
    # exact symmetry regardless of summation order
    matrix = (0.5 * (matrix + matrix.T)).tocsr()
    matrix.sort_indices()
    return matrix


# --- Assembly ---

def assemble_stiffness(space: FeSpace, diffusion: CoefficientField = UNIT_COEFFICIENT) -> sparse.csr_matrix:
    """Stiffness matrix over all dofs: entry (i, j) = integral of A grad(phi_i) . grad(phi_j)."""
    degree = 2 * (space.order - 1) + diffusion.degree
    points, xq, wq, inv = _quadrature_data(space.mesh, degree)
    _, dphi = lagrange_basis(space.order, to_barycentric(points))
    dref = dphi @ _BARY_TO_REF
    grads = np.einsum("ekd,qak->eqad", inv, dref)
    weighted = wq * diffusion(xq[..., 0], xq[..., 1])
    local = np.einsum("eq,eqad,eqbd->eab", weighted, grads, grads)
    local = 0.5 * (local + local.transpose(0, 2, 1))
    matrix = _scatter(space, local)
    logger.debug(f"Assembled stiffness {matrix.shape} nnz={matrix.nnz} on {space}")
    return matrix


def assemble_mass(space: FeSpace, weight: CoefficientField = UNIT_COEFFICIENT) -> sparse.csr_matrix:
    """Mass matrix over all dofs: entry (i, j) = integral of rho phi_i phi_j."""
    degree = 2 * space.order + weight.degree
    points, xq, wq, _ = _quadrature_data(space.mesh, degree)
    phi, _ = lagrange_basis(space.order, to_barycentric(points))
    weighted = wq * weight(xq[..., 0], xq[..., 1])
    local = np.einsum("eq,qa,qb->eab", weighted, phi, phi)
    local = 0.5 * (local + local.transpose(0, 2, 1))
    matrix = _scatter(space, local)
    logger.debug(f"Assembled mass {matrix.shape} nnz={matrix.nnz} on {space}")
    return matrix


def apply_dirichlet(matrix: sparse.spmatrix, space: FeSpace) -> sparse.csr_matrix:
    """Restrict a matrix over all dofs to free_dofs x free_dofs."""
    free = space.free_dofs
    if matrix.shape == (len(free), len(free)):
        # already reduced
        return sparse.csr_matrix(matrix)
    if matrix.shape != (space.n_dofs, space.n_dofs):
        raise InvalidArgumentError(f"Matrix shape {matrix.shape} does not match {space}.")
    reduced = sparse.csr_matrix(matrix)[free][:, free].tocsr()
    reduced.sort_indices()
    return reduced


# --- Nested spaces ---

def prolongation(coarse: FeSpace, fine: FeSpace) -> sparse.csr_matrix:
    """
    Matrix P with P @ c = fine coefficients of the coarse function with coefficients c,
    obtained by evaluating the coarse basis at the fine Lagrange nodes.

    The fine mesh must be `coarse.mesh` refined regularly zero or more times and the
    fine order must not be lower than the coarse order.

    Raises:
        NestingViolationError: If the spaces do not nest.
    """
    depth = fine.mesh.generation - coarse.mesh.generation
    n_coarse_vertices = coarse.mesh.n_vertices
    nested = (
        fine.order >= coarse.order
        and depth >= 0
        and fine.mesh.n_triangles == coarse.mesh.n_triangles * 4 ** depth
        and fine.mesh.n_vertices >= n_coarse_vertices
        and np.allclose(fine.mesh.vertices[:n_coarse_vertices], coarse.mesh.vertices, rtol=0.0, atol=1e-12)
    )
    if not nested:
        raise NestingViolationError(f"{fine} is not nested in {coarse}.")

    ancestor = np.arange(fine.mesh.n_triangles) // 4 ** depth
    v0, _, _, inv = _element_geometry(coarse.mesh)
    nodes = fine.dof_coords[fine.cell_dofs]
    ref = np.einsum("ekd,end->enk", inv[ancestor], nodes - v0[ancestor][:, None, :])
    bary = to_barycentric(ref)
    if bary.min() < -1e-10:
        raise NestingViolationError(f"Fine nodes of {fine} lie outside their coarse ancestors in {coarse}.")

    values, _ = lagrange_basis(coarse.order, bary)
    shape = values.shape
    rows = np.broadcast_to(fine.cell_dofs[:, :, None], shape).ravel()
    cols = np.broadcast_to(coarse.cell_dofs[ancestor][:, None, :], shape).ravel()
    values = values.ravel()

    keep = np.abs(values) > 1e-13
    rows, cols, values = rows[keep], cols[keep], values[keep]
    # a fine node shared by several cells yields the same entries once per cell
    _, first = np.unique(rows.astype(np.int64) * coarse.n_dofs + cols, return_index=True)
    matrix = sparse.csr_matrix(
        (values[first], (rows[first], cols[first])), shape=(fine.n_dofs, coarse.n_dofs)
    )
    matrix.sort_indices()
    logger.debug(f"Prolongation {coarse} -> {fine}: nnz={matrix.nnz}")
    return matrix


def reduce_prolongation(matrix: sparse.spmatrix, coarse: FeSpace, fine: FeSpace) -> sparse.csr_matrix:
    """Prolongation between free dofs; coarse Dirichlet values are zero, so their columns drop out."""
    reduced = sparse.csr_matrix(matrix)[fine.free_dofs][:, coarse.free_dofs].tocsr()
    reduced.sort_indices()
    return reduced


# --- Error norms ---

def _as_full(space: FeSpace, coeffs: np.ndarray) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape == (space.n_dofs,):
        return coeffs
    if coeffs.shape == (space.n_free,):
        return space.extend(coeffs)
    raise InvalidArgumentError(f"Coefficient vector of length {len(coeffs)} does not match {space}.")


def l2_error(space: FeSpace, coeffs: np.ndarray, f_exact: Callable, degree: int | None = None) -> float:
    """L2 norm of u_h - f, with u_h given by coefficients over all or free dofs."""
    degree = 2 * space.order + 4 if degree is None else degree
    coeffs = _as_full(space, coeffs)
    points, xq, wq, _ = _quadrature_data(space.mesh, degree)
    phi, _ = lagrange_basis(space.order, to_barycentric(points))
    uh = np.einsum("qa,ea->eq", phi, coeffs[space.cell_dofs])
    diff = uh - np.broadcast_to(f_exact(xq[..., 0], xq[..., 1]), uh.shape)
    return float(np.sqrt(np.sum(wq * diff ** 2)))


def energy_error(space: FeSpace, coeffs: np.ndarray, grad_exact: Callable, degree: int | None = None) -> float:
    """L2 norm of grad(u_h - f), with grad_exact(x, y) returning the pair (df/dx, df/dy)."""
    degree = 2 * space.order + 4 if degree is None else degree
    coeffs = _as_full(space, coeffs)
    points, xq, wq, inv = _quadrature_data(space.mesh, degree)
    _, dphi = lagrange_basis(space.order, to_barycentric(points))
    grads = np.einsum("ekd,qak->eqad", inv, dphi @ _BARY_TO_REF)
    grad_uh = np.einsum("eqad,ea->eqd", grads, coeffs[space.cell_dofs])
    exact = np.stack([np.broadcast_to(g, wq.shape) for g in grad_exact(xq[..., 0], xq[..., 1])], axis=-1)
    return float(np.sqrt(np.sum(wq * np.sum((grad_uh - exact) ** 2, axis=-1))))


def rayleigh_quotient(A: sparse.spmatrix | np.ndarray, B: sparse.spmatrix | np.ndarray, x: np.ndarray) -> float:
    """(x^T A x) / (x^T B x)."""
    x = np.asarray(x, dtype=float)
    if A.shape[0] != len(x) or B.shape[0] != len(x):
        raise InvalidArgumentError(f"Vector of length {len(x)} does not match the pencil {A.shape}.")
    denominator = float(x @ (B @ x))
    if not denominator > 0.0:
        raise DegenerateVectorError(f"x^T B x = {denominator:.3e} is not positive.")
    return float(x @ (A @ x)) / denominator
