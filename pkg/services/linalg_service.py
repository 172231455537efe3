"""
Linear Algebra Service Module
Sparse CSR operators, Jacobi-preconditioned conjugate gradients, a dense symmetric
generalized eigensolver and a sparse smallest-eigenpair solver built on both.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.io
import scipy.linalg
from scipy import sparse

from services.exceptions import (
    EigenConvergenceError,
    InvalidArgumentError,
    IterationLimitError,
    NotSpdError,
)

logger = logging.getLogger("multilevel_eigen")

DEFAULT_CG_TOL = 1e-12
DEFAULT_EIGEN_TOL = 1e-10
DEFAULT_EIGEN_MAX_ITER = 500
DEFAULT_SEED = 20110123

_MAX_RESIDUAL_REPLACEMENTS = 5


@dataclass
class EigenPair:
    value: float
    vector: np.ndarray          # coefficients over free dofs, v^T B v = 1
    residual: float = 0.0       # ||A v - value B v|| / ||A v|| in the pencil that produced it
    iterations: int = 0

    def __repr__(self):
        return f"EigenPair(value={self.value:.12g}, n={len(self.vector)}, residual={self.residual:.2e})"


@dataclass
class CgResult:
    x: np.ndarray
    iterations: int
    residual: float             # final ||rhs - A x||
    rhs_norm: float
    history: list[float] = field(default_factory=list)

    @property
    def relative_residual(self) -> float:
        return self.residual / self.rhs_norm if self.rhs_norm > 0 else 0.0


def fix_sign(vector: np.ndarray) -> np.ndarray:
    """Flip the vector so that its largest-magnitude entry is positive."""
    if vector.size and vector[np.argmax(np.abs(vector))] < 0:
        return -vector
    return vector


# --- Source solver ---

def cg_solve(
    A: sparse.spmatrix | np.ndarray,
    rhs: np.ndarray,
    tol: float = DEFAULT_CG_TOL,
    max_iter: int | None = None,
    x0: np.ndarray | None = None,
    callback: Callable[[np.ndarray], None] | None = None,
) -> CgResult:
    """
    Solve A x = rhs for SPD A with Jacobi-preconditioned conjugate gradients.

    Converged when ||rhs - A x|| <= tol * ||rhs||, or when the true residual has
    reached the rounding floor n_row * eps * || |A| |x| || that no iteration can beat.

    Raises:
        IterationLimitError: If max_iter (default 10 n) iterations are not enough.
        NotSpdError: If A has a non-positive diagonal entry or a non-positive curvature direction.
    """
    A = sparse.csr_matrix(A)
    b = np.asarray(rhs, dtype=float)
    n = len(b)
    if A.shape != (n, n):
        raise InvalidArgumentError(f"Matrix {A.shape} does not match right-hand side of length {n}.")
    max_iter = 10 * n if max_iter is None else int(max_iter)

    diagonal = A.diagonal()
    if np.any(diagonal <= 0.0):
        raise NotSpdError("Jacobi preconditioner needs a positive diagonal.")
    inv_diagonal = 1.0 / diagonal

    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return CgResult(x=np.zeros(n), iterations=0, residual=0.0, rhs_norm=0.0, history=[0.0])
    target = tol * b_norm
    abs_A = abs(A)
    row_width = int(np.diff(A.indptr).max()) if A.nnz else 1

    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - A @ x
    z = inv_diagonal * r
    p = z.copy()
    rz = float(r @ z)
    history = [float(np.linalg.norm(r))]
    iterations = replacements = 0

    while True:
        if history[-1] <= target:
            true_r = b - A @ x
            true_norm = float(np.linalg.norm(true_r))
            floor = row_width * np.finfo(float).eps * float(np.linalg.norm(abs_A @ np.abs(x)))
            if true_norm <= max(target, floor):
                logger.debug(f"CG converged: n={n} iterations={iterations} residual={true_norm / b_norm:.2e}")
                return CgResult(x=x, iterations=iterations, residual=true_norm, rhs_norm=b_norm, history=history)
            if replacements >= _MAX_RESIDUAL_REPLACEMENTS:
                raise IterationLimitError(iterations, true_norm, target)
            # the recursive residual drifted from the true one; restart from the true residual
            replacements += 1
            r = true_r
            z = inv_diagonal * r
            p = z.copy()
            rz = float(r @ z)
            history.append(true_norm)
            continue

        if iterations >= max_iter:
            raise IterationLimitError(iterations, float(np.linalg.norm(b - A @ x)), target)

        Ap = A @ p
        curvature = float(p @ Ap)
        if curvature <= 0.0:
            raise NotSpdError(f"Non-positive curvature p^T A p = {curvature:.3e} in CG.")
        alpha = rz / curvature
        x += alpha * p
        r -= alpha * Ap
        iterations += 1
        history.append(float(np.linalg.norm(r)))
        if callback is not None:
            callback(x)

        z = inv_diagonal * r
        rz_next = float(r @ z)
        p = z + (rz_next / rz) * p
        rz = rz_next


# --- Dense generalized eigensolver ---

def dense_gen_eig_sym(A: np.ndarray, B: np.ndarray, min_pivot: float = 0.0) -> list[EigenPair]:
    """
    Full ascending spectrum of A v = lambda B v for symmetric A and SPD B.

    B = L L^T is factorized, the standard problem L^-1 A L^-T w = lambda w is
    solved by a symmetric tridiagonal eigensolver and v = L^-T w, so V^T B V = I.

    Args:
        min_pivot: Reject B when some Cholesky pivot squared falls below
            min_pivot times the matching diagonal entry of B.

    Raises:
        NotSpdError: If B cannot be factorized (or fails the pivot test).
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape != B.shape:
        raise InvalidArgumentError(f"Pencil shapes {A.shape} and {B.shape} do not match.")
    A = 0.5 * (A + A.T)
    B = 0.5 * (B + B.T)

    try:
        L = scipy.linalg.cholesky(B, lower=True)
    except np.linalg.LinAlgError as e:
        raise NotSpdError(f"B is not positive definite: {e}")
    if min_pivot > 0.0:
        ratios = np.diag(L) ** 2 / np.diag(B)
        if np.any(ratios <= min_pivot):
            raise NotSpdError(
                f"B is numerically singular: relative pivot {ratios.min():.3e} at index {int(np.argmin(ratios))}."
            )

    C = scipy.linalg.solve_triangular(L, A, lower=True)
    C = scipy.linalg.solve_triangular(L, C.T, lower=True)
    values, W = scipy.linalg.eigh(0.5 * (C + C.T))
    V = scipy.linalg.solve_triangular(L.T, W, lower=False)

    pairs = []
    for value, vector in zip(values, V.T):
        vector = fix_sign(vector)
        Av = A @ vector
        scale = np.linalg.norm(Av) or 1.0
        pairs.append(EigenPair(
            value=float(value),
            vector=vector,
            residual=float(np.linalg.norm(Av - value * (B @ vector)) / scale),
        ))
    return pairs


# --- Sparse smallest eigenpairs ---

def smallest_eigenpairs(
    A: sparse.spmatrix,
    B: sparse.spmatrix,
    k: int = 1,
    tol: float = DEFAULT_EIGEN_TOL,
    max_iter: int = DEFAULT_EIGEN_MAX_ITER,
    cg_tol: float = DEFAULT_CG_TOL,
    seed: int = DEFAULT_SEED,
) -> list[EigenPair]:
    """
    The k smallest eigenpairs of A v = lambda B v (A, B SPD), ascending and B-orthonormal.

    Block inverse iteration: each sweep solves A Y = B X column by column with CG,
    then a Rayleigh-Ritz step on span(Y). The block carries guard vectors beyond
    the k wanted ones so clustered eigenvalues separate. Converged when every
    wanted eigenvalue changes by less than tol (relative) and every residual
    ||A v - lambda B v|| is at most tol ||A v||.

    Raises:
        EigenConvergenceError: If max_iter sweeps are not enough.
    """
    A = sparse.csr_matrix(A)
    B = sparse.csr_matrix(B)
    n = A.shape[0]
    if not 1 <= k <= n:
        raise InvalidArgumentError(f"Requested k={k} eigenpairs of a pencil of dimension {n}.")
    block = min(n, k + max(2, k))
    if block == n:
        pairs = dense_gen_eig_sym(A.toarray(), B.toarray())[:k]
        logger.debug(f"Dense eigensolve for n={n}: {[p.value for p in pairs]}")
        return pairs

    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, block))
    theta = previous = None
    cg_iterations = 0

    for sweep in range(1, max_iter + 1):
        BX = B @ X
        Y = np.empty_like(X)
        for j in range(block):
            guess = None if theta is None else X[:, j] / theta[j]
            solved = cg_solve(A, BX[:, j], tol=cg_tol, x0=guess)
            Y[:, j] = solved.x
            cg_iterations += solved.iterations

        Q, _ = scipy.linalg.qr(Y, mode="economic")
        ritz = dense_gen_eig_sym(Q.T @ (A @ Q), Q.T @ (B @ Q))
        theta = np.array([pair.value for pair in ritz])
        X = Q @ np.column_stack([pair.vector for pair in ritz])

        AX = A @ X[:, :k]
        residuals = np.linalg.norm(AX - (B @ X[:, :k]) * theta[:k], axis=0) / np.linalg.norm(AX, axis=0)
        if previous is None:
            changes = np.full(k, np.inf)
        else:
            changes = np.abs(theta[:k] - previous[:k]) / np.abs(theta[:k])
        logger.debug(
            f"Inverse iteration sweep {sweep}: lambda={theta[:k]} "
            f"max residual={residuals.max():.2e} max change={changes.max():.2e}"
        )
        if np.all(changes < tol) and np.all(residuals <= tol):
            logger.debug(f"Eigensolver converged in {sweep} sweeps ({cg_iterations} CG iterations), n={n}")
            return [
                EigenPair(value=float(theta[j]), vector=fix_sign(X[:, j].copy()),
                          residual=float(residuals[j]), iterations=sweep)
                for j in range(k)
            ]
        previous = theta

    raise EigenConvergenceError(max_iter, float(residuals.max()), tol)


# --- MatrixMarket export (debugging) ---

def export_matrix_market(matrix: sparse.spmatrix, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    scipy.io.mmwrite(str(path), sparse.coo_matrix(matrix), precision=17)
    return path if path.suffix == ".mtx" else path.with_name(path.name + ".mtx")


def load_matrix_market(path: Path | str) -> sparse.csr_matrix:
    matrix = sparse.csr_matrix(scipy.io.mmread(str(path)))
    matrix.sort_indices()
    return matrix


def export_pencil(A: sparse.spmatrix, B: sparse.spmatrix, stem: Path | str) -> tuple[Path, Path]:
    """Write the pencil as `<stem>_A.mtx` and `<stem>_B.mtx`."""
    stem = Path(stem)
    return (
        export_matrix_market(A, stem.with_name(stem.name + "_A.mtx")),
        export_matrix_market(B, stem.with_name(stem.name + "_B.mtx")),
    )
