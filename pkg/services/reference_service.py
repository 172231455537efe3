"""
Reference Service Module
Reference eigenpairs for error reporting: the exact Dirichlet eigenpairs of the
unit square and numerical references from a finer direct solve.
"""
import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from services.exceptions import InvalidArgumentError
from services.fem_service import FeSpace, energy_error, l2_error

logger = logging.getLogger("multilevel_eigen")


@dataclass(frozen=True)
class EigenReference:
    """
    Reference eigenvalue with optional eigenfunction and gradient.
    Functions are None when the eigenvalue is multiple (no unique eigenfunction).
    """
    value: float
    eigenfunction: Callable | None = None
    gradient: Callable | None = None
    label: str = "analytic"
    exact: bool = True


def analytic_reference(j: int, k: int) -> EigenReference:
    """lambda = (j^2 + k^2) pi^2 with u = 2 sin(j pi x) sin(k pi y), normalized in L2."""
    if j < 1 or k < 1:
        raise InvalidArgumentError(f"Mode numbers must be positive, got ({j}, {k}).")
    a, b = j * np.pi, k * np.pi

    def eigenfunction(x, y):
        return 2.0 * np.sin(a * x) * np.sin(b * y)

    def gradient(x, y):
        return 2.0 * a * np.cos(a * x) * np.sin(b * y), 2.0 * b * np.sin(a * x) * np.cos(b * y)

    return EigenReference(value=float(j * j + k * k) * np.pi ** 2, eigenfunction=eigenfunction,
                          gradient=gradient, label=f"analytic({j},{k})")


def unit_square_modes(count: int) -> list[tuple[int, int]]:
    """The first `count` mode pairs (j, k) ordered by j^2 + k^2, then j."""
    size = count + 1
    modes = sorted(
        ((j, k) for j in range(1, size + 1) for k in range(1, size + 1)),
        key=lambda mode: (mode[0] ** 2 + mode[1] ** 2, mode[0]),
    )
    return modes[:count]


def unit_square_reference(index: int) -> EigenReference:
    """
    Reference for the index-th (1-based, with multiplicity) Dirichlet eigenvalue
    of -Laplace on the unit square. Eigenfunction errors are only meaningful for
    simple eigenvalues, so functions are dropped otherwise.
    """
    if index < 1:
        raise InvalidArgumentError(f"Eigen index must be positive, got {index}.")
    modes = unit_square_modes(index + 1)
    j, k = modes[index - 1]
    level = j * j + k * k
    multiplicity = sum(1 for a, b in unit_square_modes(index + 8) if a * a + b * b == level)
    reference = analytic_reference(j, k)
    if multiplicity > 1:
        logger.info(f"Eigenvalue {index} ({level} pi^2) has multiplicity {multiplicity}; eigenfunction errors skipped")
        return EigenReference(value=reference.value, label=f"analytic({level}pi^2)")
    return reference


def direct_reference(value: float) -> EigenReference:
    return EigenReference(value=float(value), label="direct", exact=False)


def eigenfunction_errors(
    space: FeSpace,
    coeffs: np.ndarray,
    reference: EigenReference,
) -> tuple[float | None, float | None]:
    """Energy and L2 errors of the discrete eigenfunction against the reference, up to sign."""
    if reference.eigenfunction is None or reference.gradient is None:
        return None, None
    coeffs = np.asarray(coeffs, dtype=float)
    plus = l2_error(space, coeffs, reference.eigenfunction)
    minus = l2_error(space, -coeffs, reference.eigenfunction)
    sign = 1.0 if plus <= minus else -1.0
    energy = energy_error(space, sign * coeffs, reference.gradient)
    return energy, min(plus, minus)
