"""
Error types shared by the services.
Every error carries the process exit code the command line reports for it.
"""


class MultilevelEigenError(Exception):
    exit_code: int = 1


# --- Invalid input (exit 2) ---

class ConfigError(MultilevelEigenError, ValueError):
    exit_code = 2


class InvalidArgumentError(MultilevelEigenError, ValueError):
    exit_code = 2


class UnsupportedLadderError(InvalidArgumentError):
    def __init__(self, subdivisions: int, suggestions: list[int]):
        self.subdivisions = subdivisions
        self.suggestions = suggestions
        super().__init__(
            f"Multigrid ladder needs a dyadic coarse mesh, got m={subdivisions}. "
            f"Valid choices include m in {suggestions}."
        )


class NestingViolationError(MultilevelEigenError, ValueError):
    exit_code = 2


# --- Solver failures (exit 3) ---

class SolverError(MultilevelEigenError, RuntimeError):
    exit_code = 3


class IterationLimitError(SolverError):
    def __init__(self, iterations: int, residual: float, target: float):
        self.iterations = iterations
        self.residual = residual
        self.target = target
        super().__init__(
            f"CG did not converge in {iterations} iterations "
            f"(residual {residual:.3e}, target {target:.3e})"
        )


class EigenConvergenceError(SolverError):
    def __init__(self, iterations: int, residual: float, tol: float):
        self.iterations = iterations
        self.residual = residual
        self.tol = tol
        super().__init__(
            f"Eigensolver did not converge in {iterations} iterations "
            f"(relative residual {residual:.3e}, tolerance {tol:.3e})"
        )


class NotSpdError(SolverError):
    pass


class DegenerateAugmentationError(NotSpdError):
    pass


class DegenerateVectorError(SolverError):
    pass


class BoundViolationError(SolverError):
    pass


class CoefficientError(SolverError):
    pass


# --- Mesh files (exit 4) ---

class MeshIOError(MultilevelEigenError, OSError):
    exit_code = 4


class MeshFileNotFoundError(MeshIOError):
    def __init__(self, path):
        self.path = path
        super().__init__(f"Mesh file not found: {path}")


class MeshFormatError(MeshIOError):
    def __init__(self, path, line_no: int, message: str):
        self.path = path
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class CountMismatchError(MeshFormatError):
    pass


class IndexOutOfRangeError(MeshFormatError):
    pass


class ReportWriteError(MultilevelEigenError, OSError):
    exit_code = 4
