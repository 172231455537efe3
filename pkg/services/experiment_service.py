"""
Experiment Service Module
Convergence studies behind the command line: direct fine solves, the two-grid
baseline and the multilevel correction scheme over a sweep of coarse meshes,
with reference selection, observed rates and CSV output.
"""
import csv
import logging
import time
from pathlib import Path

from schemas.config_schemas import RunConfig
from schemas.report_schemas import CSV_COLUMNS, ConvergenceRow, RunReport
from services.correction_service import CorrectionTrace, build_hierarchy, multi_level_solve
from services.exceptions import BoundViolationError, ReportWriteError
from services.fem_service import FeSpace, apply_dirichlet, assemble_mass, assemble_stiffness
from services.linalg_service import EigenPair, export_pencil, smallest_eigenpairs
from services.mesh_service import TriMesh, load_mesh, refine_times, unit_square_mesh
from services.reference_service import (
    EigenReference,
    direct_reference,
    eigenfunction_errors,
    unit_square_reference,
)
from utils import estimate_rate

logger = logging.getLogger("multilevel_eigen")

MIN_MAX_SLACK = 1e-12
# eigenvalue errors this small sit at the algebraic solver floor
SATURATION_FLOOR = 1e-11
REFERENCE_EXTRA_REFINEMENTS = 2


# --- Problem setup ---

def base_meshes(config: RunConfig) -> list[tuple[int | None, TriMesh]]:
    """Sweep entries as (m, mesh); m is None for imported meshes."""
    if config.on_unit_square:
        return [(m, unit_square_mesh(m)) for m in config.m]
    base = load_mesh(config.mesh)
    return [(None, refine_times(base, r)) for r in config.refinements]


def direct_solve(space: FeSpace, config: RunConfig) -> EigenPair:
    """The config.index-th eigenvalue of the reduced pencil on `space`."""
    A = apply_dirichlet(assemble_stiffness(space, config.diffusion_field), space)
    B = apply_dirichlet(assemble_mass(space, config.weight_field), space)
    pairs = smallest_eigenpairs(A, B, k=config.index, tol=config.tol, max_iter=config.max_iter, cg_tol=config.cg_tol)
    return pairs[-1]


def select_reference(config: RunConfig, finest: FeSpace) -> EigenReference:
    """Exact unit-square eigenpair for the Laplacian, otherwise a direct solve on the finest space refined further."""
    if config.on_unit_square and config.problem == "laplace":
        reference = unit_square_reference(config.index)
    else:
        space = FeSpace(refine_times(finest.mesh, REFERENCE_EXTRA_REFINEMENTS), finest.order)
        reference = direct_reference(direct_solve(space, config).value)
    logger.info(f"Reference eigenvalue {reference.value:.14g} ({reference.label})")
    return reference


def check_min_max(config: RunConfig, reference: EigenReference, rows: list[ConvergenceRow]) -> None:
    """Discrete first eigenvalues bound the exact one from above."""
    if config.index != 1 or not reference.exact:
        return
    for row in rows:
        if row.lambda_ < reference.value * (1.0 - MIN_MAX_SLACK):
            raise BoundViolationError(
                f"Eigenvalue {row.lambda_:.14g} at level {row.level} is below the exact value {reference.value:.14g}."
            )


def fill_rates(rows: list[ConvergenceRow], sizes: list[float]) -> None:
    rate_lambda, saturated = estimate_rate([row.err_lambda for row in rows], sizes, floor=SATURATION_FLOOR)
    rate_energy, _ = estimate_rate([row.err_energy for row in rows], sizes)
    for row, r_lambda, r_energy, flag in zip(rows, rate_lambda, rate_energy, saturated):
        row.rate_lambda = r_lambda
        row.rate_energy = r_energy
        row.saturated = flag


# --- Runs ---

def run_direct(config: RunConfig) -> RunReport:
    """Fine-space eigensolve on every mesh of the sweep."""
    meshes = base_meshes(config)
    spaces = [(m, FeSpace(mesh, config.order)) for m, mesh in meshes]
    reference = select_reference(config, spaces[-1][1])

    rows = []
    for position, (m, space) in enumerate(spaces, start=1):
        started = time.perf_counter()
        pair = direct_solve(space, config)
        wall_ms = 1000.0 * (time.perf_counter() - started)
        err_energy, err_l2 = eigenfunction_errors(space, pair.vector, reference)
        rows.append(ConvergenceRow(
            level=position,
            h_or_p=space.h,
            dofs=space.n_free,
            lambda_=pair.value,
            err_lambda=abs(pair.value - reference.value),
            err_energy=err_energy,
            err_l2=err_l2,
            wall_ms=wall_ms,
            m=m,
        ))
        logger.info(f"Direct {space}: lambda={pair.value:.14g}")

    fill_rates(rows, [space.h for _, space in spaces])
    check_min_max(config, reference, rows)
    return RunReport(method="direct", index=config.index, reference_label=reference.label,
                     reference_value=reference.value, rows=rows)


def _trace_rows(trace: CorrectionTrace, way: str, m: int | None) -> list[ConvergenceRow]:
    return [
        ConvergenceRow(
            level=record.level,
            h_or_p=float(record.order) if way == "multispace" else record.h,
            dofs=record.dofs,
            lambda_=record.value,
            err_lambda=record.err_value,
            err_energy=record.err_energy,
            err_l2=record.err_l2,
            wall_ms=record.wall_ms,
            m=m,
            stage=record.stage,
        )
        for record in trace.records
    ]


def run_multilevel(config: RunConfig, method: str = "mlc") -> RunReport:
    """
    Multilevel correction for every coarse mesh of the sweep. Rows are emitted
    per sweep entry and level; rates compare the same level across the sweep
    against the coarse mesh size H.
    """
    meshes = base_meshes(config)
    hierarchies = []
    for m, mesh in meshes:
        hierarchies.append((m, build_hierarchy(
            config.way,
            m=m,
            n_levels=config.levels,
            order=config.order,
            diffusion=config.diffusion_field,
            weight=config.weight_field,
            mesh=None if m is not None else mesh,
            refine_step=config.refine_step,
        )))
    reference = select_reference(config, hierarchies[-1][1].spaces[-1])

    per_sweep = []
    for m, hierarchy in hierarchies:
        _, trace = multi_level_solve(
            hierarchy,
            index=config.index,
            selection=config.selection,
            reference=reference,
            verify_bounds=config.verify_bounds,
            tol=config.tol,
            cg_tol=config.cg_tol,
            max_iter=config.max_iter,
        )
        per_sweep.append((hierarchy, _trace_rows(trace, config.way, m)))

    coarse_sizes = [hierarchy.coarse.h for hierarchy, _ in per_sweep]
    for level in range(config.levels):
        fill_rates([rows[level] for _, rows in per_sweep], coarse_sizes)

    rows = [row for _, sweep_rows in per_sweep for row in sweep_rows]
    check_min_max(config, reference, rows)
    return RunReport(method=method, way=config.way, index=config.index, reference_label=reference.label,
                     reference_value=reference.value, rows=rows)


def run_two_grid(config: RunConfig) -> RunReport:
    """Coarse eigensolve, one fine source solve and the Rayleigh quotient."""
    return run_multilevel(config.model_copy(update={"levels": 2}), method="two-grid")


# --- Output ---

def export_finest_pencil(config: RunConfig, stem: Path | str) -> tuple[Path, Path]:
    """MatrixMarket files of the reduced pencil on the finest mesh of the sweep."""
    _, mesh = base_meshes(config)[-1]
    space = FeSpace(mesh, config.order)
    A = apply_dirichlet(assemble_stiffness(space, config.diffusion_field), space)
    B = apply_dirichlet(assemble_mass(space, config.weight_field), space)
    try:
        return export_pencil(A, B, stem)
    except OSError as e:
        raise ReportWriteError(f"Cannot write pencil {stem}: {e}")


def write_csv(report: RunReport, path: Path | str) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as file:
            writer = csv.DictWriter(file, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            for row in report.rows:
                writer.writerow(row.csv_record())
    except OSError as e:
        raise ReportWriteError(f"Cannot write {path}: {e}")
    logger.info(f"Wrote {len(report.rows)} rows to {path}")
    return path


def _fmt(value: float | None, spec: str) -> str:
    return "-" if value is None else format(value, spec)


def format_summary(report: RunReport) -> str:
    """Human-readable table of a run."""
    title = f"{report.method}" + (f" ({report.way})" if report.way and report.method != "direct" else "")
    lines = [
        f"{title}, eigenvalue {report.index}, reference {report.reference_value:.12g} [{report.reference_label}]",
        f"{'m':>5} {'lvl':>3} {'stage':>10} {'h/p':>9} {'dofs':>8} {'lambda':>20} "
        f"{'err':>10} {'rate':>6} {'err_a':>10} {'rate_a':>6} {'ms':>9}",
    ]
    for row in report.rows:
        rate = "sat" if row.saturated else _fmt(row.rate_lambda, ".2f")
        lines.append(
            f"{_fmt(row.m, 'd'):>5} {row.level:>3} {row.stage:>10} {row.h_or_p:>9.4g} {row.dofs:>8} "
            f"{row.lambda_:>20.14g} {_fmt(row.err_lambda, '.3e'):>10} {rate:>6} "
            f"{_fmt(row.err_energy, '.3e'):>10} {_fmt(row.rate_energy, '.2f'):>6} {row.wall_ms:>9.1f}"
        )
    return "\n".join(lines)
