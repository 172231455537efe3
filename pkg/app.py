"""
Multilevel Eigen Command Line
Runs direct, two-grid and multilevel correction eigenvalue studies on the unit
square (or an imported Triangle mesh), writes CSV reports and manages mesh files.
"""
import logging
import sys
from functools import wraps
from pathlib import Path

import click
from dotenv import load_dotenv

from schemas.config_schemas import RunConfig
from services.exceptions import MultilevelEigenError
from services.experiment_service import (
    export_finest_pencil,
    format_summary,
    run_direct,
    run_multilevel,
    run_two_grid,
    write_csv,
)
from services.mesh_service import load_mesh, refine_times, save_mesh, unit_square_mesh
from utils import load_config_file, setup_logging

PROJ_DIR = Path(__file__).parent

load_dotenv(dotenv_path=PROJ_DIR / ".env")

logger = logging.getLogger("multilevel_eigen")


def handle_errors(command):
    """Report project errors on stderr and exit with their exit code."""
    @wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except MultilevelEigenError as e:
            logger.error(str(e))
            click.echo(f"Error: {e}", err=True)
            sys.exit(e.exit_code)
    return wrapper


def run_options(command):
    """Options shared by the study commands; None means "not given"."""
    options = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                     help="key=value or YAML file with run settings."),
        click.option("--m", "m", multiple=True, help="Base subdivisions, repeatable or comma-separated."),
        click.option("--mesh", default=None, help="Path stem of a .node/.ele mesh to use instead of the unit square."),
        click.option("--refinements", default=None, help="Refinement sweep for an imported mesh, comma-separated."),
        click.option("--problem", type=click.Choice(["laplace", "elliptic"]), default=None),
        click.option("--diffusion", default=None, help="Positive constant or preset: unit, linear, bump."),
        click.option("--weight", default=None, help="Positive constant or preset: unit, linear, bump."),
        click.option("--index", type=int, default=None, help="Eigenpair index, 1 = smallest."),
        click.option("--order", type=click.IntRange(1, 3), default=None, help="Element order of the coarse space."),
        click.option("--tol", type=float, default=None, help="Eigensolver tolerance."),
        click.option("--cg-tol", type=float, default=None, help="CG relative residual tolerance."),
        click.option("--max-iter", type=int, default=None, help="Eigensolver sweep limit."),
        click.option("--out", type=click.Path(dir_okay=False), default=None, help="CSV output path."),
        click.option("-v", "--verbose", count=True, help="-v for INFO, -vv for DEBUG."),
    ]
    for option in reversed(options):
        command = option(command)
    return command


def ladder_options(command):
    options = [
        click.option("--way", type=click.Choice(["multigrid", "multispace"]), default=None),
        click.option("--refine-step", type=int, default=None, help="Refinements per level for an imported mesh."),
        click.option("--selection", type=click.Choice(["index", "closest"]), default=None,
                     help="Eigenpair taken from each augmented problem."),
        click.option("--verify-bounds/--no-verify-bounds", default=None,
                     help="Solve directly on every level and assert the eigenvalue bounds."),
    ]
    for option in reversed(options):
        command = option(command)
    return command


def build_config(config_path: str | None, **cli_values) -> RunConfig:
    """Defaults, then the config file, then command-line flags."""
    values = load_config_file(config_path) if config_path else {}
    if not cli_values.get("m"):
        cli_values.pop("m", None)
    values.update({key: value for key, value in cli_values.items() if value is not None})
    return RunConfig.build(**values)


def report(run, config: RunConfig) -> None:
    result = run(config)
    click.echo(format_summary(result))
    if config.out:
        path = write_csv(result, config.out)
        click.echo(f"CSV written to {path}")


@click.group()
def cli():
    """Finite element eigenvalue studies with multilevel correction."""


@cli.command()
@run_options
@click.option("--export-pencil", "export_stem", default=None,
              help="Also write the finest reduced pencil as <stem>_A.mtx and <stem>_B.mtx.")
@handle_errors
def direct(config_path, verbose, export_stem, **values):
    """Direct eigensolve on every mesh of the sweep."""
    setup_logging(verbose)
    config = build_config(config_path, levels=1, **values)
    report(run_direct, config)
    if export_stem:
        paths = export_finest_pencil(config, export_stem)
        click.echo(f"Pencil written to {paths[0]} and {paths[1]}")


@cli.command("two-grid")
@run_options
@ladder_options
@handle_errors
def two_grid(config_path, verbose, **values):
    """Coarse eigensolve, one fine source solve, Rayleigh quotient."""
    setup_logging(verbose)
    report(run_two_grid, build_config(config_path, levels=2, **values))


@cli.command()
@run_options
@ladder_options
@click.option("--levels", type=int, default=None, help="Number of levels, coarse space included.")
@handle_errors
def mlc(config_path, verbose, **values):
    """Multilevel correction scheme."""
    setup_logging(verbose)
    report(run_multilevel, build_config(config_path, **values))


@cli.group()
@click.option("-v", "--verbose", count=True, help="-v for INFO, -vv for DEBUG.")
@handle_errors
def mesh(verbose):
    """Generate and refine Triangle mesh files."""
    setup_logging(verbose)


@mesh.command()
@click.option("--m", type=int, required=True, help="Subdivisions per side of the unit square.")
@click.option("--out", required=True, help="Output path stem.")
@handle_errors
def gen(m, out):
    """Structured unit-square mesh."""
    node_path, ele_path = save_mesh(unit_square_mesh(m), out)
    click.echo(f"Wrote {node_path} and {ele_path}")


@mesh.command()
@click.argument("source")
@click.option("--times", type=click.IntRange(min=1), default=1, help="Number of regular refinements.")
@click.option("--out", required=True, help="Output path stem.")
@handle_errors
def refine(source, times, out):
    """Regular refinement of a mesh file."""
    refined = refine_times(load_mesh(source), times)
    node_path, ele_path = save_mesh(refined, out)
    click.echo(f"Wrote {node_path} and {ele_path} ({refined.n_triangles} triangles)")


if __name__ == "__main__":
    cli()
