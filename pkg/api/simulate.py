# api/simulate.py
import logging
from typing import Dict, Optional, Tuple

import click

from api.common import command_errors, load_system, source_argument
from schemas.phs import BoundaryCondition
from services.discrete_sim import Grid1D, initial_state, run
from services.expr_core import parse
from services.phs_model import PHSystem
from utils.csv_writer import write_ledger_csv, write_trajectory_csv

logger = logging.getLogger(__name__)


def _initial_overrides(sys: PHSystem, assignments: Tuple[str, ...]) -> Dict[str, object]:
    overrides = {}
    for text in assignments:
        field, sep, expr = text.partition("=")
        field = field.strip()
        if not sep or field not in sys.fields:
            raise click.BadParameter(f"expected FIELD=EXPR with FIELD in {', '.join(sys.fields)}", param_hint="--initial")
        overrides[field] = parse(expr, sys.space)
    return overrides


def actuated(sys: PHSystem, rate_text: str) -> PHSystem:
    """Prescribe the rate of the first field at the upper face, replacing its condition there."""
    letter = sys.space.independent[0]
    field = sys.fields[0]
    rate = parse(rate_text, sys.space, allow_time=True)
    kept = tuple(
        bc for bc in sys.boundary
        if not (bc.field == field and bc.coordinate == letter and sys.side_of(bc) == "upper")
    )
    condition = BoundaryCondition(coordinate=letter, position=sys.domain[0][1], field=field, kind="rate", rate=rate)
    logger.info(f"{sys.name}: actuating '{field}' at {letter}={condition.position:g}")
    return sys.model_copy(update={"boundary": kept + (condition,)})


@click.command("simulate")
@source_argument
@click.option("--nx", type=click.IntRange(min=3), default=101, show_default=True, help="Grid nodes")
@click.option("--dt", type=click.FloatRange(min=0, min_open=True), default=1e-3, show_default=True)
@click.option("--tend", type=click.FloatRange(min=0), default=1.0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Trajectory CSV (t,X,fields)")
@click.option("--ledger", type=click.Path(dir_okay=False), default=None, help="Power ledger CSV")
@click.option("--stride", type=click.IntRange(min=1), default=1, show_default=True, help="Trajectory sampling")
@click.option("--initial", "initial", multiple=True, metavar="FIELD=EXPR", help="Override an initial profile")
@click.option("--actuate", default=None, metavar="EXPR", help="Rate of the first field at the upper face, in t")
@command_errors
def simulate(source: str, nx: int, dt: float, tend: float, out: str, ledger: Optional[str],
             stride: int, initial: Tuple[str, ...], actuate: Optional[str]):
    """Run the structure-preserving 1-D discretization and write trajectory and ledger CSVs."""
    sys = load_system(source)
    if actuate is not None:
        sys = actuated(sys, actuate)
    grid = Grid1D.for_system(sys, nx)
    start = initial_state(sys, grid, _initial_overrides(sys, initial))

    result = run(sys, grid, start, None, dt, tend, stride=stride)

    write_trajectory_csv(result.trajectory, grid.nodes, sys.fields, out)
    if ledger is not None:
        write_ledger_csv(result.ledger, ledger)

    if result.ledger:
        worst = max(abs(row.residual) for row in result.ledger)
        final = result.ledger[-1]
        click.echo(
            f"simulated {sys.name}: {len(result.ledger)} steps to t={final.t:.6g}, "
            f"H={final.H:.12g}, max |residual|={worst:.3e}"
        )
    else:
        click.echo(f"simulated {sys.name}: 0 steps")
