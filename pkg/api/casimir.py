# api/casimir.py
from typing import Optional

import click

from api.common import command_errors, echo_json, finish, format_option, load_system, source_argument
from schemas.phs import VerdictStatus
from services.expr_core import Density, parse, render
from services.phs_model import casimir_check


@click.command("casimir")
@source_argument
@click.option("--candidate", default=None, help="First-order density; defaults to the model's derived 'C'")
@format_option
@command_errors
def casimir(source: str, candidate: Optional[str], output_format: str):
    """Check whether ∫𝒞 dX is a Casimir (and conserved) for the model."""
    sys = load_system(source)
    if candidate is not None:
        integrand = parse(candidate, sys.space)
    elif "C" in sys.derived:
        integrand = sys.derived["C"]
    else:
        raise click.UsageError("no --candidate given and the model derives no 'C'")

    verdict = casimir_check(sys, Density(space=sys.space, integrand=integrand))
    failed = verdict.status == VerdictStatus.FAIL

    if output_format == "json":
        boundary = verdict.boundary_condition
        echo_json({
            "model": sys.name,
            "candidate": integrand,
            "status": verdict.status,
            "message": verdict.message,
            "variational_derivative": verdict.variational_derivative,
            "domain_condition_residual": verdict.domain_condition_residual,
            "boundary_condition": boundary.components if boundary is not None else None,
            "faces": list(verdict.faces),
            "input_pairing": verdict.input_pairing,
            "is_casimir": verdict.is_casimir,
            "is_conserved": verdict.is_conserved,
        })
        finish(failed)
        return

    click.echo(f"{verdict.status.value} Casimir {render(integrand)}: {verdict.message}")
    if verdict.variational_derivative:
        click.echo(f"delta = ({', '.join(render(c) for c in verdict.variational_derivative)})")
        click.echo(f"residual = ({', '.join(render(c) for c in verdict.domain_condition_residual)})")
    for face in verdict.faces:
        click.echo(f"face {face.coordinate}={face.position:g} ({face.side}) = {render(face.value)}")
    if verdict.status != VerdictStatus.INDETERMINATE:
        click.echo(f"input_pairing = {render(verdict.input_pairing)}")
    finish(failed)
