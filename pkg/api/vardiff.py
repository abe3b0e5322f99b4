# api/vardiff.py
import click

from api.common import command_errors, echo_json, format_option, load_system, source_argument
from services.expr_core import render
from services.variational import boundary_operator, variational_derivative


@click.command("vardiff")
@source_argument
@format_option
@command_errors
def vardiff(source: str, output_format: str):
    """Print δ_αℌ, the boundary operator δ∂ℌ and the model's derived quantities."""
    sys = load_system(source)
    delta = variational_derivative(sys.hamiltonian)
    covector = boundary_operator(sys.hamiltonian)
    letters = sys.space.independent

    if output_format == "json":
        echo_json({
            "model": sys.name,
            "variational_derivative": dict(zip(sys.fields, delta.components)),
            "boundary_operator": {
                field: dict(zip(letters, row)) for field, row in zip(sys.fields, covector.rows)
            },
            "derived": dict(sys.derived),
        })
        return

    for field, component in zip(sys.fields, delta.components):
        click.echo(f"delta[{field}] = {render(component)}")
    for field, row in zip(sys.fields, covector.rows):
        for letter, entry in zip(letters, row):
            if entry != 0:
                click.echo(f"boundary[{field},{letter}] = {render(entry)}")
    for name, expr in sys.derived.items():
        click.echo(f"{name} = {render(expr)}")
