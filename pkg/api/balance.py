# api/balance.py
import click

from api.common import command_errors, echo_json, finish, format_option, load_system, source_argument
from services.expr_core import is_zero, render
from services.phs_model import power_balance


def _faces_text(sys, letter: str) -> str:
    axis = sys.space.independent.index(letter)
    lo, hi = sys.domain[axis]
    return f"at {letter}={lo:g}, {letter}={hi:g}"


@click.command("balance")
@source_argument
@format_option
@command_errors
def balance(source: str, output_format: str):
    """Print the symbolic power balance Ḣ = −∫Q + ∫u⌋y + boundary terms."""
    sys = load_system(source)
    pb = power_balance(sys)
    closes = is_zero(pb.closure_residual)
    letters = sys.space.independent

    if output_format == "json":
        echo_json({
            "model": sys.name,
            "rates": dict(zip(sys.fields, pb.rates.components)),
            "outputs": dict(zip(sys.inputs, pb.outputs)),
            "dissipation": pb.dissipation,
            "domain_port": pb.domain_port,
            "boundary_port": dict(zip(letters, pb.boundary_port_rendered)),
            "skew_extra": dict(zip(letters, pb.skew_extra.components)),
            "dissipation_extra": dict(zip(letters, pb.dissipation_extra.components)),
            "input_extra": dict(zip(letters, pb.input_extra.components)),
            "split": pb.split,
            "faces": list(pb.faces),
            "closure_residual": pb.closure_residual,
            "closes": closes,
        })
        finish(not closes)
        return

    for field, rate in zip(sys.fields, pb.rates.components):
        click.echo(f"dot({field}) = {render(rate)}")
    for name, y in zip(sys.inputs, pb.outputs):
        click.echo(f"y[{name}] = {render(y)}")
    click.echo(f"dissipation = {render(pb.dissipation)}")
    click.echo(f"domain_port = {render(pb.domain_port)}")
    for letter, text in zip(letters, pb.boundary_port_rendered):
        click.echo(f"boundary_port[{letter}] = {text} {_faces_text(sys, letter)}")
    extras = (("skew_extra", pb.skew_extra), ("dissipation_extra", pb.dissipation_extra),
              ("input_extra", pb.input_extra))
    for name, density in extras:
        for letter, component in zip(letters, density.components):
            if not is_zero(component):
                click.echo(f"{name}[{letter}] = {render(component)}")
    click.echo(f"split = {pb.split}")
    for face in pb.faces:
        click.echo(f"face {face.coordinate}={face.position:g} ({face.side}) = {render(face.value)}")
    if closes:
        click.echo("PASS power balance closes")
    else:
        click.echo(f"FAIL power balance: residual {render(pb.closure_residual)}")
    finish(not closes)
