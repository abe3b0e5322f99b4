# api/verify.py
import click

from api.common import command_errors, echo_json, finish, format_option, load_system, source_argument, verdict_line
from schemas.phs import VerdictStatus


@click.command("verify")
@source_argument
@format_option
@command_errors
def verify(source: str, output_format: str):
    """Print the structural verdicts of a model (J skew, R self-adjoint and non-negative, G adjoint)."""
    sys = load_system(source, strict=False)
    failed = any(v.status == VerdictStatus.FAIL for v in sys.verdicts)

    if output_format == "json":
        echo_json({"model": sys.name, "verdicts": list(sys.verdicts), "passed": not failed})
    else:
        for verdict in sys.verdicts:
            click.echo(verdict_line(verdict))
    finish(failed)
