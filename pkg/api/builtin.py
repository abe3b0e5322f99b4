# api/builtin.py
from pathlib import Path
from typing import Optional

import click

from api.common import command_errors
from services.builtin_models import MHD_DIMENSIONS, builtin_names, emit


@click.command("builtin")
@click.argument("name", type=click.Choice(builtin_names()))
@click.option("--emit", "emit_path", type=click.Path(dir_okay=False), default=None,
              help="Write the model file here instead of standard output")
@click.option("--dim", type=click.Choice([str(d) for d in MHD_DIMENSIONS]), default=None, help="mhd only")
@command_errors
def builtin(name: str, emit_path: Optional[str], dim: Optional[str]):
    """Render a built-in model as model-file text."""
    options = {}
    if dim is not None:
        if name != "mhd":
            raise click.UsageError("--dim only applies to the mhd model")
        options["dim"] = int(dim)
    text = emit(name, **options)
    if emit_path is None:
        click.echo(text, nl=False)
        return
    Path(emit_path).write_text(text, encoding="utf-8")
    click.echo(f"wrote {name} to {emit_path}", err=True)
